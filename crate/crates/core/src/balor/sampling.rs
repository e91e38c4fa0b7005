//! Token selection: temperature, then top-k, then top-p, then a draw.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::engine::tensor::{argmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
pub fn unit_draw(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Distribution left after temperature scaling and top-k / top-p truncation.
/// Entries outside the kept set are exactly zero.
pub fn filtered_distribution(logits: &[f64], cfg: &SamplingConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
    let mut p = softmax(&scaled);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    if let Some(k) = cfg.top_k {
        keep = keep.min(k.max(1));
    }
    if let Some(top_p) = cfg.top_p {
        let mass: f64 = order[..keep].iter().map(|&i| p[i]).sum();
        let mut acc = 0.0;
        for (n, &i) in order[..keep].iter().enumerate() {
            acc += p[i] / mass;
            if acc >= top_p {
                keep = n + 1;
                break;
            }
        }
    }
    for &i in &order[keep..] {
        p[i] = 0.0;
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Picks the next token. Temperature `0` is the argmax (lowest id on ties)
/// and consumes no randomness.
pub fn select_token(logits: &[f64], cfg: &SamplingConfig, rng: &mut impl RngCore) -> u32 {
    if cfg.temperature == 0.0 {
        return argmax(logits) as u32;
    }
    let p = filtered_distribution(logits, cfg);
    let u = unit_draw(rng);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        acc += pi;
        last = i;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}
