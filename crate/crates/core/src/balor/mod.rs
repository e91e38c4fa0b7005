//! Contrastive logit recalibration.
//!
//! Given target logits `l_T` (patched run) and contrastive logits `l_T*`
//! (unpatched run with the noun restored), the recalibrated distribution is
//!
//! ```text
//! p(y) = softmax((1 + α) · l_T(y) − α · l_T*(y))
//! ```
//!
//! For any two tokens the log-odds are affine in `α`:
//! `log p(y1)/p(y2) = (1 + α) Δ_T − α Δ*`, with `Δ = l(y1) − l(y2)`.

mod decode;
pub mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::tensor::softmax;
use crate::patchscope::{PatchError, PatchPlan};

pub use decode::{
    decode, decode_with_vectors, first_step_distribution, forced_score, vanilla_decode,
    vanilla_decode_with_vectors, DecodeOutput, StepRecord, TopEntry,
};

#[derive(Debug, Error)]
pub enum BalorError {
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("target and contrastive sequences are misaligned: {0}")]
    SpanMismatch(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

impl From<crate::engine::EngineError> for BalorError {
    fn from(e: crate::engine::EngineError) -> Self {
        BalorError::Patch(e.into())
    }
}

pub type Result<T, E = BalorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// The sampled token is appended to both sequences.
    #[serde(alias = "s")]
    Shared,
    /// The contrastive side follows its own greedy continuation.
    #[serde(alias = "d")]
    Divided,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "shared" => Ok(Mode::Shared),
            "d" | "divided" => Ok(Mode::Divided),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalorConfig {
    pub alpha: f64,
    pub mode: Mode,
    /// `0` selects the argmax.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
}

impl Default for BalorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mode: Mode::Shared,
            temperature: 0.0,
            top_k: None,
            top_p: None,
            max_new_tokens: 16,
            rng_seed: 0,
        }
    }
}

impl BalorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BalorError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            ));
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive".into());
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top_p must lie in (0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn sampling(&self) -> sampling::SamplingConfig {
        sampling::SamplingConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
        }
    }
}

/// Target/contrastive token sequences; they differ only on the noun span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub target_tokens: Vec<u32>,
    pub contrastive_tokens: Vec<u32>,
    pub plan: PatchPlan,
}

/// Replaces the filler span of the target with the noun's own tokens.
pub fn build_contrastive(plan: &PatchPlan) -> Result<ContrastivePair> {
    let noun = plan.source.noun_tokens();
    let slots = &plan.target.placeholder_positions;
    if noun.len() != slots.len() {
        return Err(BalorError::SpanMismatch(format!(
            "{} noun tokens for {} placeholder slots",
            noun.len(),
            slots.len()
        )));
    }
    let target = plan.target.tokens.clone();
    let mut contrastive = target.clone();
    for (&p, &id) in slots.iter().zip(&noun) {
        let slot = contrastive.get_mut(p).ok_or_else(|| {
            BalorError::SpanMismatch(format!(
                "slot {p} outside target of length {}",
                target.len()
            ))
        })?;
        *slot = id;
    }
    Ok(ContrastivePair {
        target_tokens: target,
        contrastive_tokens: contrastive,
        plan: plan.clone(),
    })
}

/// `(1 + α) · l_T − α · l_T*`.
pub fn recalibrated_logits(l_t: &[f64], l_star: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(l_t.len(), l_star.len(), "logit vectors differ in length");
    l_t.iter()
        .zip(l_star)
        .map(|(&a, &b)| (1.0 + alpha) * a - alpha * b)
        .collect()
}

/// Recalibrated distribution `softmax((1 + α) · l_T − α · l_T*)`.
pub fn recalibrate(l_t: &[f64], l_star: &[f64], alpha: f64) -> Vec<f64> {
    softmax(&recalibrated_logits(l_t, l_star, alpha))
}

/// Returns `(log p(y1)/p(y2), (1 + α) Δ_T − α Δ*)`; the two agree.
pub fn log_odds_decomposition(
    l_t: &[f64],
    l_star: &[f64],
    alpha: f64,
    y1: usize,
    y2: usize,
) -> (f64, f64) {
    let z = recalibrated_logits(l_t, l_star, alpha);
    let lse = crate::engine::tensor::log_sum_exp(&z);
    let lhs = (z[y1] - lse) - (z[y2] - lse);
    let d_t = l_t[y1] - l_t[y2];
    let d_s = l_star[y1] - l_star[y2];
    (lhs, (1.0 + alpha) * d_t - alpha * d_s)
}

/// Smallest `α` at which `y1` overtakes `y2`: `0` when `y1` already wins (or
/// ties), `−Δ_T / (Δ_T − Δ*)` when the log-odds slope is positive, else `None`.
pub fn flip_threshold(l_t: &[f64], l_star: &[f64], y1: usize, y2: usize) -> Option<f64> {
    let d_t = l_t[y1] - l_t[y2];
    let d_s = l_star[y1] - l_star[y2];
    if d_t >= 0.0 {
        return Some(0.0);
    }
    let slope = d_t - d_s;
    (slope > 0.0).then(|| -d_t / slope)
}
