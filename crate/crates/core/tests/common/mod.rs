//! Shared helpers for the integration tests: a deliberately plain reference
//! forward pass and random model/prompt generators.

#![allow(dead_code)]

use patchlens::engine::{make_toy_model, BiasRig, ModelBundle, ToyOptions};
use rand::seq::SliceRandom;
use rand::Rng;

/// Residual stream after every layer plus the final logits, computed with
/// nested loops straight from the weight tensors.
pub struct NaiveTrace {
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    (0..x.len()).map(|i| g[i] * (x[i] - mu) / s + b[i]).collect()
}

fn lin(w: &[f64], rows: usize, cols: usize, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = b[r];
        for c in 0..cols {
            acc += w[r * cols + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `overwrite` replaces `hidden[layer][pos]` with the given vectors.
pub fn naive_forward(
    m: &ModelBundle<f64>,
    tokens: &[u32],
    overwrite: Option<(usize, &[usize], &[Vec<f64>])>,
) -> NaiveTrace {
    let c = &m.config;
    let d = c.d_model;
    let nh = c.n_heads;
    let hd = d / nh;
    let n = tokens.len();
    let patch = |layer: usize, x: &mut Vec<Vec<f64>>| {
        if let Some((l, pos, vecs)) = overwrite {
            if l == layer {
                for (p, v) in pos.iter().zip(vecs) {
                    x[*p] = v.clone();
                }
            }
        }
    };
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    m.token_embedding.row(tokens[i] as usize)[j] + m.position_embedding.row(i)[j]
                })
                .collect()
        })
        .collect();
    patch(0, &mut x);
    let mut hidden = vec![x.clone()];
    for (l, b) in m.blocks.iter().enumerate() {
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &b.ln1.weight, &b.ln1.bias, c.norm_eps))
            .collect();
        let ap = |li: &patchlens::engine::Linear<f64>, v: &[f64]| {
            lin(li.weight.as_slice(), li.weight.rows(), li.weight.cols(), &li.bias, v)
        };
        let q: Vec<Vec<f64>> = a.iter().map(|r| ap(&b.q, r)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| ap(&b.k, r)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| ap(&b.v, r)).collect();
        let mut heads = vec![vec![0.0; d]; n];
        for h in 0..nh {
            let sl = h * hd..(h + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        sl.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for t in sl.clone() {
                        heads[i][t] += e[j] / z * v[j][t];
                    }
                }
            }
        }
        for i in 0..n {
            let o = ap(&b.o, &heads[i]);
            for j in 0..d {
                x[i][j] += o[j];
            }
            let u = layer_norm(&x[i], &b.ln2.weight, &b.ln2.bias, c.norm_eps);
            let f: Vec<f64> = ap(&b.fc, &u).into_iter().map(gelu).collect();
            let p = ap(&b.proj, &f);
            for j in 0..d {
                x[i][j] += p[j];
            }
        }
        patch(l + 1, &mut x);
        hidden.push(x.clone());
    }
    let logits = x
        .iter()
        .map(|r| {
            let z = match &m.final_norm {
                Some(ln) => layer_norm(r, &ln.weight, &ln.bias, c.norm_eps),
                None => r.clone(),
            };
            lin(
                m.unembedding.as_slice(),
                m.unembedding.rows(),
                m.unembedding.cols(),
                &m.output_bias,
                &z,
            )
        })
        .collect();
    NaiveTrace { hidden, logits }
}

pub fn toy(seed: u64) -> ModelBundle<f32> {
    make_toy_model(seed, &ToyOptions::default()).unwrap()
}

pub fn small_toy(seed: u64, n_layers: usize) -> ModelBundle<f32> {
    make_toy_model(
        seed,
        &ToyOptions {
            n_layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq: 48,
            ..ToyOptions::default()
        },
    )
    .unwrap()
}

/// Toy model with the bias rig used for the flip tests.
pub fn rigged(strength: f64) -> ModelBundle<f32> {
    make_toy_model(
        7,
        &ToyOptions {
            rig: Some(BiasRig::new("green", strength)),
            ..ToyOptions::default()
        },
    )
    .unwrap()
}

pub const WORDS: &[&str] = &[
    "the", "color", "of", "broccoli", "is", "green", "purple", "red", "apple", "banana", "a",
    "tomato", "yellow", "white", "carrot", "orange",
];

/// Random sentence of known words with length in `lo..=hi`.
pub fn random_prompt(rng: &mut impl Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Color nouns whose attributes all encode in the toy vocabulary.
pub const COLOR_ROWS: &[(&str, &str, &str)] = &[
    ("broccoli", "green", "purple"),
    ("tomato", "red", "green"),
    ("banana", "yellow", "green"),
    ("carrot", "orange", "purple"),
    ("cabbage", "green", "purple"),
    ("cherry", "red", "black"),
    ("lime", "green", "yellow"),
    ("lemon", "yellow", "green"),
    ("grape", "green", "purple"),
    ("pepper", "green", "red"),
];

use patchlens::balor::{
    build_contrastive, decode_with_vectors, first_step_distribution, flip_threshold,
    forced_score, vanilla_decode_with_vectors, BalorConfig, Mode,
};
use patchlens::dataset::{
    assign_attributes, bias_split, build_datapoints, builtin_color_lexicon, builtin_color_nouns,
    builtin_corpus, scan_corpus, Datapoint, ModelChooser, OptionOrder, ScanOptions,
};
use patchlens::eval::{compute_sr, run_method, EvalOptions, MethodKind, MethodSpec};
use patchlens::patchscope::{extract_hidden, PatchPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NOUNS: &[&str] = &["cabbage", "lime", "grape", "cherry", "lemon", "pepper"];

/// Greedy decodes at `alpha = 0` versus plain patched decodes on random
/// plans. Returns the number of `(case, mode)` pairs whose tokens differ.
pub fn collapse_mismatches(cases: usize, seed: u64) -> usize {
    let m = toy(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let noun = *NOUNS.choose(&mut rng).unwrap();
        let src = format!("{} {noun} {}", random_prompt(&mut rng, 1, 5), random_prompt(&mut rng, 0, 4));
        let tgt = format!("{} {{x}} {}", random_prompt(&mut rng, 1, 5), random_prompt(&mut rng, 1, 4));
        let ls = rng.gen_range(0..=m.n_layers());
        let lt = rng.gen_range(0..=m.n_layers());
        let plan = PatchPlan::new(&src, noun, &tgt, ls, lt, &m).unwrap();
        let pair = build_contrastive(&plan).unwrap();
        let vecs = extract_hidden(&plan.source, &m).unwrap();
        let base = BalorConfig {
            alpha: 0.0,
            max_new_tokens: 5,
            ..BalorConfig::default()
        };
        let plain = vanilla_decode_with_vectors(&plan, &vecs, &m, &base).unwrap();
        for mode in [Mode::Shared, Mode::Divided] {
            let cfg = BalorConfig { mode, ..base.clone() };
            let out = decode_with_vectors(&pair, &vecs, &m, &cfg).unwrap();
            if out.tokens != plain.tokens {
                bad += 1;
            }
        }
    }
    bad
}

pub const RIG_STRENGTH: f64 = 3.0;
pub const RIG_LAYER: usize = 1;
pub const ALPHA_GRID: &[f64] = &[0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Color datapoints built from the bundled mini corpus.
pub fn mini_color_dataset() -> Vec<Datapoint> {
    let drafts = assign_attributes(&scan_corpus(
        &builtin_corpus(),
        &builtin_color_nouns(),
        &builtin_color_lexicon(),
        &ScanOptions::default(),
    ));
    build_datapoints(&drafts, &[]).unwrap()
}

#[derive(Debug, Default)]
pub struct FlipReport {
    pub cases: usize,
    pub vanilla_biased: usize,
    /// Cases with a finite threshold inside the grid.
    pub flippable: usize,
    /// Flippable cases where the grid point just above the threshold picks
    /// `a_sec` and the grid point just below still picks the biased token.
    pub flipped_as_predicted: usize,
    pub sr_vanilla: f64,
    pub sr_balor: f64,
    pub biased_subset: usize,
}

fn pick_secondary(pri: f64, sec: f64) -> bool {
    sec > pri
}

/// Runs the rigged-model flip scenario on the green-primary datapoints.
pub fn rig_flip() -> FlipReport {
    let m = rigged(RIG_STRENGTH).to_f64();
    let all = mini_color_dataset();
    let green: Vec<Datapoint> = all.iter().filter(|d| d.a_pri == "green").cloned().collect();
    let mut rep = FlipReport::default();
    let tok = |w: &str| m.tokenizer.encode_continuation(w).unwrap();
    for dp in &green {
        for order in OptionOrder::BOTH {
            rep.cases += 1;
            let plan = PatchPlan::new(
                &dp.source_prompt,
                &dp.noun,
                dp.target_for(order),
                RIG_LAYER,
                RIG_LAYER,
                &m,
            )
            .unwrap();
            let pair = build_contrastive(&plan).unwrap();
            let vecs = extract_hidden(&plan.source, &m).unwrap();
            let (pri, sec) = (tok(&dp.a_pri), tok(&dp.a_sec));
            let choose = |alpha: f64| {
                let p = forced_score(&pair, &vecs, &m, alpha, Mode::Shared, &pri).unwrap();
                let s = forced_score(&pair, &vecs, &m, alpha, Mode::Shared, &sec).unwrap();
                pick_secondary(p, s)
            };
            if !choose(0.0) {
                rep.vanilla_biased += 1;
            }
            let (l_t, l_s, _) = first_step_distribution(&pair, &vecs, &m, 0.0).unwrap();
            let Some(tau) = flip_threshold(&l_t, &l_s, sec[0] as usize, pri[0] as usize) else {
                continue;
            };
            let Some(&above) = ALPHA_GRID.iter().find(|&&a| a > tau) else {
                continue;
            };
            rep.flippable += 1;
            let below = ALPHA_GRID.iter().rev().find(|&&a| a < tau).copied();
            if choose(above) && below.is_none_or(|b| !choose(b)) {
                rep.flipped_as_predicted += 1;
            }
        }
    }

    let (biased, _) = bias_split(&all, &ModelChooser { bundle: &m }).unwrap();
    rep.biased_subset = biased.len();
    let opts = EvalOptions {
        layer: RIG_LAYER,
        ..EvalOptions::default()
    };
    let alpha_max = *ALPHA_GRID.last().unwrap();
    let sr = |kind| {
        let recs = run_method(&biased, &m, &MethodSpec::new(kind, alpha_max), &opts).unwrap();
        compute_sr(&recs).unwrap()
    };
    if !biased.is_empty() {
        rep.sr_vanilla = sr(MethodKind::Vanilla);
        rep.sr_balor = sr(MethodKind::BalorS);
    }
    rep
}

use patchlens::engine::tensor::log_softmax;
use patchlens::engine::{Hook, Readout};

const H: f64 = 1e-5;

fn log_prob(m: &ModelBundle<f64>, toks: &[u32], hook: &Hook<f64>, r: Readout) -> f64 {
    let tr = m.forward(toks, std::slice::from_ref(hook)).unwrap();
    log_softmax(tr.final_logits.row(r.position))[r.token as usize]
}

/// Central differences of the readout log-probability, one vector per slot.
pub fn finite_difference(
    m: &ModelBundle<f64>,
    toks: &[u32],
    layer: usize,
    pos: &[usize],
    vecs: &[Vec<f64>],
    r: Readout,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..vecs.len() {
        let mut g = Vec::new();
        for c in 0..vecs[i].len() {
            let mut plus = vecs.to_vec();
            let mut minus = vecs.to_vec();
            plus[i][c] += H;
            minus[i][c] -= H;
            let fp = log_prob(m, toks, &Hook::overwrite(layer, pos.to_vec(), plus), r);
            let fm = log_prob(m, toks, &Hook::overwrite(layer, pos.to_vec(), minus), r);
            g.push((fp - fm) / (2.0 * H));
        }
        out.push(g);
    }
    out
}

fn rel_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// Relative L2 error of the engine gradient against central differences on
/// `cases` random patched prompts (64-bit).
pub fn gradient_errors(cases: usize, seed: u64) -> Vec<f64> {
    let m = small_toy(3, 2).to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let toks = m.encode_prompt(&random_prompt(&mut rng, 4, 9)).unwrap();
            let n = toks.len();
            let layer = rng.gen_range(0..=m.n_layers());
            let start = rng.gen_range(0..n - 1);
            let pos: Vec<usize> = (start..(start + rng.gen_range(1..=2)).min(n)).collect();
            let vecs: Vec<Vec<f64>> = pos
                .iter()
                .map(|_| (0..m.config.d_model).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let r = Readout {
                position: n - 1,
                token: rng.gen_range(0..m.config.vocab_size as u32),
            };
            let hook = Hook::overwrite(layer, pos.clone(), vecs.clone());
            let g = m.gradient_wrt_hidden(&toks, &hook, r).unwrap();
            assert!((g.log_prob - log_prob(&m, &toks, &hook, r)).abs() < 1e-12);
            rel_l2(&g.per_position, &finite_difference(&m, &toks, layer, &pos, &vecs, r))
        })
        .collect()
}

pub struct SelfPatch {
    pub max_dev_f32: f32,
    /// Cases where the 64-bit logits changed at all.
    pub inexact_f64: usize,
}

/// Overwrites random spans with their own hidden states and compares logits.
pub fn self_patch(cases: usize, seed: u64) -> SelfPatch {
    let m32 = toy(11);
    let m64 = m32.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SelfPatch {
        max_dev_f32: 0.0,
        inexact_f64: 0,
    };
    for _ in 0..cases {
        let toks = m32.encode_prompt(&random_prompt(&mut rng, 3, 14)).unwrap();
        let layer = rng.gen_range(0..=m32.n_layers());
        let pos: Vec<usize> = {
            let a = rng.gen_range(0..toks.len());
            let b = rng.gen_range(a..toks.len().min(a + 3));
            (a..=b).collect()
        };
        let h32 = m32.hidden_states(&toks, layer, &[]).unwrap();
        let v32: Vec<Vec<f32>> = pos.iter().map(|&p| h32.row(p).to_vec()).collect();
        let base = m32.forward(&toks, &[]).unwrap();
        let patched = m32
            .forward(&toks, &[Hook::overwrite(layer, pos.clone(), v32)])
            .unwrap();
        let dev = base
            .final_logits
            .as_slice()
            .iter()
            .zip(patched.final_logits.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        out.max_dev_f32 = out.max_dev_f32.max(dev);

        let h64 = m64.hidden_states(&toks, layer, &[]).unwrap();
        let v64: Vec<Vec<f64>> = pos.iter().map(|&p| h64.row(p).to_vec()).collect();
        let b64 = m64.forward(&toks, &[]).unwrap();
        let p64 = m64.forward(&toks, &[Hook::overwrite(layer, pos, v64)]).unwrap();
        if b64.final_logits != p64.final_logits {
            out.inexact_f64 += 1;
        }
    }
    out
}
