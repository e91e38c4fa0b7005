//! Autoregressive generation with recalibrated logits, plus the plain
//! patched decoder it collapses to at `α = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{select_token, SamplingConfig};
use super::{recalibrate, recalibrated_logits, BalorConfig, ContrastivePair, Mode, Result};
use crate::engine::tensor::{argmax, log_softmax, softmax};
use crate::engine::{Hook, ModelBundle, Scalar};
use crate::patchscope::{extract_hidden, PatchPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub id: u32,
    pub token: String,
    pub value: f64,
}

/// Top-5 summaries of one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: u32,
    /// Patched target logits.
    pub target_top: Vec<TopEntry>,
    /// Contrastive logits; empty for the plain decoder.
    pub contrastive_top: Vec<TopEntry>,
    /// Recalibrated probabilities (plain softmax for the plain decoder).
    pub balor_top: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Generated ids, including a final EOS if one was produced.
    pub tokens: Vec<u32>,
    /// Decoded generation with special tokens dropped.
    pub text: String,
    pub steps: Vec<StepRecord>,
    /// Contrastive-side continuation (equals `tokens` in shared mode).
    pub contrastive_suffix: Vec<u32>,
}

const TOP: usize = 5;

fn top_entries<F: Scalar>(values: &[f64], bundle: &ModelBundle<F>) -> Vec<TopEntry> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(TOP)
        .map(|i| TopEntry {
            id: i as u32,
            token: bundle
                .tokenizer
                .token_str(i as u32)
                .unwrap_or("")
                .to_string(),
            value: values[i],
        })
        .collect()
}

fn logits_f64<F: Scalar>(
    bundle: &ModelBundle<F>,
    tokens: &[u32],
    hooks: &[Hook<F>],
) -> Result<Vec<f64>> {
    Ok(bundle
        .next_token_logits(tokens, hooks)?
        .iter()
        .map(|v| v.f64())
        .collect())
}

fn finish<F: Scalar>(
    bundle: &ModelBundle<F>,
    tokens: Vec<u32>,
    steps: Vec<StepRecord>,
    contrastive_suffix: Vec<u32>,
) -> Result<DecodeOutput> {
    let text = bundle
        .tokenizer
        .decode_text(&tokens)
        .map_err(crate::engine::EngineError::from)?;
    Ok(DecodeOutput {
        tokens,
        text,
        steps,
        contrastive_suffix,
    })
}

/// Recalibrated decoding; the source vectors are extracted from the plan.
pub fn decode<F: Scalar>(
    pair: &ContrastivePair,
    bundle: &ModelBundle<F>,
    cfg: &BalorConfig,
) -> Result<DecodeOutput> {
    let vectors = extract_hidden(&pair.plan.source, bundle)?;
    decode_with_vectors(pair, &vectors, bundle, cfg)
}

/// Recalibrated decoding with pre-extracted source vectors.
///
/// Each step runs the patched target and the plain contrastive sequence,
/// recalibrates the last-position logits and selects a token. In shared mode
/// the token extends both sequences; in divided mode the contrastive side
/// appends its own argmax and stops growing once it emits EOS.
pub fn decode_with_vectors<F: Scalar>(
    pair: &ContrastivePair,
    vectors: &[Vec<F>],
    bundle: &ModelBundle<F>,
    cfg: &BalorConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let hook = [pair.plan.hook(vectors.to_vec())];
    let eos = bundle.tokenizer.specials().eos;
    let sampling = cfg.sampling();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut target = pair.target_tokens.clone();
    let mut contrastive = pair.contrastive_tokens.clone();
    let (mut generated, mut side, mut steps) = (Vec::new(), Vec::new(), Vec::new());
    let mut side_done = false;

    for step in 0..cfg.max_new_tokens {
        if target.len() >= bundle.config.max_seq {
            break;
        }
        let (l_t, l_s) = rayon::join(
            || logits_f64(bundle, &target, &hook),
            || logits_f64(bundle, &contrastive, &[]),
        );
        let (l_t, l_s) = (l_t?, l_s?);
        let z = recalibrated_logits(&l_t, &l_s, cfg.alpha);
        let token = select_token(&z, &sampling, &mut rng);
        steps.push(StepRecord {
            step,
            token,
            target_top: top_entries(&l_t, bundle),
            contrastive_top: top_entries(&l_s, bundle),
            balor_top: top_entries(&softmax(&z), bundle),
        });
        generated.push(token);
        target.push(token);
        match cfg.mode {
            Mode::Shared => {
                contrastive.push(token);
                side.push(token);
            }
            Mode::Divided if !side_done && contrastive.len() < bundle.config.max_seq => {
                let own = argmax(&l_s) as u32;
                contrastive.push(own);
                side.push(own);
                side_done = Some(own) == eos;
            }
            Mode::Divided => {}
        }
        if Some(token) == eos {
            break;
        }
    }
    finish(bundle, generated, steps, side)
}

/// Plain patched decoding with the same token-selection pipeline.
pub fn vanilla_decode<F: Scalar>(
    plan: &PatchPlan,
    bundle: &ModelBundle<F>,
    cfg: &BalorConfig,
) -> Result<DecodeOutput> {
    let vectors = extract_hidden(&plan.source, bundle)?;
    vanilla_decode_with_vectors(plan, &vectors, bundle, cfg)
}

/// Plain patched decoding; `alpha` and `mode` of `cfg` are ignored.
pub fn vanilla_decode_with_vectors<F: Scalar>(
    plan: &PatchPlan,
    vectors: &[Vec<F>],
    bundle: &ModelBundle<F>,
    cfg: &BalorConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let hook = [plan.hook(vectors.to_vec())];
    let eos = bundle.tokenizer.specials().eos;
    let sampling: SamplingConfig = cfg.sampling();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut target = plan.target.tokens.clone();
    let (mut generated, mut steps) = (Vec::new(), Vec::new());
    for step in 0..cfg.max_new_tokens {
        if target.len() >= bundle.config.max_seq {
            break;
        }
        let l_t = logits_f64(bundle, &target, &hook)?;
        let token = select_token(&l_t, &sampling, &mut rng);
        steps.push(StepRecord {
            step,
            token,
            target_top: top_entries(&l_t, bundle),
            contrastive_top: Vec::new(),
            balor_top: top_entries(&softmax(&l_t), bundle),
        });
        generated.push(token);
        target.push(token);
        if Some(token) == eos {
            break;
        }
    }
    finish(bundle, generated, steps, Vec::new())
}

/// Log-probability of force-decoding `continuation` under the recalibrated
/// distribution. With `alpha == 0` the contrastive side is skipped and the
/// result equals the plain patched score bitwise.
pub fn forced_score<F: Scalar>(
    pair: &ContrastivePair,
    vectors: &[Vec<F>],
    bundle: &ModelBundle<F>,
    alpha: f64,
    mode: Mode,
    continuation: &[u32],
) -> Result<f64> {
    let hook = [pair.plan.hook(vectors.to_vec())];
    let mut target = pair.target_tokens.clone();
    let mut contrastive = pair.contrastive_tokens.clone();
    let mut total = 0.0;
    for &tok in continuation {
        let l_t = logits_f64(bundle, &target, &hook)?;
        let z = if alpha == 0.0 {
            l_t
        } else {
            let l_s = logits_f64(bundle, &contrastive, &[])?;
            let z = recalibrated_logits(&l_t, &l_s, alpha);
            match mode {
                Mode::Shared => contrastive.push(tok),
                Mode::Divided => contrastive.push(argmax(&l_s) as u32),
            }
            z
        };
        total += log_softmax(&z)[tok as usize];
        target.push(tok);
    }
    Ok(total)
}

/// Single-step recalibrated probabilities at the end of the pair's prompts.
pub fn first_step_distribution<F: Scalar>(
    pair: &ContrastivePair,
    vectors: &[Vec<F>],
    bundle: &ModelBundle<F>,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let hook = [pair.plan.hook(vectors.to_vec())];
    let l_t = logits_f64(bundle, &pair.target_tokens, &hook)?;
    let l_s = logits_f64(bundle, &pair.contrastive_tokens, &[])?;
    let p = recalibrate(&l_t, &l_s, alpha);
    Ok((l_t, l_s, p))
}
