//! Seeded toy models with a word-level vocabulary covering every bundled
//! prompt template, lexicon and relation entry.
//!
//! Weights come from ChaCha8 with a Box–Muller normal built on raw `u64`
//! draws, so a seed produces the same bundle on every platform.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Block, EngineError, LayerNorm, Linear, ModelBundle, ModelConfig, Result};
use super::tensor::Matrix;
use super::tokenizer::{Tokenizer, TokenizerMode};
use crate::dataset;

/// Scale of the tied unembedding, `W_o = TIE_SCALE · tok_emb`.
pub const TIE_SCALE: f32 = 0.25;

/// Plants a prior toward one token and a context-copy path in every block.
///
/// The output bias of `biased_token` is raised by `bias_strength`. Each block's
/// value and output projections become `I` and `context_gain · I`, and query
/// and key weights are damped, so attention averages the normalized residual
/// stream of the prefix. Combined with the tied unembedding this lets tokens
/// seen in context (including patched ones) raise their own logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRig {
    pub biased_token: String,
    pub bias_strength: f64,
    pub context_gain: f64,
}

impl BiasRig {
    pub const DEFAULT_GAIN: f64 = 2.0;

    pub fn new(biased_token: &str, bias_strength: f64) -> Self {
        Self {
            biased_token: biased_token.to_string(),
            bias_strength,
            context_gain: Self::DEFAULT_GAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    /// Words added to the builtin vocabulary.
    pub extra_words: Vec<String>,
    pub rig: Option<BiasRig>,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_seq: 128,
            norm_eps: 1e-5,
            extra_words: Vec::new(),
            rig: None,
        }
    }
}

const SPECIALS: &[&str] = &["<pad>", "<bos>", "<eos>", "<x>"];
const PUNCT: &[&str] = &[".", ",", "?", "!", ";", ":", "\"", "'", "-", "(", ")"];

fn split_words(text: &str, out: &mut BTreeSet<String>) {
    for chunk in text.split(|c: char| !c.is_alphanumeric()) {
        if !chunk.is_empty() {
            out.insert(chunk.to_string());
            out.insert(chunk.to_lowercase());
        }
    }
}

/// Ordered token list: specials, punctuation, words, then single characters
/// and their `##` continuations so any ASCII alphanumeric word is encodable.
pub fn toy_vocabulary(extra_words: &[String]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for t in dataset::prompts::template_texts() {
        split_words(&t.replace(dataset::PLACEHOLDER, " "), &mut words);
    }
    for w in dataset::builtin_lexicon_words() {
        split_words(&w, &mut words);
    }
    for r in dataset::builtin_relations() {
        for s in [r.noun, r.a_pri, r.a_sec, r.category.unwrap_or_default()] {
            split_words(&s, &mut words);
        }
    }
    for w in [
        "man", "woman", "male", "female", "He", "She", "a", "an", "the",
    ] {
        words.insert(w.to_string());
    }
    for w in extra_words {
        split_words(w, &mut words);
    }
    let chars: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').collect();
    for c in &chars {
        words.remove(&c.to_string());
    }

    let mut out: Vec<String> = SPECIALS
        .iter()
        .chain(PUNCT)
        .map(|s| s.to_string())
        .collect();
    out.extend(words);
    out.extend(chars.iter().map(|c| c.to_string()));
    out.extend(chars.iter().map(|c| format!("##{c}")));
    out
}

/// Standard normal draws from ChaCha8 via Box–Muller (cosine branch only).
struct Normal(ChaCha8Rng);

impl Normal {
    fn unit(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn sample(&mut self) -> f64 {
        let u1 = self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn vec(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n).map(|_| (self.sample() * std) as f32).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, self.vec(rows * cols, std))
    }

    fn linear(&mut self, out: usize, inp: usize) -> Linear<f32> {
        Linear {
            weight: self.matrix(out, inp, 1.0 / (inp as f64).sqrt()),
            bias: self.vec(out, 0.02),
        }
    }

    fn norm(&mut self, d: usize) -> LayerNorm<f32> {
        LayerNorm {
            weight: self.vec(d, 0.05).into_iter().map(|v| 1.0 + v).collect(),
            bias: self.vec(d, 0.02),
        }
    }
}

/// Builds a toy model; identical `(seed, opts)` give bitwise-identical bundles.
pub fn make_toy_model(seed: u64, opts: &ToyOptions) -> Result<ModelBundle<f32>> {
    let tokenizer = Tokenizer::word(&toy_vocabulary(&opts.extra_words))?;
    let config = ModelConfig {
        n_layers: opts.n_layers,
        d_model: opts.d_model,
        n_heads: opts.n_heads,
        d_ff: opts.d_ff,
        vocab_size: tokenizer.vocab_size(),
        max_seq: opts.max_seq,
        norm_eps: opts.norm_eps,
        tokenizer_mode: TokenizerMode::Word,
    };
    config.validate()?;
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);

    let mut rng = Normal(ChaCha8Rng::seed_from_u64(seed));
    let token_embedding = rng.matrix(v, d, 1.0);
    let position_embedding = rng.matrix(config.max_seq, d, 0.1);
    let mut blocks: Vec<Block<f32>> = (0..config.n_layers)
        .map(|_| Block {
            ln1: rng.norm(d),
            q: rng.linear(d, d),
            k: rng.linear(d, d),
            v: rng.linear(d, d),
            o: rng.linear(d, d),
            ln2: rng.norm(d),
            fc: rng.linear(f, d),
            proj: rng.linear(d, f),
        })
        .collect();
    let final_norm = Some(rng.norm(d));
    let mut output_bias = rng.vec(v, 0.1);
    let unembedding = token_embedding.map(|x| x * TIE_SCALE);

    if let Some(rig) = &opts.rig {
        let id = tokenizer.token_id(&rig.biased_token).ok_or_else(|| {
            EngineError::InvalidConfig(format!(
                "biased token {:?} not in vocabulary",
                rig.biased_token
            ))
        })?;
        output_bias[id as usize] += rig.bias_strength as f32;
        let gain = rig.context_gain as f32;
        for b in &mut blocks {
            b.q.weight = b.q.weight.map(|x| x * 0.1);
            b.k.weight = b.k.weight.map(|x| x * 0.1);
            b.v = Linear {
                weight: Matrix::identity(d),
                bias: vec![0.0; d],
            };
            b.o = Linear {
                weight: Matrix::<f32>::identity(d).map(|x| x * gain),
                bias: vec![0.0; d],
            };
        }
    }

    let bundle = ModelBundle {
        config,
        token_embedding,
        position_embedding,
        blocks,
        final_norm,
        unembedding,
        output_bias,
        tokenizer: Arc::new(tokenizer),
    };
    bundle.validate()?;
    Ok(bundle)
}
