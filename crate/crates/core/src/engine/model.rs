//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! Block equations, for residual stream `x` of shape `[seq × d]`:
//!
//! ```text
//! h0      = tok_emb[t] + pos_emb[i]
//! a       = LN1(x)
//! q,k,v   = a Wqᵀ + bq, a Wkᵀ + bk, a Wvᵀ + bv      (split into heads)
//! attn_h  = softmax(q_h k_hᵀ / √d_head + causal mask) v_h
//! x'      = x + concat(attn_h) Woᵀ + bo
//! x''     = x' + gelu_tanh(LN2(x') Wfcᵀ + bfc) Wprojᵀ + bproj
//! logits  = LN_f(h_L) W_unembedᵀ + b_unembed
//! ```
//!
//! `LN(x) = γ ⊙ (x − μ) / √(σ² + eps) + β` with population variance. The
//! hidden state at layer `ℓ` is the residual stream after block `ℓ`; layer 0
//! is the embedding sum.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{affine, dot, Matrix, Scalar};
use super::tokenizer::{Tokenizer, TokenizerError, TokenizerMode};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("layer {layer} out of range [0, {n_layers}]")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("hook at layer {layer} supplies {vectors} vectors for {positions} positions")]
    HookArity {
        layer: usize,
        positions: usize,
        vectors: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub tokenizer_mode: TokenizerMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[out × in]`
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn apply(&self, x: &[F]) -> Vec<F> {
        affine(&self.weight, &self.bias, x)
    }

    fn cast<G: Scalar>(&self) -> Linear<G> {
        Linear {
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn identity_init(d: usize) -> Self {
        Self {
            weight: vec![F::one(); d],
            bias: vec![F::zero(); d],
        }
    }

    /// Returns `(output, normalized input, 1/std)`.
    pub fn apply(&self, x: &[F], eps: F) -> (Vec<F>, Vec<F>, F) {
        let n = F::of(x.len() as f64);
        let mean = x.iter().copied().sum::<F>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        let xhat: Vec<F> = x.iter().map(|&v| (v - mean) * inv).collect();
        let y = xhat
            .iter()
            .zip(self.weight.iter().zip(&self.bias))
            .map(|(&h, (&g, &b))| g * h + b)
            .collect();
        (y, xhat, inv)
    }

    /// Backpropagates `dy` through the normalization of one row.
    pub fn backward(&self, dy: &[F], xhat: &[F], inv: F) -> Vec<F> {
        let n = F::of(dy.len() as f64);
        let dxhat: Vec<F> = dy.iter().zip(&self.weight).map(|(&d, &g)| d * g).collect();
        let mean_d = dxhat.iter().copied().sum::<F>() / n;
        let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum::<F>() / n;
        dxhat
            .iter()
            .zip(xhat)
            .map(|(&d, &h)| inv * (d - mean_d - h * mean_dx))
            .collect()
    }

    fn cast<G: Scalar>(&self) -> LayerNorm<G> {
        LayerNorm {
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub fc: Linear<F>,
    pub proj: Linear<F>,
}

impl<F: Scalar> Block<F> {
    fn cast<G: Scalar>(&self) -> Block<G> {
        Block {
            ln1: self.ln1.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            ln2: self.ln2.cast(),
            fc: self.fc.cast(),
            proj: self.proj.cast(),
        }
    }
}

/// Intermediate values of one block, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    pub ln1_xhat: Vec<Vec<F>>,
    pub ln1_inv: Vec<F>,
    pub q: Vec<Vec<F>>,
    pub k: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    /// `probs[head][i]` holds attention weights over positions `0..=i`.
    pub probs: Vec<Vec<Vec<F>>>,
    pub ln2_xhat: Vec<Vec<F>>,
    pub ln2_inv: Vec<F>,
    pub fc_pre: Vec<Vec<F>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + F::of(0.044715) * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0 * 0.044715) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// What a hook does at its `(layer, positions)`.
#[derive(Debug, Clone, PartialEq)]
pub enum HookAction<F> {
    /// Read-only; the trace already records every hidden state.
    Record,
    /// Replace the residual stream rows, one vector per position.
    Overwrite(Vec<Vec<F>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hook<F> {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub action: HookAction<F>,
}

impl<F: Scalar> Hook<F> {
    pub fn record(layer: usize, positions: Vec<usize>) -> Self {
        Self {
            layer,
            positions,
            action: HookAction::Record,
        }
    }

    pub fn overwrite(layer: usize, positions: Vec<usize>, vectors: Vec<Vec<F>>) -> Self {
        Self {
            layer,
            positions,
            action: HookAction::Overwrite(vectors),
        }
    }
}

/// Every hidden state of a forward pass plus the final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<F> {
    /// `hidden[ℓ]` is `[seq × d_model]`; `ℓ ∈ 0..=n_layers`.
    pub hidden: Vec<Matrix<F>>,
    /// `[seq × vocab_size]`
    pub final_logits: Matrix<F>,
}

impl<F: Scalar> ActivationTrace<F> {
    pub fn hidden_at(&self, layer: usize, position: usize) -> &[F] {
        self.hidden[layer].row(position)
    }

    pub fn seq_len(&self) -> usize {
        self.final_logits.rows()
    }

    pub fn last_logits(&self) -> &[F] {
        self.final_logits.row(self.final_logits.rows() - 1)
    }
}

/// Weights, config and tokenizer of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F = f32> {
    pub config: ModelConfig,
    /// `[vocab × d]`
    pub token_embedding: Matrix<F>,
    /// `[max_seq × d]`
    pub position_embedding: Matrix<F>,
    pub blocks: Vec<Block<F>>,
    /// `None` means identity.
    pub final_norm: Option<LayerNorm<F>>,
    /// `W_o`, `[vocab × d]`
    pub unembedding: Matrix<F>,
    /// `b_o`, `[vocab]`
    pub output_bias: Vec<F>,
    pub tokenizer: Arc<Tokenizer>,
}

fn cast_vec<F: Scalar, G: Scalar>(v: &[F]) -> Vec<G> {
    v.iter().map(|&x| G::of(x.f64())).collect()
}

impl<F: Scalar> ModelBundle<F> {
    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> ModelBundle<G> {
        ModelBundle {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            final_norm: self.final_norm.as_ref().map(LayerNorm::cast),
            unembedding: self.unembedding.cast(),
            output_bias: cast_vec(&self.output_bias),
            tokenizer: Arc::clone(&self.tokenizer),
        }
    }

    pub fn to_f64(&self) -> ModelBundle<f64> {
        self.cast()
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Checks every tensor shape against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check = |name: String, found: [usize; 2], expected: [usize; 2]| {
            if found == expected {
                Ok(())
            } else {
                Err(EngineError::ShapeMismatch {
                    tensor: name,
                    expected: expected.to_vec(),
                    found: found.to_vec(),
                })
            }
        };
        let check_vec = |name: String, v: &[F], n: usize| check(name, [v.len(), 1], [n, 1]);
        check(
            "tok_emb".into(),
            self.token_embedding.shape(),
            [c.vocab_size, d],
        )?;
        check(
            "pos_emb".into(),
            self.position_embedding.shape(),
            [c.max_seq, d],
        )?;
        check(
            "unembed.weight".into(),
            self.unembedding.shape(),
            [c.vocab_size, d],
        )?;
        check_vec("unembed.bias".into(), &self.output_bias, c.vocab_size)?;
        if self.blocks.len() != c.n_layers {
            return Err(EngineError::ShapeMismatch {
                tensor: "blocks".into(),
                expected: vec![c.n_layers],
                found: vec![self.blocks.len()],
            });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            for (name, lin, out, inp) in [
                ("attn.q", &b.q, d, d),
                ("attn.k", &b.k, d, d),
                ("attn.v", &b.v, d, d),
                ("attn.o", &b.o, d, d),
                ("mlp.fc", &b.fc, c.d_ff, d),
                ("mlp.proj", &b.proj, d, c.d_ff),
            ] {
                check(p(&format!("{name}.weight")), lin.weight.shape(), [out, inp])?;
                check_vec(p(&format!("{name}.bias")), &lin.bias, out)?;
            }
            for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                check_vec(p(&format!("{name}.weight")), &ln.weight, d)?;
                check_vec(p(&format!("{name}.bias")), &ln.bias, d)?;
            }
        }
        if let Some(ln) = &self.final_norm {
            check_vec("final_norm.weight".into(), &ln.weight, d)?;
            check_vec("final_norm.bias".into(), &ln.bias, d)?;
        }
        if self.tokenizer.vocab_size() != c.vocab_size {
            return Err(EngineError::InvalidConfig(format!(
                "tokenizer has {} tokens, config says {}",
                self.tokenizer.vocab_size(),
                c.vocab_size
            )));
        }
        let finite = self.token_embedding.all_finite()
            && self.position_embedding.all_finite()
            && self.unembedding.all_finite()
            && self.output_bias.iter().all(|v| v.is_finite());
        if !finite {
            return Err(EngineError::NonFinite("model weights".into()));
        }
        Ok(())
    }

    fn eps(&self) -> F {
        F::of(self.config.norm_eps)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(EngineError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(EngineError::SequenceTooLong {
                len: tokens.len(),
                max_seq: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(EngineError::UnknownToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn check_hooks(&self, hooks: &[Hook<F>], len: usize) -> Result<()> {
        for h in hooks {
            if h.layer > self.config.n_layers {
                return Err(EngineError::LayerOutOfRange {
                    layer: h.layer,
                    n_layers: self.config.n_layers,
                });
            }
            if let Some(&p) = h.positions.iter().find(|&&p| p >= len) {
                return Err(EngineError::PositionOutOfRange { position: p, len });
            }
            if let HookAction::Overwrite(vs) = &h.action {
                if vs.len() != h.positions.len() {
                    return Err(EngineError::HookArity {
                        layer: h.layer,
                        positions: h.positions.len(),
                        vectors: vs.len(),
                    });
                }
                if let Some(v) = vs.iter().find(|v| v.len() != self.config.d_model) {
                    return Err(EngineError::ShapeMismatch {
                        tensor: format!("hook vector at layer {}", h.layer),
                        expected: vec![self.config.d_model],
                        found: vec![v.len()],
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Matrix<F> {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let e = self.token_embedding.row(t as usize);
            let p = self.position_embedding.row(i);
            for (o, (&a, &b)) in x.row_mut(i).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        x
    }

    pub(crate) fn apply_hooks(&self, layer: usize, x: &mut Matrix<F>, hooks: &[Hook<F>]) {
        for h in hooks.iter().filter(|h| h.layer == layer) {
            if let HookAction::Overwrite(vs) = &h.action {
                for (&p, v) in h.positions.iter().zip(vs) {
                    x.row_mut(p).copy_from_slice(v);
                }
            }
        }
    }

    /// Runs block `index` on the residual stream `x`, optionally caching
    /// intermediates for backpropagation.
    pub(crate) fn block_forward(
        &self,
        index: usize,
        x: &Matrix<F>,
        cache: Option<&mut BlockCache<F>>,
    ) -> Matrix<F> {
        let b = &self.blocks[index];
        let c = &self.config;
        let (n, d, nh, hd) = (x.rows(), c.d_model, c.n_heads, c.head_dim());
        let eps = self.eps();
        let scale = F::one() / F::of(hd as f64).sqrt();

        let mut ln1_xhat = Vec::with_capacity(n);
        let mut ln1_inv = Vec::with_capacity(n);
        let (mut q, mut k, mut v) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for i in 0..n {
            let (a, xhat, inv) = b.ln1.apply(x.row(i), eps);
            q.push(b.q.apply(&a));
            k.push(b.k.apply(&a));
            v.push(b.v.apply(&a));
            ln1_xhat.push(xhat);
            ln1_inv.push(inv);
        }

        let mut concat = vec![vec![F::zero(); d]; n];
        let mut probs = vec![Vec::with_capacity(n); nh];
        for h in 0..nh {
            let r = h * hd..(h + 1) * hd;
            for i in 0..n {
                let qi = &q[i][r.clone()];
                let scores: Vec<F> = (0..=i).map(|j| dot(qi, &k[j][r.clone()]) * scale).collect();
                let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let exps: Vec<F> = scores.iter().map(|&s| (s - m).exp()).collect();
                let z = exps.iter().copied().sum::<F>();
                let p: Vec<F> = exps.into_iter().map(|e| e / z).collect();
                let out = &mut concat[i][r.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v[j][r.clone()]) {
                        *o = *o + pj * vv;
                    }
                }
                probs[h].push(p);
            }
        }

        let mut y = Matrix::zeros(n, d);
        let mut ln2_xhat = Vec::with_capacity(n);
        let mut ln2_inv = Vec::with_capacity(n);
        let mut fc_pre = Vec::with_capacity(n);
        for i in 0..n {
            let attn = b.o.apply(&concat[i]);
            let x2: Vec<F> = x.row(i).iter().zip(&attn).map(|(&a, &b)| a + b).collect();
            let (m, xhat, inv) = b.ln2.apply(&x2, eps);
            let pre = b.fc.apply(&m);
            let act: Vec<F> = pre.iter().map(|&u| gelu(u)).collect();
            let mlp = b.proj.apply(&act);
            for (o, (&a, &bb)) in y.row_mut(i).iter_mut().zip(x2.iter().zip(&mlp)) {
                *o = a + bb;
            }
            if cache.is_some() {
                ln2_xhat.push(xhat);
                ln2_inv.push(inv);
                fc_pre.push(pre);
            }
        }

        if let Some(cache) = cache {
            *cache = BlockCache {
                ln1_xhat,
                ln1_inv,
                q,
                k,
                v,
                probs,
                ln2_xhat,
                ln2_inv,
                fc_pre,
            };
        }
        y
    }

    /// Final norm followed by `W_o h + b_o` for one residual row.
    pub fn final_logits_row(&self, h: &[F]) -> Vec<F> {
        let z = match &self.final_norm {
            Some(ln) => ln.apply(h, self.eps()).0,
            None => h.to_vec(),
        };
        affine(&self.unembedding, &self.output_bias, &z)
    }

    /// Bare `h W_oᵀ`: no final norm and no output bias.
    pub fn logit_lens(&self, h: &[F]) -> Result<Vec<F>> {
        if h.len() != self.config.d_model {
            return Err(EngineError::ShapeMismatch {
                tensor: "logit lens input".into(),
                expected: vec![self.config.d_model],
                found: vec![h.len()],
            });
        }
        Ok(self.unembedding.matvec(h))
    }

    /// Full forward pass recording every hidden state.
    pub fn forward(&self, tokens: &[u32], hooks: &[Hook<F>]) -> Result<ActivationTrace<F>> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks, tokens.len())?;
        let mut x = self.embed(tokens);
        self.apply_hooks(0, &mut x, hooks);
        let mut hidden = Vec::with_capacity(self.config.n_layers + 1);
        for l in 0..self.config.n_layers {
            let mut next = self.block_forward(l, &x, None);
            self.apply_hooks(l + 1, &mut next, hooks);
            hidden.push(std::mem::replace(&mut x, next));
        }
        let n = tokens.len();
        let mut logits = Matrix::zeros(n, self.config.vocab_size);
        for i in 0..n {
            logits
                .row_mut(i)
                .copy_from_slice(&self.final_logits_row(x.row(i)));
        }
        hidden.push(x);
        Ok(ActivationTrace {
            hidden,
            final_logits: logits,
        })
    }

    /// Logits at the last position only; skips the unembedding of earlier rows.
    pub fn next_token_logits(&self, tokens: &[u32], hooks: &[Hook<F>]) -> Result<Vec<F>> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks, tokens.len())?;
        let mut x = self.embed(tokens);
        self.apply_hooks(0, &mut x, hooks);
        for l in 0..self.config.n_layers {
            x = self.block_forward(l, &x, None);
            self.apply_hooks(l + 1, &mut x, hooks);
        }
        Ok(self.final_logits_row(x.row(tokens.len() - 1)))
    }

    /// Residual stream after `layer` for every position (`hidden[layer]`).
    pub fn hidden_states(
        &self,
        tokens: &[u32],
        layer: usize,
        hooks: &[Hook<F>],
    ) -> Result<Matrix<F>> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks, tokens.len())?;
        if layer > self.config.n_layers {
            return Err(EngineError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let mut x = self.embed(tokens);
        self.apply_hooks(0, &mut x, hooks);
        for l in 0..layer {
            x = self.block_forward(l, &x, None);
            self.apply_hooks(l + 1, &mut x, hooks);
        }
        Ok(x)
    }

    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.tokenizer.encode_prompt(text)?)
    }
}
