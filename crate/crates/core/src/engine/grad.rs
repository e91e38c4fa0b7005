//! Reverse-mode gradient of a readout log-probability with respect to
//! residual-stream vectors injected by an overwrite hook.
//!
//! Only the post-patch computation is differentiated: the residual stream at
//! the patch layer is treated as the input, and backpropagation runs through
//! the remaining blocks, the final norm and the unembedding.

use super::model::{BlockCache, EngineError, Hook, HookAction, ModelBundle, Result};
use super::tensor::{log_softmax, Matrix, Scalar};

/// Position and token whose log-probability is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Readout {
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGradient<F> {
    /// One gradient vector per patched position, in hook order.
    pub per_position: Vec<Vec<F>>,
    /// `log p(token | prefix up to readout position)` under the patched run.
    pub log_prob: f64,
    /// Set when every patched position lies after the readout; the gradient
    /// is then identically zero by causality.
    pub readout_before_patch: bool,
}

impl<F: Scalar> HiddenGradient<F> {
    /// Mean of the per-position gradients.
    pub fn mean(&self) -> Vec<F> {
        let n = F::of(self.per_position.len() as f64);
        let d = self.per_position.first().map_or(0, Vec::len);
        (0..d)
            .map(|c| self.per_position.iter().map(|g| g[c]).sum::<F>() / n)
            .collect()
    }
}

impl<F: Scalar> ModelBundle<F> {
    /// Gradient of `log softmax(final_logits[readout.position])[readout.token]`
    /// with respect to each vector injected by `patch`.
    pub fn gradient_wrt_hidden(
        &self,
        tokens: &[u32],
        patch: &Hook<F>,
        readout: Readout,
    ) -> Result<HiddenGradient<F>> {
        self.check_tokens(tokens)?;
        self.check_hooks(std::slice::from_ref(patch), tokens.len())?;
        if !matches!(patch.action, HookAction::Overwrite(_)) {
            return Err(EngineError::InvalidConfig(
                "gradient requires an overwrite hook".into(),
            ));
        }
        if readout.position >= tokens.len() {
            return Err(EngineError::PositionOutOfRange {
                position: readout.position,
                len: tokens.len(),
            });
        }
        if readout.token as usize >= self.config.vocab_size {
            return Err(EngineError::UnknownToken {
                id: readout.token,
                vocab: self.config.vocab_size,
            });
        }

        let r = readout.position;
        let d = self.config.d_model;
        // Later positions cannot influence row `r` under the causal mask.
        let prefix = &tokens[..=r];
        let kept: Vec<(usize, Vec<F>)> = match &patch.action {
            HookAction::Overwrite(vs) => patch
                .positions
                .iter()
                .zip(vs)
                .filter(|(&p, _)| p <= r)
                .map(|(&p, v)| (p, v.clone()))
                .collect(),
            HookAction::Record => unreachable!(),
        };
        let truncated = Hook::overwrite(
            patch.layer,
            kept.iter().map(|(p, _)| *p).collect(),
            kept.iter().map(|(_, v)| v.clone()).collect(),
        );

        let mut x = self.hidden_states(prefix, patch.layer, std::slice::from_ref(&truncated))?;
        let mut inputs = Vec::new();
        let mut caches = Vec::new();
        for l in patch.layer..self.config.n_layers {
            let mut cache = empty_cache();
            let next = self.block_forward(l, &x, Some(&mut cache));
            inputs.push(std::mem::replace(&mut x, next));
            caches.push(cache);
        }

        let h_last = x.row(r);
        let (z, norm_cache) = match &self.final_norm {
            Some(ln) => {
                let (y, xhat, inv) = ln.apply(h_last, F::of(self.config.norm_eps));
                (y, Some((xhat, inv)))
            }
            None => (h_last.to_vec(), None),
        };
        let logits: Vec<f64> = self
            .unembedding
            .matvec(&z)
            .iter()
            .zip(&self.output_bias)
            .map(|(&a, &b)| (a + b).f64())
            .collect();
        let logp = log_softmax(&logits);
        let log_prob = logp[readout.token as usize];

        let readout_before_patch = kept.is_empty();
        if readout_before_patch {
            return Ok(HiddenGradient {
                per_position: vec![vec![F::zero(); d]; patch.positions.len()],
                log_prob,
                readout_before_patch,
            });
        }

        let dlogits: Vec<F> = logp
            .iter()
            .enumerate()
            .map(|(y, &lp)| {
                let onehot = if y == readout.token as usize {
                    1.0
                } else {
                    0.0
                };
                F::of(onehot - lp.exp())
            })
            .collect();
        let dz = self.unembedding.matvec_t(&dlogits);
        let dh = match (&self.final_norm, norm_cache) {
            (Some(ln), Some((xhat, inv))) => ln.backward(&dz, &xhat, inv),
            _ => dz,
        };
        let mut grad = Matrix::zeros(prefix.len(), d);
        grad.row_mut(r).copy_from_slice(&dh);

        for (offset, (input, cache)) in inputs.iter().zip(&caches).enumerate().rev() {
            grad = self.block_backward(patch.layer + offset, input, cache, &grad);
        }

        let per_position = patch
            .positions
            .iter()
            .map(|&p| {
                if p <= r {
                    grad.row(p).to_vec()
                } else {
                    vec![F::zero(); d]
                }
            })
            .collect();
        Ok(HiddenGradient {
            per_position,
            log_prob,
            readout_before_patch,
        })
    }

    fn block_backward(
        &self,
        index: usize,
        x: &Matrix<F>,
        cache: &BlockCache<F>,
        dy: &Matrix<F>,
    ) -> Matrix<F> {
        let b = &self.blocks[index];
        let c = &self.config;
        let (n, d, nh, hd) = (x.rows(), c.d_model, c.n_heads, c.head_dim());
        let scale = F::one() / F::of(hd as f64).sqrt();

        // MLP branch: x'' = x' + proj(gelu(fc(LN2(x'))))
        let mut dx2 = dy.clone();
        for i in 0..n {
            let dact = b.proj.weight.matvec_t(dy.row(i));
            let dpre: Vec<F> = dact
                .iter()
                .zip(&cache.fc_pre[i])
                .map(|(&g, &u)| g * super::model::gelu_grad(u))
                .collect();
            let dm = b.fc.weight.matvec_t(&dpre);
            let dln = b.ln2.backward(&dm, &cache.ln2_xhat[i], cache.ln2_inv[i]);
            for (o, g) in dx2.row_mut(i).iter_mut().zip(dln) {
                *o = *o + g;
            }
        }

        // Attention branch: x' = x + o(concat(attn))
        let mut dx = dx2.clone();
        let dconcat: Vec<Vec<F>> = (0..n).map(|i| b.o.weight.matvec_t(dx2.row(i))).collect();
        let mut dq = vec![vec![F::zero(); d]; n];
        let mut dk = vec![vec![F::zero(); d]; n];
        let mut dv = vec![vec![F::zero(); d]; n];
        for h in 0..nh {
            let r = h * hd..(h + 1) * hd;
            for i in 0..n {
                let p = &cache.probs[h][i];
                let d_out = &dconcat[i][r.clone()];
                let dp: Vec<F> = (0..=i)
                    .map(|j| super::tensor::dot(d_out, &cache.v[j][r.clone()]))
                    .collect();
                let weighted = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<F>();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    for (t, col) in r.clone().enumerate() {
                        dv[j][col] = dv[j][col] + p[j] * d_out[t];
                        dq[i][col] = dq[i][col] + ds * cache.k[j][col];
                        dk[j][col] = dk[j][col] + ds * cache.q[i][col];
                    }
                }
            }
        }
        for i in 0..n {
            let da: Vec<F> =
                b.q.weight
                    .matvec_t(&dq[i])
                    .into_iter()
                    .zip(b.k.weight.matvec_t(&dk[i]))
                    .zip(b.v.weight.matvec_t(&dv[i]))
                    .map(|((a, bb), cc)| a + bb + cc)
                    .collect();
            let dln = b.ln1.backward(&da, &cache.ln1_xhat[i], cache.ln1_inv[i]);
            for (o, g) in dx.row_mut(i).iter_mut().zip(dln) {
                *o = *o + g;
            }
        }
        dx
    }
}

fn empty_cache<F>() -> BlockCache<F> {
    BlockCache {
        ln1_xhat: Vec::new(),
        ln1_inv: Vec::new(),
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
        probs: Vec::new(),
        ln2_xhat: Vec::new(),
        ln2_inv: Vec::new(),
        fc_pre: Vec::new(),
    }
}
