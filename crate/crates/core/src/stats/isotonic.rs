//! Weighted isotonic regression by pooling adjacent violators.

use serde::{Deserialize, Serialize};

use super::{Result, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    /// Non-decreasing fitted values, one per input.
    pub fitted: Vec<f64>,
    /// Weighted sum of squared residuals.
    pub sse: f64,
}

#[derive(Clone, Copy)]
struct Pool {
    wy: f64,
    w: f64,
    y: f64,
    len: usize,
}

impl Pool {
    fn value(&self) -> f64 {
        if self.w > 0.0 {
            self.wy / self.w
        } else {
            // zero total weight: any value is optimal, use the plain mean
            self.y / self.len as f64
        }
    }
}

/// Least-squares non-decreasing fit of `ys` under `weights`.
pub fn isotonic_pava(ys: &[f64], weights: &[f64]) -> Result<IsotonicFit> {
    if ys.len() != weights.len() {
        return Err(StatsError::LengthMismatch(ys.len(), weights.len()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(StatsError::NegativeWeight);
    }
    let mut pools: Vec<Pool> = Vec::with_capacity(ys.len());
    for (&y, &w) in ys.iter().zip(weights) {
        pools.push(Pool {
            wy: w * y,
            w,
            y,
            len: 1,
        });
        while pools.len() > 1 {
            let n = pools.len();
            if pools[n - 2].value() <= pools[n - 1].value() {
                break;
            }
            let top = pools.pop().expect("len > 1");
            let below = pools.last_mut().expect("len > 1");
            below.wy += top.wy;
            below.w += top.w;
            below.y += top.y;
            below.len += top.len;
        }
    }
    let fitted: Vec<f64> = pools
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.value(), p.len))
        .collect();
    let sse = ys
        .iter()
        .zip(weights)
        .zip(&fitted)
        .map(|((y, w), f)| w * (y - f) * (y - f))
        .sum();
    Ok(IsotonicFit { fitted, sse })
}
