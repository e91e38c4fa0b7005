//! Multinomial logistic probe over hidden states.

use serde::{Deserialize, Serialize};

use super::{LayerSelectError, Result};
use crate::engine::tensor::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub step_size: f64,
    pub l2: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            epochs: 200,
            step_size: 0.1,
            l2: 1e-4,
        }
    }
}

/// Linear classifier `softmax(W h + b)`; row `c` of `W` is the direction of class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Matrix<f64>,
    pub bias: Vec<f64>,
    pub classes: Vec<String>,
    /// Regularized training loss before the first epoch and after each one.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

impl ProbeModel {
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        crate::engine::tensor::affine(&self.weights, &self.bias, h)
    }

    pub fn predict(&self, h: &[f64]) -> &str {
        let l = self.logits(h);
        &self.classes[crate::engine::tensor::argmax(&l)]
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn direction(&self, class: &str) -> Option<&[f64]> {
        self.class_index(class).map(|c| self.weights.row(c))
    }

    pub fn accuracy(&self, examples: &[(Vec<f64>, String)]) -> f64 {
        let hits = examples
            .iter()
            .filter(|(h, y)| self.predict(h) == y)
            .count();
        hits as f64 / examples.len().max(1) as f64
    }
}

struct Data<'a> {
    xs: Vec<&'a [f64]>,
    ys: Vec<usize>,
    l2: f64,
}

impl Data<'_> {
    fn loss(&self, w: &Matrix<f64>, b: &[f64]) -> f64 {
        let n = self.xs.len() as f64;
        let nll: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, &y)| {
                let z = crate::engine::tensor::affine(w, b, x);
                log_sum_exp(&z) - z[y]
            })
            .sum();
        let reg: f64 = w.as_slice().iter().map(|v| v * v).sum();
        nll / n + 0.5 * self.l2 * reg
    }

    fn gradient(&self, w: &Matrix<f64>, b: &[f64]) -> (Matrix<f64>, Vec<f64>) {
        let (c, d) = (w.rows(), w.cols());
        let n = self.xs.len() as f64;
        let mut gw = Matrix::zeros(c, d);
        let mut gb = vec![0.0; c];
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            let mut p = softmax(&crate::engine::tensor::affine(w, b, x));
            p[y] -= 1.0;
            for k in 0..c {
                gb[k] += p[k] / n;
                let row = gw.row_mut(k);
                for (g, xi) in row.iter_mut().zip(x.iter()) {
                    *g += p[k] * xi / n;
                }
            }
        }
        for (g, v) in gw.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *g += self.l2 * v;
        }
        (gw, gb)
    }
}

/// Full-batch gradient descent from zero weights. A step that would raise
/// the loss is halved until it does not, so the loss history never increases.
pub fn train_probe(examples: &[(Vec<f64>, String)], hyper: &ProbeHyper) -> Result<ProbeModel> {
    let mut classes: Vec<String> = examples.iter().map(|(_, y)| y.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(LayerSelectError::DegenerateData(format!(
            "probe needs at least two classes, got {}",
            classes.len()
        )));
    }
    let d = examples[0].0.len();
    if let Some((h, _)) = examples.iter().find(|(h, _)| h.len() != d) {
        return Err(LayerSelectError::DegenerateData(format!(
            "hidden vectors of width {} and {}",
            d,
            h.len()
        )));
    }
    let data = Data {
        xs: examples.iter().map(|(h, _)| h.as_slice()).collect(),
        ys: examples
            .iter()
            .map(|(_, y)| classes.binary_search(y).expect("class listed"))
            .collect(),
        l2: hyper.l2,
    };

    let mut w = Matrix::zeros(classes.len(), d);
    let mut b = vec![0.0; classes.len()];
    let mut loss = data.loss(&w, &b);
    let mut history = vec![loss];
    for _ in 0..hyper.epochs {
        let (gw, gb) = data.gradient(&w, &b);
        let mut step = hyper.step_size;
        let mut accepted = false;
        for _ in 0..30 {
            let w2 = Matrix::from_vec(
                w.rows(),
                w.cols(),
                w.as_slice()
                    .iter()
                    .zip(gw.as_slice())
                    .map(|(v, g)| v - step * g)
                    .collect(),
            );
            let b2: Vec<f64> = b.iter().zip(&gb).map(|(v, g)| v - step * g).collect();
            let l2 = data.loss(&w2, &b2);
            if l2 <= loss {
                (w, b, loss) = (w2, b2, l2);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        history.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(ProbeModel {
        weights: w,
        bias: b,
        classes,
        loss_history: history,
    })
}
