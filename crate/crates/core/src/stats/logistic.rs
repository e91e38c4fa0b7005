//! One-predictor logistic regression and the repeated-undersampling report.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{roc_auc, t_interval95, Result, StatsError};

const MAX_ITER: usize = 500;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Log-odds change per +1 standard deviation of `x`.
    pub coef: f64,
    pub intercept: f64,
    /// Standard error of `coef` from the observed information.
    pub se_coef: f64,
    pub iterations: usize,
    pub x_mean: f64,
    /// Population standard deviation used for standardization.
    pub x_sd: f64,
}

impl LogisticFit {
    /// Linear predictor for a raw `x`.
    pub fn eta(&self, x: f64) -> f64 {
        self.intercept + self.coef * (x - self.x_mean) / self.x_sd
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn log_lik(z: &[f64], y: &[bool], b0: f64, b1: f64) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            let t = b0 + b1 * zi;
            // log σ(t) = −softplus(−t)
            let sp = |u: f64| u.max(0.0) + (-u.abs()).exp().ln_1p();
            if yi {
                -sp(-t)
            } else {
                -sp(t)
            }
        })
        .sum()
}

/// Maximum-likelihood fit of `y ~ x` with `x` z-scored. Newton steps are
/// halved until the likelihood does not drop; iteration stops once the
/// mean-likelihood gradient norm falls below `1e-8` or after 500 steps.
/// Perfectly separated classes are reported as [`StatsError::SeparationWarning`].
pub fn fit_logistic(x: &[f64], y: &[bool]) -> Result<LogisticFit> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == x.len() {
        return Err(StatsError::SingularData("one label class is missing".into()));
    }
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(StatsError::SingularData("x has zero variance".into()));
    }
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();

    let (mut b0, mut b1) = (0.0, 0.0);
    let mut ll = log_lik(&z, y, b0, b1);
    let mut iterations = 0;
    let mut info;
    loop {
        let (mut g0, mut g1) = (0.0, 0.0);
        info = [0.0; 3];
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(b0 + b1 * zi);
            let r = if yi { 1.0 } else { 0.0 } - p;
            g0 += r;
            g1 += r * zi;
            let w = p * (1.0 - p);
            info[0] += w;
            info[1] += w * zi;
            info[2] += w * zi * zi;
        }
        if (g0 * g0 + g1 * g1).sqrt() / n < GRAD_TOL || iterations >= MAX_ITER {
            break;
        }
        iterations += 1;
        let det = info[0] * info[2] - info[1] * info[1];
        let (d0, d1) = if det > 0.0 {
            (
                (info[2] * g0 - info[1] * g1) / det,
                (info[0] * g1 - info[1] * g0) / det,
            )
        } else {
            (g0 / n, g1 / n)
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let (c0, c1) = (b0 + t * d0, b1 + t * d1);
            let l2 = log_lik(&z, y, c0, c1);
            if l2 >= ll {
                (b0, b1, ll) = (c0, c1, l2);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }

    if separated(x, y) {
        return Err(StatsError::SeparationWarning {
            coef: b1,
            iterations,
        });
    }
    let det = info[0] * info[2] - info[1] * info[1];
    Ok(LogisticFit {
        coef: b1,
        intercept: b0,
        se_coef: (info[0] / det).sqrt(),
        iterations,
        x_mean: mean,
        x_sd: sd,
    })
}

/// Complete or quasi-complete separation of the two classes along `x`.
fn separated(x: &[f64], y: &[bool]) -> bool {
    let range = |want: bool| {
        x.iter()
            .zip(y)
            .filter(|(_, &l)| l == want)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
                (lo.min(v), hi.max(v))
            })
    };
    let (lo0, hi0) = range(false);
    let (lo1, hi1) = range(true);
    hi0 <= lo1 || hi1 <= lo0
}

/// Means and 95% t-intervals across undersampling runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticReport {
    pub runs: usize,
    pub minority: usize,
    pub majority: usize,
    pub coef_per_run: Vec<f64>,
    pub coef_mean: f64,
    pub coef_ci95: (f64, f64),
    /// `exp(coef)` of each run.
    pub or_per_run: Vec<f64>,
    /// Mean of the per-run odds ratios, with their own t-interval.
    pub or_mean: f64,
    pub or_ci95: (f64, f64),
    pub auc_per_run: Vec<f64>,
    pub auc_mean: f64,
    pub auc_ci95: (f64, f64),
    /// Set for a single run, where the interval is just the point estimate.
    pub degenerate_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl LogisticReport {
    /// Rows `logit coeff`, `odds ratio`, `roc-auc`.
    pub fn table_rows(&self) -> Vec<ReportRow> {
        [
            ("logit coeff", self.coef_mean, self.coef_ci95),
            ("odds ratio", self.or_mean, self.or_ci95),
            ("roc-auc", self.auc_mean, self.auc_ci95),
        ]
        .into_iter()
        .map(|(m, mean, (lo, hi))| ReportRow {
            metric: m.into(),
            mean,
            ci_low: lo,
            ci_high: hi,
        })
        .collect()
    }
}

/// Fits `runs` logistic models, each on all minority-class rows plus an
/// equally sized seeded sample of the majority class (original row order kept).
pub fn repeated_undersampling(
    x: &[f64],
    y: &[bool],
    runs: usize,
    seed: u64,
) -> Result<LogisticReport> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if runs == 0 {
        return Err(StatsError::NoRuns);
    }
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    let (minor, major) = if pos.len() <= neg.len() {
        (pos, neg)
    } else {
        (neg, pos)
    };
    if minor.is_empty() {
        return Err(StatsError::SingleClass);
    }
    let fits = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut idx: Vec<usize> = sample(&mut rng, major.len(), minor.len())
                .into_iter()
                .map(|i| major[i])
                .chain(minor.iter().copied())
                .collect();
            idx.sort_unstable();
            let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let ys: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
            let fit = fit_logistic(&xs, &ys)?;
            let eta: Vec<f64> = xs.iter().map(|&v| fit.eta(v)).collect();
            Ok((fit.coef, roc_auc(&eta, &ys)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let coefs: Vec<f64> = fits.iter().map(|f| f.0).collect();
    let aucs: Vec<f64> = fits.iter().map(|f| f.1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ors: Vec<f64> = coefs.iter().map(|c| c.exp()).collect();
    Ok(LogisticReport {
        runs,
        minority: minor.len(),
        majority: major.len(),
        or_mean: mean(&ors),
        or_ci95: t_interval95(&ors),
        or_per_run: ors,
        coef_mean: mean(&coefs),
        coef_ci95: t_interval95(&coefs),
        coef_per_run: coefs,
        auc_mean: mean(&aucs),
        auc_ci95: t_interval95(&aucs),
        auc_per_run: aucs,
        degenerate_ci: runs == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(coef: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sd = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let y = x
            .iter()
            .map(|v| rng.gen::<f64>() < sigmoid(coef * v / sd))
            .collect();
        (x, y)
    }

    #[test]
    fn recovers_known_coefficient() {
        let (x, y) = synthetic(2.0, 2000, 11);
        let f = fit_logistic(&x, &y).unwrap();
        assert!((f.coef - 2.0).abs() < 0.15, "coef {}", f.coef);
    }

    #[test]
    fn null_data_gives_small_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..400).map(|i| (i % 20) as f64 - 9.5).collect();
        let y: Vec<bool> = (0..400).map(|_| rng.gen()).collect();
        let f = fit_logistic(&x, &y).unwrap();
        assert!(f.coef.abs() < 3.0 * f.se_coef);
    }

    #[test]
    fn separation_and_singular_inputs() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [false, false, true, true];
        assert!(matches!(
            fit_logistic(&x, &y),
            Err(StatsError::SeparationWarning { .. })
        ));
        assert!(matches!(
            fit_logistic(&[1.0, 1.0, 1.0], &[true, false, true]),
            Err(StatsError::SingularData(_))
        ));
    }

    #[test]
    fn single_run_interval_is_degenerate() {
        let (x, y) = synthetic(1.0, 300, 3);
        let r = repeated_undersampling(&x, &y, 1, 9).unwrap();
        assert!(r.degenerate_ci);
        assert_eq!(r.coef_ci95, (r.coef_mean, r.coef_mean));
    }

    #[test]
    fn balanced_input_gives_identical_runs() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            x.push((i % 10) as f64 + if i % 2 == 0 { 1.5 } else { 0.0 });
            y.push(i % 2 == 0);
        }
        let r = repeated_undersampling(&x, &y, 5, 1).unwrap();
        assert!(r.coef_per_run.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(r.coef_ci95.0, r.coef_ci95.1);
        assert_eq!(r.table_rows().len(), 3);
        assert!((r.or_mean - r.coef_mean.exp()).abs() < 1e-12);
    }

    #[test]
    fn odds_ratio_averages_exponentiated_runs() {
        let (x, y) = synthetic(1.0, 600, 4);
        let y: Vec<bool> = y.iter().zip(&x).map(|(&b, &v)| b && v > -0.5).collect();
        let r = repeated_undersampling(&x, &y, 8, 2).unwrap();
        let want = r.coef_per_run.iter().map(|c| c.exp()).sum::<f64>() / 8.0;
        assert!((r.or_mean - want).abs() < 1e-12);
        assert!(r.or_ci95.0 <= r.or_mean && r.or_mean <= r.or_ci95.1);
    }
}
