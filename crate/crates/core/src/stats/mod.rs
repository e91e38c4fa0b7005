//! Analysis statistics: logistic regression with repeated undersampling,
//! ROC-AUC, Spearman correlation, isotonic regression and Kruskal–Wallis.

mod isotonic;
mod logistic;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

pub use isotonic::{isotonic_pava, IsotonicFit};
pub use logistic::{fit_logistic, repeated_undersampling, LogisticFit, LogisticReport};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("input has zero variance or a missing class: {0}")]
    SingularData(String),
    #[error("classes are perfectly separated; fit stopped at coef {coef} after {iterations} iterations")]
    SeparationWarning { coef: f64, iterations: usize },
    #[error("only one class present")]
    SingleClass,
    #[error("constant input has no ranks to correlate")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need at least two nonempty groups")]
    TooFewGroups,
    #[error("weights must be finite and non-negative")]
    NegativeWeight,
    #[error("undersampling needs at least one run")]
    NoRuns,
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of the groups of tied values.
fn tie_sizes(xs: &[f64]) -> Vec<usize> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.chunk_by(|a, b| a == b).map(<[f64]>::len).collect()
}

/// Mann–Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((r_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided, from the t approximation with `n − 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, got: n });
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or(StatsError::ConstantInput)?
        .clamp(-1.0, 1.0);
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
        2.0 * dist.sf(t.abs())
    };
    Ok(Spearman { rho, p, n })
}

/// `P(X > x)` for a chi-square variable with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwReport {
    pub h: f64,
    pub df: usize,
    pub p: f64,
    pub n: usize,
    /// Set when tied observations made the correction divisor differ from 1.
    pub tie_corrected: bool,
}

/// Kruskal–Wallis H with tie correction; `p` from the chi-square reference
/// with `k − 1` degrees of freedom. All-equal input gives `H = 0`.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KwReport> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(StatsError::TooFewGroups);
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len();
    let nf = n as f64;
    let ranks = average_ranks(&pooled);
    let mut offset = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        offset += g.len();
    }
    let h_raw = 12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0);
    let ties: f64 = tie_sizes(&pooled)
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let c = 1.0 - ties / (nf * nf * nf - nf);
    let h = if c <= 0.0 { 0.0 } else { (h_raw / c).max(0.0) };
    let df = groups.len() - 1;
    Ok(KwReport {
        h,
        df,
        p: chi_square_sf(h, df),
        n,
        tie_corrected: ties > 0.0,
    })
}

/// Two-sided 95% t-interval of the mean; collapses to the point for one value.
pub fn t_interval95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, mean);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("df is positive")
        .inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    (mean - half, mean + half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn auc_hand_cases() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.0, 0.1, 0.5, 0.9], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1.0, 2.0], &[true, true]), Err(StatsError::SingleClass));
    }

    #[test]
    fn spearman_hand_cases() {
        let s = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((s.rho + 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        assert_eq!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ConstantInput)
        );
    }

    #[test]
    fn kruskal_wallis_hand_cases() {
        let r = kruskal_wallis(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        assert!((r.h - 7.2).abs() < 1e-9);
        assert_eq!(r.df, 2);
        assert!(!r.tie_corrected);
        let z = kruskal_wallis(&[vec![1.0, 4.0], vec![2.0, 3.0]]).unwrap();
        assert!(z.h.abs() < 1e-9);
        assert!((z.p - 1.0).abs() < 1e-12);
        let eq = kruskal_wallis(&[vec![2.0, 2.0], vec![2.0]]).unwrap();
        assert_eq!(eq.h, 0.0);
        assert_eq!(kruskal_wallis(&[vec![1.0]]), Err(StatsError::TooFewGroups));
    }

    #[test]
    fn chi_square_table_value() {
        assert!((chi_square_sf(5.991, 2) - 0.05).abs() < 1e-3);
        assert!((chi_square_sf(3.841, 1) - 0.05).abs() < 1e-3);
        assert_eq!(chi_square_sf(0.0, 3), 1.0);
    }

    #[test]
    fn two_df_survival_is_exponential() {
        for x in [0.1, 1.0, 2.5, 5.991, 12.0] {
            assert!((chi_square_sf(x, 2) - (-x / 2.0).exp()).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn t_interval_single_value_collapses() {
        assert_eq!(t_interval95(&[2.5]), (2.5, 2.5));
        let (lo, hi) = t_interval95(&[1.0, 2.0, 3.0]);
        assert!(lo < 2.0 && hi > 2.0);
    }
}
