//! Acceptance run: one PASS/FAIL line per criterion, exit code 1 on any failure.

mod common;

use std::time::{Duration, Instant};

use patchlens::balor::log_odds_decomposition;
use patchlens::dataset::{bias_split, prompts::options, Datapoint, OptionChooser, OptionOrder, Task};
use patchlens::layer_select::{normalize_scores, select_layer};
use patchlens::stats::{
    chi_square_sf, fit_logistic, isotonic_pava, kruskal_wallis, repeated_undersampling, roc_auc,
    spearman,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const ALPHAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let v = |rng: &mut ChaCha8Rng| (0..32).map(|_| rng.gen_range(-10.0..10.0)).collect();
    (v(rng), v(rng))
}

fn c1_identity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (lt, ls) = random_pair(&mut rng);
        let (y1, y2) = (rng.gen_range(0..32), rng.gen_range(0..32));
        for a in ALPHAS {
            let (lhs, rhs) = log_odds_decomposition(&lt, &ls, a, y1, y2);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && secs < 5.0,
        format!("max error {worst:.2e} over 5000 evaluations in {secs:.3}s"),
    )
}

fn c2_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut eligible, mut violations) = (0, 0);
    for _ in 0..1000 {
        let (lt, ls) = random_pair(&mut rng);
        let (y1, y2) = (rng.gen_range(0..32), rng.gen_range(0..32));
        if lt[y1] - lt[y2] <= ls[y1] - ls[y2] {
            continue;
        }
        eligible += 1;
        let seq: Vec<f64> = ALPHAS
            .iter()
            .map(|&a| log_odds_decomposition(&lt, &ls, a, y1, y2).0)
            .collect();
        if !seq.windows(2).all(|w| w[1] > w[0]) {
            violations += 1;
        }
    }
    check(
        violations == 0 && eligible > 0,
        format!("{eligible} eligible cases, {violations} violations"),
    )
}

fn c3_collapse() -> Outcome {
    let bad = common::collapse_mismatches(100, 21);
    check(bad == 0, format!("100 cases x 2 modes, {bad} token mismatches"))
}

fn c4_rig_flip() -> Outcome {
    let r = common::rig_flip();
    let ok = r.cases > 0
        && r.vanilla_biased == r.cases
        && r.flippable > 0
        && r.flipped_as_predicted == r.flippable
        && r.sr_balor > r.sr_vanilla;
    check(
        ok,
        format!(
            "vanilla biased {}/{}; flips at predicted alpha {}/{}; SR vanilla {:.3} vs balor-s {:.3} on {} biased datapoints",
            r.vanilla_biased,
            r.cases,
            r.flipped_as_predicted,
            r.flippable,
            r.sr_vanilla,
            r.sr_balor,
            r.biased_subset
        ),
    )
}

fn c5_self_patch() -> Outcome {
    let r = common::self_patch(50, 4);
    check(
        r.max_dev_f32 <= 1e-6 && r.inexact_f64 == 0,
        format!(
            "50 cases, max f32 deviation {:.2e}, inexact f64 cases {}",
            r.max_dev_f32, r.inexact_f64
        ),
    )
}

fn c6_gradient() -> Outcome {
    let errs = common::gradient_errors(20, 9);
    let worst = errs.iter().copied().fold(0.0, f64::max);
    check(worst < 1e-3, format!("20 cases, max relative L2 error {worst:.2e}"))
}

fn brute_force_sse(ys: &[f64]) -> f64 {
    fn go(i: usize, lo: i32, ys: &[f64], acc: f64, best: &mut f64) {
        if i == ys.len() {
            *best = best.min(acc);
            return;
        }
        for v in lo..=16 {
            let f = v as f64 * 0.25;
            go(i + 1, v, ys, acc + (ys[i] - f).powi(2), best);
        }
    }
    let mut best = f64::INFINITY;
    go(0, 0, ys, 0.0, &mut best);
    best
}

fn c7_stats() -> Outcome {
    let mut fails = Vec::new();
    let rho = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).map(|s| s.rho);
    if rho.as_ref().map_or(true, |r| (r + 0.5).abs() > 1e-12) {
        fails.push(format!("spearman {rho:?}"));
    }
    let p1 = isotonic_pava(&[3.0, 1.0, 2.0], &[1.0; 3]).map(|f| f.fitted);
    if p1 != Ok(vec![2.0, 2.0, 2.0]) {
        fails.push(format!("pava 1 {p1:?}"));
    }
    let p2 = isotonic_pava(&[1.0, 3.0, 2.0], &[1.0; 3]).map(|f| f.fitted);
    if p2 != Ok(vec![1.0, 2.5, 2.5]) {
        fails.push(format!("pava 2 {p2:?}"));
    }
    let h = kruskal_wallis(&[
        vec![1.0, 2.0, 3.0],
        vec![4.0, 5.0, 6.0],
        vec![7.0, 8.0, 9.0],
    ])
    .map(|r| r.h);
    if h.as_ref().map_or(true, |h| (h - 7.2).abs() > 1e-9) {
        fails.push(format!("kw 7.2 {h:?}"));
    }
    let h0 = kruskal_wallis(&[vec![1.0, 4.0], vec![2.0, 3.0]]).map(|r| r.h);
    if h0.as_ref().map_or(true, |h| h.abs() > 1e-9) {
        fails.push(format!("kw 0 {h0:?}"));
    }
    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
    if auc != Ok(0.75) {
        fails.push(format!("auc {auc:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=16) as f64 * 0.25).collect();
        let fit = isotonic_pava(&ys, &vec![1.0; n]).unwrap();
        let bf = brute_force_sse(&ys);
        if fit.sse > bf + 1e-9 {
            fails.push(format!("isotonic {ys:?}: {} > {bf}", fit.sse));
            break;
        }
    }
    let p = chi_square_sf(5.991, 2);
    if (p - 0.05).abs() > 1e-3 {
        fails.push(format!("chi2 {p}"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("all hand cases exact; 200 isotonic brute-force cases; chi2 sf {p:.5}")
        } else {
            fails.join("; ")
        },
    )
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn c8_logistic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 2000;
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let y: Vec<bool> = x.iter().map(|v| rng.gen::<f64>() < sigmoid(2.0 * v / sd)).collect();
    let coef = match fit_logistic(&x, &y) {
        Ok(f) => f.coef,
        Err(e) => return Err(format!("fit failed: {e}")),
    };
    // imbalanced labels for the undersampling report
    let yi: Vec<bool> = x
        .iter()
        .map(|v| rng.gen::<f64>() < sigmoid(-1.5 + 1.0 * v / sd))
        .collect();
    let rep = match repeated_undersampling(&x, &yi, 20, 3) {
        Ok(r) => r,
        Err(e) => return Err(format!("report failed: {e}")),
    };
    let rows = rep.table_rows();
    let names: Vec<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
    let schema = names == ["logit coeff", "odds ratio", "roc-auc"]
        && rows.iter().all(|r| r.ci_low <= r.mean && r.mean <= r.ci_high);
    check(
        (coef - 2.0).abs() <= 0.15 && schema,
        format!(
            "coef {coef:.4}; report rows {names:?}, OR {:.3} [{:.3}, {:.3}], AUC {:.3}",
            rep.or_mean, rep.or_ci95.0, rep.or_ci95.1, rep.auc_mean
        ),
    )
}

fn c9_layer_select() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut wrong = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..12);
        let rows: Vec<(usize, f64, f64)> = (0..n)
            .map(|i| (i + 1, rng.gen_range(-5.0..5.0), rng.gen_range(0.0..1.0)))
            .collect();
        let argmax = |f: fn(&(usize, f64, f64)) -> f64| {
            let m = rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            rows.iter().find(|r| f(r) == m).unwrap().0
        };
        if select_layer(&normalize_scores(&rows, 1.0)).ok() != Some(argmax(|r| r.1)) {
            wrong += 1;
        }
        if select_layer(&normalize_scores(&rows, 0.0)).ok() != Some(argmax(|r| r.2)) {
            wrong += 1;
        }
    }
    // LD [3, 1, 2] → [1, 0, 0.5]; GSA [0.2, 0.8, 0.4] → [0, 1, 1/3];
    // combined at w = 0.8: [0.8, 0.2, 0.4667]
    let hand = select_layer(&normalize_scores(
        &[(1, 3.0, 0.2), (2, 1.0, 0.8), (3, 2.0, 0.4)],
        0.8,
    ))
    .ok();
    check(
        wrong == 0 && hand == Some(1),
        format!("500 random tables, {wrong} mismatches; hand case selects {hand:?}"),
    )
}

struct FirstOption;
impl OptionChooser for FirstOption {
    fn prefers_primary(&self, dp: &Datapoint, o: OptionOrder) -> patchlens::dataset::Result<bool> {
        Ok(options(dp, o).0 == dp.a_pri)
    }
}

struct AlwaysPrimary;
impl OptionChooser for AlwaysPrimary {
    fn prefers_primary(&self, _: &Datapoint, _: OptionOrder) -> patchlens::dataset::Result<bool> {
        Ok(true)
    }
}

fn c10_bias_split() -> Outcome {
    let dps: Vec<Datapoint> = common::COLOR_ROWS
        .iter()
        .map(|(n, p, s)| Datapoint::new(Task::Color, None, n, p, s, None).unwrap())
        .collect();
    let first = bias_split(&dps, &FirstOption).map_err(|e| e.to_string())?;
    let always = bias_split(&dps, &AlwaysPrimary).map_err(|e| e.to_string())?;
    check(
        first.0.is_empty() && always.0.len() == dps.len(),
        format!(
            "first-option stub {} biased; always-primary stub {}/{} biased",
            first.0.len(),
            always.0.len(),
            dps.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("log-odds identity", c1_identity),
        ("alpha monotonicity", c2_monotone),
        ("alpha=0 collapse", c3_collapse),
        ("rigged-bias flip", c4_rig_flip),
        ("self-patch identity", c5_self_patch),
        ("gradient check", c6_gradient),
        ("stats oracles", c7_stats),
        ("logistic recovery", c8_logistic),
        ("layer selection", c9_layer_select),
        ("bias-split stubs", c10_bias_split),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = f();
        let ms = t.elapsed().as_millis();
        match out {
            Ok(d) => println!("PASS {:>2} {name} ({ms} ms): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({ms} ms): {d}", i + 1);
            }
        }
    }
    let total = start.elapsed();
    let limit = Duration::from_secs(300);
    if total < limit {
        println!("PASS 11 suite runtime: {:.2}s < 300s", total.as_secs_f64());
    } else {
        failed += 1;
        println!("FAIL 11 suite runtime: {:.2}s >= 300s", total.as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
