//! Method matrix evaluation and Show Rate.
//!
//! Zero-shot datapoints are judged by forced decoding: both listed options
//! are scored under the method's distribution and the higher score is the
//! answer (or, at a positive temperature, a draw from the two scores). Few-shot
//! datapoints are judged by free generation: the answer counts when `a_sec`
//! appears as a whole word in the first 16 generated tokens.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::balor::sampling::unit_draw;
use crate::balor::{
    build_contrastive, decode_with_vectors, forced_score, vanilla_decode_with_vectors,
    BalorConfig, BalorError, Mode, StepRecord,
};
use crate::dataset::prompts::{options, CB_PREFIX, DB_PREFIX, IE_PREFIX};
use crate::dataset::{Datapoint, DatasetError, OptionOrder, Task};
use crate::engine::tensor::softmax;
use crate::engine::{ModelBundle, Scalar};
use crate::patchscope::{extract_hidden, PatchError, PatchPlan};

/// Matching rules, recorded in run metadata.
pub const MATCH_RULES: &str =
    "zero-shot: argmax of forced-decoding score over the two options (v1); \
     few-shot: case-insensitive whole-word a_sec in first 16 generated tokens (v1)";

/// Generation window inspected by the few-shot matching rule.
pub const FEW_SHOT_WINDOW: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    EmptyRecords,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("datapoint {0} has no few-shot target")]
    MissingFewShot(String),
    #[error("invalid method: {0}")]
    InvalidMethod(String),
    #[error("option {0:?} cannot be tokenized")]
    UnencodableOption(String),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Balor(#[from] BalorError),
}

impl From<PatchError> for EvalError {
    fn from(e: PatchError) -> Self {
        EvalError::Balor(e.into())
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Vanilla,
    Cb,
    Ie,
    Db,
    BalorS,
    BalorD,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Vanilla,
        MethodKind::Cb,
        MethodKind::Ie,
        MethodKind::Db,
        MethodKind::BalorS,
        MethodKind::BalorD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Vanilla => "vanilla",
            MethodKind::Cb => "cb",
            MethodKind::Ie => "ie",
            MethodKind::Db => "db",
            MethodKind::BalorS => "balor_s",
            MethodKind::BalorD => "balor_d",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            MethodKind::Cb => CB_PREFIX,
            MethodKind::Ie => IE_PREFIX,
            MethodKind::Db => DB_PREFIX,
            _ => "",
        }
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            MethodKind::BalorS => Some(Mode::Shared),
            MethodKind::BalorD => Some(Mode::Divided),
            _ => None,
        }
    }
}

impl FromStr for MethodKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| EvalError::InvalidMethod(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Instruction prepended to the target template; empty for vanilla and BALOR.
    pub prefix: String,
    pub balor: Option<BalorConfig>,
}

impl MethodSpec {
    /// Standard spec for `kind`; `alpha` is used by the BALOR kinds only.
    pub fn new(kind: MethodKind, alpha: f64) -> Self {
        Self {
            kind,
            prefix: kind.prefix().to_string(),
            balor: kind.mode().map(|mode| BalorConfig {
                alpha,
                mode,
                ..BalorConfig::default()
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prompted = matches!(self.kind, MethodKind::Cb | MethodKind::Ie | MethodKind::Db);
        if prompted == self.prefix.is_empty() {
            return Err(EvalError::InvalidMethod(format!(
                "{} must {}have a prefix",
                self.kind.name(),
                if prompted { "" } else { "not " }
            )));
        }
        if self.kind.mode().is_some() != self.balor.is_some() {
            return Err(EvalError::InvalidMethod(format!(
                "{} has a mismatched BALOR config",
                self.kind.name()
            )));
        }
        if let Some(b) = &self.balor {
            b.validate()?;
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.balor.as_ref().map_or(0.0, |b| b.alpha)
    }

    pub fn mode(&self) -> Mode {
        self.balor.as_ref().map_or(Mode::Shared, |b| b.mode)
    }

    /// Target template with the prefix prepended.
    pub fn template(&self, template: &str) -> String {
        if self.prefix.is_empty() {
            template.to_string()
        } else {
            format!("{} {}", self.prefix, template)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub layer: usize,
    pub shots: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub seed: u64,
    pub model_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            layer: 1,
            shots: 0,
            temperature: 0.0,
            top_k: Some(50),
            top_p: Some(0.9),
            seed: 0,
            model_id: "model".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub datapoint_id: String,
    pub task: Task,
    pub method: String,
    pub order: OptionOrder,
    /// Chosen option (zero-shot) or generated text (few-shot).
    pub text: String,
    pub matched: bool,
    /// Forced-decoding scores of `(a_pri, a_sec)`; zero-shot only.
    pub scores: Option<(f64, f64)>,
    /// Per-step top-5 summaries; few-shot only.
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub model_id: String,
    pub method: String,
    pub alpha: f64,
    pub temperature: f64,
    pub shots: usize,
    pub sr: f64,
    /// Number of datapoints.
    pub n: usize,
    pub seed: u64,
}

/// Seed for one `(datapoint, order)` evaluation, independent of scheduling.
pub fn derived_seed(base: u64, id: &str, order: OptionOrder) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(id.as_bytes());
    h.update([match order {
        OptionOrder::Original => 0u8,
        OptionOrder::Swapped => 1u8,
    }]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Case-insensitive whole-word containment.
pub fn contains_word(text: &str, word: &str) -> bool {
    let (t, w) = (text.to_lowercase(), word.to_lowercase());
    if w.is_empty() {
        return false;
    }
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    t.match_indices(&w).any(|(i, _)| {
        boundary(t[..i].chars().next_back()) && boundary(t[i + w.len()..].chars().next())
    })
}

fn option_tokens<F: Scalar>(opt: &str, bundle: &ModelBundle<F>) -> Result<Vec<u32>> {
    match bundle.tokenizer.encode_continuation(opt) {
        Ok(ids) if !ids.is_empty() => Ok(ids),
        _ => Err(EvalError::UnencodableOption(opt.to_string())),
    }
}

fn zero_shot<F: Scalar>(
    dp: &Datapoint,
    order: OptionOrder,
    bundle: &ModelBundle<F>,
    method: &MethodSpec,
    opts: &EvalOptions,
) -> Result<ResponseRecord> {
    let template = method.template(dp.target_for(order));
    let plan = PatchPlan::new(
        &dp.source_prompt,
        &dp.noun,
        &template,
        opts.layer,
        opts.layer,
        bundle,
    )?;
    let pair = build_contrastive(&plan)?;
    let vectors = extract_hidden(&plan.source, bundle)?;
    let (o1, o2) = options(dp, order);
    let mut scores = [0.0; 2];
    for (s, o) in scores.iter_mut().zip([o1, o2]) {
        let ids = option_tokens(o, bundle)?;
        *s = forced_score(&pair, &vectors, bundle, method.alpha(), method.mode(), &ids)?;
    }
    let pick_second = if opts.temperature == 0.0 {
        scores[1] > scores[0]
    } else {
        let p = softmax(&[scores[0] / opts.temperature, scores[1] / opts.temperature]);
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(opts.seed, &dp.id, order));
        unit_draw(&mut rng) >= p[0]
    };
    let chosen = if pick_second { o2 } else { o1 };
    let by_attr = |a: &str| if a == o1 { scores[0] } else { scores[1] };
    Ok(ResponseRecord {
        datapoint_id: dp.id.clone(),
        task: dp.task,
        method: method.kind.name().into(),
        order,
        text: chosen.to_string(),
        matched: chosen == dp.a_sec,
        scores: Some((by_attr(&dp.a_pri), by_attr(&dp.a_sec))),
        steps: Vec::new(),
    })
}

fn few_shot<F: Scalar>(
    dp: &Datapoint,
    bundle: &ModelBundle<F>,
    method: &MethodSpec,
    opts: &EvalOptions,
) -> Result<ResponseRecord> {
    let order = OptionOrder::Original;
    let target = dp
        .fewshot_target
        .as_deref()
        .ok_or_else(|| EvalError::MissingFewShot(dp.id.clone()))?;
    let plan = PatchPlan::new(
        &dp.source_prompt,
        &dp.noun,
        &method.template(target),
        opts.layer,
        opts.layer,
        bundle,
    )?;
    let vectors = extract_hidden(&plan.source, bundle)?;
    let cfg = BalorConfig {
        alpha: method.alpha(),
        mode: method.mode(),
        temperature: opts.temperature,
        top_k: opts.top_k,
        top_p: opts.top_p,
        max_new_tokens: FEW_SHOT_WINDOW,
        rng_seed: derived_seed(opts.seed, &dp.id, order),
    };
    let out = match method.balor {
        Some(_) => decode_with_vectors(&build_contrastive(&plan)?, &vectors, bundle, &cfg)?,
        None => vanilla_decode_with_vectors(&plan, &vectors, bundle, &cfg)?,
    };
    Ok(ResponseRecord {
        datapoint_id: dp.id.clone(),
        task: dp.task,
        method: method.kind.name().into(),
        order,
        matched: contains_word(&out.text, &dp.a_sec),
        text: out.text,
        scores: None,
        steps: out.steps,
    })
}

/// Runs one method over the dataset. Zero-shot produces one record per
/// datapoint and option order; few-shot prompts list no options and produce
/// one record per datapoint. Records follow dataset order.
pub fn run_method<F: Scalar>(
    dataset: &[Datapoint],
    bundle: &ModelBundle<F>,
    method: &MethodSpec,
    opts: &EvalOptions,
) -> Result<Vec<ResponseRecord>> {
    method.validate()?;
    if opts.shots == 0 {
        let jobs: Vec<(&Datapoint, OptionOrder)> = dataset
            .iter()
            .flat_map(|dp| OptionOrder::BOTH.map(|o| (dp, o)))
            .collect();
        jobs.par_iter()
            .map(|&(dp, o)| zero_shot(dp, o, bundle, method, opts))
            .collect()
    } else {
        dataset
            .par_iter()
            .map(|dp| few_shot(dp, bundle, method, opts))
            .collect()
    }
}

/// Share of matched records.
pub fn compute_sr(records: &[ResponseRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    Ok(records.iter().filter(|r| r.matched).count() as f64 / records.len() as f64)
}

fn task_label(dataset: &[Datapoint]) -> String {
    let mut tasks: Vec<&str> = dataset.iter().map(|d| d.task.name()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    match tasks.as_slice() {
        [one] => one.to_string(),
        _ => "all".into(),
    }
}

fn row(
    task: String,
    records: &[ResponseRecord],
    n: usize,
    method: &MethodSpec,
    opts: &EvalOptions,
) -> Result<ResultRow> {
    Ok(ResultRow {
        task,
        model_id: opts.model_id.clone(),
        method: method.kind.name().into(),
        alpha: method.alpha(),
        temperature: opts.temperature,
        shots: opts.shots,
        sr: compute_sr(records)?,
        n,
        seed: opts.seed,
    })
}

/// Runs every method; one result row per (method, task).
pub fn evaluate<F: Scalar>(
    dataset: &[Datapoint],
    bundle: &ModelBundle<F>,
    methods: &[MethodSpec],
    opts: &EvalOptions,
) -> Result<(Vec<ResultRow>, Vec<ResponseRecord>)> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for m in methods {
        let records = run_method(dataset, bundle, m, opts)?;
        let mut by_task: BTreeMap<Task, Vec<ResponseRecord>> = BTreeMap::new();
        for r in &records {
            by_task.entry(r.task).or_default().push(r.clone());
        }
        for (task, recs) in &by_task {
            let n = dataset.iter().filter(|d| d.task == *task).count();
            let r = row(task.name().into(), recs, n, m, opts)?;
            info!(method = %r.method, task = %r.task, sr = r.sr, "evaluated");
            rows.push(r);
        }
        all.extend(records);
    }
    Ok((rows, all))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Temperature,
}

impl FromStr for SweepAxis {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "temperature" => Ok(SweepAxis::Temperature),
            other => Err(EvalError::InvalidMethod(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One result row per grid value, pooled over every task in the dataset.
pub fn sweep<F: Scalar>(
    dataset: &[Datapoint],
    bundle: &ModelBundle<F>,
    axis: SweepAxis,
    grid: &[f64],
    base: &MethodSpec,
    opts: &EvalOptions,
) -> Result<Vec<ResultRow>> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if axis == SweepAxis::Alpha && base.balor.is_none() {
        return Err(EvalError::InvalidMethod(format!(
            "alpha sweep needs a BALOR method, got {}",
            base.kind.name()
        )));
    }
    grid.iter()
        .map(|&v| {
            let mut m = base.clone();
            let mut o = opts.clone();
            match axis {
                SweepAxis::Alpha => m.balor.as_mut().expect("checked above").alpha = v,
                SweepAxis::Temperature => o.temperature = v,
            }
            let recs = run_method(dataset, bundle, &m, &o)?;
            row(task_label(dataset), &recs, dataset.len(), &m, &o)
        })
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::toy::{make_toy_model, ToyOptions};

    fn record(matched: bool) -> ResponseRecord {
        ResponseRecord {
            datapoint_id: "x".into(),
            task: Task::Color,
            method: "vanilla".into(),
            order: OptionOrder::Original,
            text: String::new(),
            matched,
            scores: None,
            steps: Vec::new(),
        }
    }

    fn data() -> Vec<Datapoint> {
        [
            ("broccoli", "green", "purple"),
            ("tomato", "red", "green"),
            ("banana", "yellow", "green"),
        ]
        .iter()
        .map(|(n, p, s)| Datapoint::new(Task::Color, None, n, p, s, None).unwrap())
        .collect()
    }

    #[test]
    fn sr_hand_cases() {
        let recs: Vec<_> = (0..8).map(|i| record(i < 3)).collect();
        assert_eq!(compute_sr(&recs).unwrap(), 0.375);
        assert_eq!(compute_sr(&[record(true), record(true)]).unwrap(), 1.0);
        assert_eq!(compute_sr(&[record(false)]).unwrap(), 0.0);
        assert!(matches!(compute_sr(&[]), Err(EvalError::EmptyRecords)));
    }

    #[test]
    fn word_boundary_matching() {
        assert!(contains_word("It is Purple, mostly", "purple"));
        assert!(!contains_word("purplish tones", "purple"));
        assert!(!contains_word("ultrapurple", "purple"));
        assert!(contains_word("purple", "purple"));
    }

    #[test]
    fn method_names_and_prefixes() {
        assert_eq!("balor-s".parse::<MethodKind>().unwrap(), MethodKind::BalorS);
        let cb = MethodSpec::new(MethodKind::Cb, 1.0);
        assert!(cb.template("T").starts_with(CB_PREFIX));
        cb.validate().unwrap();
        let mut bad = MethodSpec::new(MethodKind::Vanilla, 0.0);
        bad.prefix = "x".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn alpha_zero_balor_equals_vanilla_records() {
        let m = make_toy_model(7, &ToyOptions::default()).unwrap();
        let opts = EvalOptions {
            layer: 2,
            ..EvalOptions::default()
        };
        let v = run_method(&data(), &m, &MethodSpec::new(MethodKind::Vanilla, 0.0), &opts).unwrap();
        for k in [MethodKind::BalorS, MethodKind::BalorD] {
            let b = run_method(&data(), &m, &MethodSpec::new(k, 0.0), &opts).unwrap();
            assert_eq!(v.len(), b.len());
            for (x, y) in v.iter().zip(&b) {
                assert_eq!((x.matched, &x.text, x.scores), (y.matched, &y.text, y.scores));
            }
        }
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn sweep_cardinality_and_greedy_seed_independence() {
        let m = make_toy_model(7, &ToyOptions::default()).unwrap();
        let base = MethodSpec::new(MethodKind::BalorS, 1.0);
        let opts = EvalOptions {
            layer: 2,
            ..EvalOptions::default()
        };
        let rows = sweep(&data(), &m, SweepAxis::Alpha, &[0.0, 0.5, 1.0], &base, &opts).unwrap();
        assert_eq!(rows.len(), 3);
        let v = &evaluate(&data(), &m, &[MethodSpec::new(MethodKind::Vanilla, 0.0)], &opts)
            .unwrap()
            .0[0];
        assert_eq!(rows[0].sr, v.sr);
        let other = EvalOptions { seed: 99, ..opts.clone() };
        let again = sweep(&data(), &m, SweepAxis::Alpha, &[0.0, 0.5, 1.0], &base, &other).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.sr, b.sr);
        }
    }

    #[test]
    fn few_shot_requires_target_and_matches_words() {
        let m = make_toy_model(7, &ToyOptions::default()).unwrap();
        let mut d = data();
        let opts = EvalOptions {
            layer: 2,
            shots: 2,
            ..EvalOptions::default()
        };
        assert!(matches!(
            run_method(&d, &m, &MethodSpec::new(MethodKind::Vanilla, 0.0), &opts),
            Err(EvalError::MissingFewShot(_))
        ));
        crate::dataset::prompts::attach_few_shot(&mut d, 2, 0).unwrap();
        let recs = run_method(&d, &m, &MethodSpec::new(MethodKind::BalorS, 1.0), &opts).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            let dp = d.iter().find(|x| x.id == r.datapoint_id).unwrap();
            assert_eq!(r.matched, contains_word(&r.text, &dp.a_sec));
            assert!(r.steps.len() <= FEW_SHOT_WINDOW);
        }
    }

    #[test]
    fn derived_seeds_differ_by_order_and_id() {
        let a = derived_seed(1, "color/broccoli", OptionOrder::Original);
        assert_ne!(a, derived_seed(1, "color/broccoli", OptionOrder::Swapped));
        assert_ne!(a, derived_seed(1, "color/tomato", OptionOrder::Original));
        assert_eq!(a, derived_seed(1, "color/broccoli", OptionOrder::Original));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![ResultRow {
            task: "color".into(),
            model_id: "toy".into(),
            method: "balor_s".into(),
            alpha: 1.5,
            temperature: 0.0,
            shots: 0,
            sr: 0.25,
            n: 4,
            seed: 3,
        }];
        write_results_csv(&p, &rows).unwrap();
        assert_eq!(read_results_csv(&p).unwrap(), rows);
    }
}
