//! Subcommand arguments and their pipelines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use patchlens::balor::{build_contrastive, decode as balor_decode, vanilla_decode, BalorConfig, Mode};
use patchlens::dataset::{
    self, assign_attributes, build_datapoints, builtin_color_lexicon, builtin_color_nouns,
    builtin_corpus, builtin_relations, prompts::attach_few_shot, read_jsonl, scan_corpus,
    scan_corpus_dir, write_jsonl, Datapoint, ModelChooser, RelationEntry, ScanOptions, Subset,
    Task,
};
use patchlens::engine::{fptl, make_toy_model, BiasRig, ModelBundle, ToyOptions};
use patchlens::eval::{
    evaluate as run_evaluate, sweep, write_results_csv, EvalOptions, MethodKind, MethodSpec,
    ResultRow, SweepAxis, MATCH_RULES,
};
use patchlens::layer_select::{scan_layers, LayerScan, SelectionConfig};
use patchlens::patchscope::PatchPlan;
use patchlens::stats::{isotonic_pava, kruskal_wallis, repeated_undersampling, spearman};

use crate::config::{out_dir, required, write_snapshot};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

enum Loaded {
    F32(ModelBundle<f32>),
    F64(ModelBundle<f64>),
}

macro_rules! with_bundle {
    ($m:expr, $b:ident => $body:expr) => {
        match $m {
            Loaded::F32($b) => $body,
            Loaded::F64($b) => $body,
        }
    };
}

fn load_model(dir: &Path, precision: &str) -> anyhow::Result<Loaded> {
    let b = fptl::load_bundle(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    info!(path = %dir.display(), layers = b.n_layers(), vocab = b.config.vocab_size, "model loaded");
    match precision {
        "f32" => Ok(Loaded::F32(b)),
        "f64" => Ok(Loaded::F64(b.to_f64())),
        other => Err(usage(format!("--precision must be f32 or f64, got {other:?}"))),
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Vec<Datapoint>> {
    let dps: Vec<Datapoint> = read_jsonl(path)?;
    if dps.is_empty() {
        anyhow::bail!("dataset {} is empty", path.display());
    }
    Ok(dps)
}

fn filter_subset(dps: Vec<Datapoint>, subset: &str) -> anyhow::Result<Vec<Datapoint>> {
    let want = match subset {
        "all" => return Ok(dps),
        "biased" => Subset::Biased,
        "nonbiased" => Subset::Nonbiased,
        "unsplit" => Subset::Unsplit,
        other => return Err(usage(format!("unknown subset {other:?}"))),
    };
    let out: Vec<Datapoint> = dps.into_iter().filter(|d| d.subset == want).collect();
    if out.is_empty() {
        anyhow::bail!("no datapoints in subset {subset}");
    }
    Ok(out)
}

/// Nonbiased datapoints, or every datapoint when the set has not been split.
fn default_probe_pool(all: &[Datapoint]) -> Vec<Datapoint> {
    let pool: Vec<Datapoint> = all
        .iter()
        .filter(|d| d.subset == Subset::Nonbiased)
        .cloned()
        .collect();
    if pool.is_empty() {
        all.to_vec()
    } else {
        pool
    }
}

fn read_json_list(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------- gen-toy

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct GenToyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Token whose output bias is raised; enables the bias rig.
    #[arg(long)]
    pub bias_token: Option<String>,
    #[arg(long)]
    pub bias_strength: Option<f64>,
    #[arg(long)]
    pub context_gain: Option<f64>,
}

pub fn gen_toy(a: &GenToyArgs) -> anyhow::Result<()> {
    let d = ToyOptions::default();
    let rigged = a.bias_token.is_some() || a.bias_strength.is_some();
    let r = GenToyArgs {
        seed: Some(a.seed.unwrap_or(0)),
        out_dir: Some(out_dir(&a.out_dir)),
        layers: Some(a.layers.unwrap_or(d.n_layers)),
        d_model: Some(a.d_model.unwrap_or(d.d_model)),
        heads: Some(a.heads.unwrap_or(d.n_heads)),
        d_ff: Some(a.d_ff.unwrap_or(d.d_ff)),
        max_seq: Some(a.max_seq.unwrap_or(d.max_seq)),
        bias_token: rigged.then(|| a.bias_token.clone().unwrap_or_else(|| "green".into())),
        bias_strength: rigged.then(|| a.bias_strength.unwrap_or(3.0)),
        context_gain: rigged.then(|| a.context_gain.unwrap_or(BiasRig::DEFAULT_GAIN)),
    };
    let opts = ToyOptions {
        n_layers: r.layers.unwrap(),
        d_model: r.d_model.unwrap(),
        n_heads: r.heads.unwrap(),
        d_ff: r.d_ff.unwrap(),
        max_seq: r.max_seq.unwrap(),
        rig: r.bias_token.as_ref().map(|t| BiasRig {
            biased_token: t.clone(),
            bias_strength: r.bias_strength.unwrap(),
            context_gain: r.context_gain.unwrap(),
        }),
        ..d
    };
    let model = make_toy_model(r.seed.unwrap(), &opts).map_err(|e| usage(e.to_string()))?;
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "gen-toy", &r, None)?;
    fptl::save_bundle(&model, &dir)?;
    info!(dir = %dir.display(), vocab = model.config.vocab_size, "toy model written");
    Ok(())
}

// ---------------------------------------------------------- build-dataset

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct BuildDatasetArgs {
    /// Directory of `*.txt` files; the bundled mini corpus when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON array of color nouns.
    #[arg(long)]
    pub nouns: Option<PathBuf>,
    /// JSON array of color words.
    #[arg(long)]
    pub colors: Option<PathBuf>,
    /// JSONL relation entries for the gender, culture and age tasks.
    #[arg(long)]
    pub relations: Option<PathBuf>,
    /// Build the color task only.
    #[arg(long)]
    pub no_relations: bool,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn build_dataset(a: &BuildDatasetArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.window = Some(a.window.unwrap_or(ScanOptions::default().window_tokens));
    r.shots = Some(a.shots.unwrap_or(0));
    r.seed = Some(a.seed.unwrap_or(0));
    r.out_dir = Some(out_dir(&a.out_dir));
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "build-dataset", &r, None)?;

    let nouns = match &r.nouns {
        Some(p) => read_json_list(p)?,
        None => builtin_color_nouns(),
    };
    let colors = match &r.colors {
        Some(p) => read_json_list(p)?,
        None => builtin_color_lexicon(),
    };
    let opts = ScanOptions {
        window_tokens: r.window.unwrap(),
        corpus_id: r
            .corpus
            .as_ref()
            .map_or("builtin-mini".into(), |p| p.display().to_string()),
    };
    let table = match &r.corpus {
        Some(p) => scan_corpus_dir(p, &nouns, &colors, &opts)?,
        None => scan_corpus(&builtin_corpus(), &nouns, &colors, &opts),
    };
    let drafts = assign_attributes(&table);
    let relations: Vec<RelationEntry> = match (&r.relations, r.no_relations) {
        (_, true) => Vec::new(),
        (Some(p), false) => read_jsonl(p)?,
        (None, false) => builtin_relations(),
    };
    let mut dps = build_datapoints(&drafts, &relations)?;
    if r.shots.unwrap() > 0 {
        attach_few_shot(&mut dps, r.shots.unwrap(), r.seed.unwrap())?;
    }
    std::fs::write(
        dir.join("cooccurrence.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    write_jsonl(&dir.join("dataset.jsonl"), &dps)?;
    info!(datapoints = dps.len(), color = drafts.len(), "dataset written");
    Ok(())
}

// ------------------------------------------------------------- bias-split

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct BiasSplitArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `f32` or `f64` (default).
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Color datapoints are split by the model; the other tasks have no
/// nonbiased part and are all marked biased.
pub fn bias_split(a: &BiasSplitArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.precision = Some(a.precision.clone().unwrap_or_else(|| "f64".into()));
    r.out_dir = Some(out_dir(&a.out_dir));
    let model_dir = required(&r.model, "model")?;
    let data = required(&r.dataset, "dataset")?;
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "bias-split", &r, None)?;

    let model = load_model(&model_dir, r.precision.as_deref().unwrap())?;
    let dps = load_dataset(&data)?;
    let (color, other): (Vec<Datapoint>, Vec<Datapoint>) =
        dps.into_iter().partition(|d| d.task == Task::Color);
    let (mut biased, nonbiased) =
        with_bundle!(&model, b => dataset::bias_split(&color, &ModelChooser { bundle: b })?);
    biased.extend(other.into_iter().map(|mut d| {
        d.subset = Subset::Biased;
        d
    }));
    let mut all: Vec<Datapoint> = biased.iter().chain(&nonbiased).cloned().collect();
    all.sort_by(|x, y| x.id.cmp(&y.id));
    write_jsonl(&dir.join("biased.jsonl"), &biased)?;
    write_jsonl(&dir.join("nonbiased.jsonl"), &nonbiased)?;
    write_jsonl(&dir.join("split.jsonl"), &all)?;
    info!(biased = biased.len(), nonbiased = nonbiased.len(), "split written");
    Ok(())
}

// ----------------------------------------------------------- select-layer

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct SelectLayerArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Datapoints used to train the attribute probes; the nonbiased part of
    /// the dataset when omitted.
    #[arg(long)]
    pub probe_pool: Option<PathBuf>,
    /// `biased`, `nonbiased`, `unsplit` or `all` (default).
    #[arg(long)]
    pub subset: Option<String>,
    /// Weight of the logit-difference signal in the combined score.
    #[arg(long)]
    pub weight_w: Option<f64>,
    #[arg(long)]
    pub layer_min: Option<usize>,
    #[arg(long)]
    pub layer_max: Option<usize>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn selection_config(w: f64, lo: Option<usize>, hi: Option<usize>, n_layers: usize) -> anyhow::Result<SelectionConfig> {
    let cfg = SelectionConfig {
        weight_w: w,
        layer_range: match (lo, hi) {
            (None, None) => None,
            (l, h) => Some((l.unwrap_or(1), h.unwrap_or(n_layers.saturating_sub(1).max(1)))),
        },
        ..SelectionConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write_scan(dir: &Path, scan: &LayerScan) -> anyhow::Result<()> {
    std::fs::write(dir.join("layer_scan.json"), serde_json::to_string_pretty(scan)? + "\n")?;
    Ok(())
}

pub fn select_layer(a: &SelectLayerArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.subset = Some(a.subset.clone().unwrap_or_else(|| "all".into()));
    r.weight_w = Some(a.weight_w.unwrap_or(0.8));
    r.precision = Some(a.precision.clone().unwrap_or_else(|| "f64".into()));
    r.out_dir = Some(out_dir(&a.out_dir));
    let model_dir = required(&r.model, "model")?;
    let data = required(&r.dataset, "dataset")?;
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "select-layer", &r, None)?;

    let model = load_model(&model_dir, r.precision.as_deref().unwrap())?;
    let all = load_dataset(&data)?;
    let pool = match &r.probe_pool {
        Some(p) => load_dataset(p)?,
        None => default_probe_pool(&all),
    };
    let dps = filter_subset(all, r.subset.as_deref().unwrap())?;
    let scan = with_bundle!(&model, b => {
        let cfg = selection_config(r.weight_w.unwrap(), r.layer_min, r.layer_max, b.n_layers())?;
        scan_layers(&dps, &pool, b, &cfg)?
    });
    write_scan(&dir, &scan)?;
    info!(selected = scan.selected, "layer selected");
    println!("{}", scan.selected);
    Ok(())
}

// ----------------------------------------------------------------- decode

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub source_prompt: Option<String>,
    #[arg(long)]
    pub noun: Option<String>,
    /// Target template containing the `{x}` placeholder.
    #[arg(long)]
    pub target: Option<String>,
    /// Source layer; defaults to `--layer`.
    #[arg(long)]
    pub source_layer: Option<usize>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `s` (shared) or `d` (divided).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plain patched decoding without recalibration.
    #[arg(long)]
    pub vanilla: bool,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn decode(a: &DecodeArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.layer = Some(a.layer.unwrap_or(1));
    r.source_layer = Some(a.source_layer.unwrap_or(r.layer.unwrap()));
    r.alpha = Some(a.alpha.unwrap_or(1.0));
    r.mode = Some(a.mode.clone().unwrap_or_else(|| "s".into()));
    r.temperature = Some(a.temperature.unwrap_or(0.0));
    r.max_new_tokens = Some(a.max_new_tokens.unwrap_or(16));
    r.seed = Some(a.seed.unwrap_or(0));
    r.precision = Some(a.precision.clone().unwrap_or_else(|| "f64".into()));
    r.out_dir = Some(out_dir(&a.out_dir));
    let model_dir = required(&r.model, "model")?;
    let source = required(&r.source_prompt, "source-prompt")?;
    let noun = required(&r.noun, "noun")?;
    let target = required(&r.target, "target")?;
    let mode: Mode = r.mode.as_deref().unwrap().parse().map_err(usage)?;
    let cfg = BalorConfig {
        alpha: r.alpha.unwrap(),
        mode,
        temperature: r.temperature.unwrap(),
        top_k: r.top_k,
        top_p: r.top_p,
        max_new_tokens: r.max_new_tokens.unwrap(),
        rng_seed: r.seed.unwrap(),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "decode", &r, None)?;

    let model = load_model(&model_dir, r.precision.as_deref().unwrap())?;
    let out = with_bundle!(&model, b => {
        let plan = PatchPlan::new(&source, &noun, &target, r.source_layer.unwrap(), r.layer.unwrap(), b)?;
        if r.vanilla {
            vanilla_decode(&plan, b, &cfg)?
        } else {
            balor_decode(&build_contrastive(&plan)?, b, &cfg)?
        }
    });
    std::fs::write(dir.join("decode.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    println!("{}", out.text);
    Ok(())
}

// --------------------------------------------------------------- evaluate

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `biased`, `nonbiased`, `unsplit` or `all` (default).
    #[arg(long)]
    pub subset: Option<String>,
    /// Comma-separated: vanilla, cb, ie, db, balor-s, balor-d.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Layer index or `auto`.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub weight_w: Option<f64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model_id: Option<String>,
    /// `alpha=v1,v2,...` or `temperature=v1,v2,...`.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_methods(list: &str, alpha: f64) -> anyhow::Result<Vec<MethodSpec>> {
    let specs = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let kind: MethodKind = s.parse().map_err(|e: patchlens::eval::EvalError| usage(e.to_string()))?;
            let m = MethodSpec::new(kind, alpha);
            m.validate().map_err(|e| usage(e.to_string()))?;
            Ok(m)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(usage("--methods is empty"));
    }
    Ok(specs)
}

fn parse_sweep(s: &str) -> anyhow::Result<(SweepAxis, Vec<f64>)> {
    let (axis, values) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("--sweep expects axis=v1,v2,..., got {s:?}")))?;
    let axis: SweepAxis = axis.trim().parse().map_err(|e: patchlens::eval::EvalError| usage(e.to_string()))?;
    let grid = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad sweep value {v:?}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((axis, grid))
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.subset = Some(a.subset.clone().unwrap_or_else(|| "all".into()));
    r.methods = Some(a.methods.clone().unwrap_or_else(|| "vanilla,balor-s".into()));
    r.alpha = Some(a.alpha.unwrap_or(1.0));
    r.layer = Some(a.layer.clone().unwrap_or_else(|| "auto".into()));
    r.weight_w = Some(a.weight_w.unwrap_or(0.8));
    r.shots = Some(a.shots.unwrap_or(0));
    r.temperature = Some(a.temperature.unwrap_or(0.0));
    r.top_k = Some(a.top_k.unwrap_or(50));
    r.top_p = Some(a.top_p.unwrap_or(0.9));
    r.seed = Some(a.seed.unwrap_or(0));
    r.precision = Some(a.precision.clone().unwrap_or_else(|| "f64".into()));
    r.out_dir = Some(out_dir(&a.out_dir));
    let model_dir = required(&r.model, "model")?;
    let data = required(&r.dataset, "dataset")?;
    r.model_id = Some(a.model_id.clone().unwrap_or_else(|| {
        model_dir
            .file_name()
            .map_or("model".into(), |n| n.to_string_lossy().into_owned())
    }));
    let methods = parse_methods(r.methods.as_deref().unwrap(), r.alpha.unwrap())?;
    let sweep_spec = r.sweep.as_deref().map(parse_sweep).transpose()?;
    let fixed_layer = match r.layer.as_deref().unwrap() {
        "auto" => None,
        s => Some(s.parse::<usize>().map_err(|_| usage(format!("--layer must be an index or auto, got {s:?}")))?),
    };
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "evaluate", &r, Some(MATCH_RULES))?;

    let model = load_model(&model_dir, r.precision.as_deref().unwrap())?;
    let all = load_dataset(&data)?;
    let pool = default_probe_pool(&all);
    let mut dps = filter_subset(all, r.subset.as_deref().unwrap())?;
    let shots = r.shots.unwrap();
    if shots > 0 && dps.iter().any(|d| d.fewshot_target.is_none()) {
        attach_few_shot(&mut dps, shots, r.seed.unwrap())?;
    }
    let (rows, records) = with_bundle!(&model, b => {
        let layer = match fixed_layer {
            Some(l) => l,
            None => {
                let cfg = selection_config(r.weight_w.unwrap(), None, None, b.n_layers())?;
                let scan = scan_layers(&dps, &pool, b, &cfg)?;
                write_scan(&dir, &scan)?;
                info!(layer = scan.selected, "auto layer");
                scan.selected
            }
        };
        let opts = EvalOptions {
            layer,
            shots,
            temperature: r.temperature.unwrap(),
            top_k: r.top_k,
            top_p: r.top_p,
            seed: r.seed.unwrap(),
            model_id: r.model_id.clone().unwrap(),
        };
        match &sweep_spec {
            None => run_evaluate(&dps, b, &methods, &opts)?,
            Some((axis, grid)) => {
                let mut rows = Vec::new();
                for m in &methods {
                    if *axis == SweepAxis::Alpha && m.balor.is_none() {
                        warn!(method = m.kind.name(), "skipped in alpha sweep");
                        continue;
                    }
                    rows.extend(sweep(&dps, b, *axis, grid, m, &opts)?);
                }
                (rows, Vec::new())
            }
        }
    });
    write_results_csv(&dir.join("results.csv"), &rows)?;
    if !records.is_empty() {
        write_jsonl(&dir.join("responses.jsonl"), &records)?;
    }
    for row in &rows {
        println!("{}\t{}\t{}\t{:.4}", row.task, row.method, row.alpha, row.sr);
    }
    Ok(())
}

// ------------------------------------------------------------------ stats

#[derive(Args, Serialize, Deserialize, Default, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct StatsArgs {
    /// Split dataset (`split.jsonl` from bias-split).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `results.csv` from evaluate.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results column grouping the rank test: method (default), task or model-id.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Trend {
    method: String,
    axis: &'static str,
    points: Vec<(f64, f64)>,
    spearman: Option<patchlens::stats::Spearman>,
    isotonic: Vec<f64>,
}

fn frequency_analysis(dps: &[Datapoint], runs: usize, seed: u64, dir: &Path) -> anyhow::Result<()> {
    let rows: Vec<(f64, bool)> = dps
        .iter()
        .filter(|d| d.task == Task::Color && d.subset != Subset::Unsplit)
        .filter_map(|d| d.delta_f.map(|f| (f, d.subset == Subset::Biased)))
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
    let report = repeated_undersampling(&x, &y, runs, seed)
        .context("logistic regression of bias on frequency difference")?;
    std::fs::write(dir.join("logistic.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("stats_table.csv"))?;
    for row in report.table_rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    info!(coef = report.coef_mean, or = report.or_mean, auc = report.auc_mean, "logistic report");
    Ok(())
}

fn results_analysis(rows: &[ResultRow], group_by: &str, dir: &Path) -> anyhow::Result<()> {
    let key = |r: &ResultRow| -> anyhow::Result<String> {
        Ok(match group_by {
            "method" => r.method.clone(),
            "task" => r.task.clone(),
            "model-id" => r.model_id.clone(),
            other => return Err(usage(format!("unknown --group-by {other:?}"))),
        })
    };
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)?).or_default().push(r.sr);
    }
    let names: Vec<&String> = groups.keys().collect();
    match kruskal_wallis(&groups.values().cloned().collect::<Vec<_>>()) {
        Ok(kw) => {
            let doc = serde_json::json!({ "group_by": group_by, "groups": names, "report": kw });
            std::fs::write(dir.join("kruskal.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        }
        Err(e) => warn!(error = %e, "rank test skipped"),
    }

    let mut by_method: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut trends = Vec::new();
    for (method, rs) in by_method {
        let varies = |f: fn(&ResultRow) -> f64| rs.iter().any(|r| f(r) != f(rs[0]));
        let (axis, f): (&'static str, fn(&ResultRow) -> f64) = if varies(|r| r.alpha) {
            ("alpha", |r| r.alpha)
        } else if varies(|r| r.temperature) {
            ("temperature", |r| r.temperature)
        } else {
            continue;
        };
        let mut points: Vec<(f64, f64)> = rs.iter().map(|r| (f(r), r.sr)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        trends.push(Trend {
            method: method.to_string(),
            axis,
            spearman: spearman(&xs, &ys).ok(),
            isotonic: isotonic_pava(&ys, &vec![1.0; ys.len()])?.fitted,
            points,
        });
    }
    if !trends.is_empty() {
        std::fs::write(dir.join("trend.json"), serde_json::to_string_pretty(&trends)? + "\n")?;
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> anyhow::Result<()> {
    let mut r = a.clone();
    r.runs = Some(a.runs.unwrap_or(5));
    r.seed = Some(a.seed.unwrap_or(0));
    r.group_by = Some(a.group_by.clone().unwrap_or_else(|| "method".into()));
    r.out_dir = Some(out_dir(&a.out_dir));
    if r.dataset.is_none() && r.results.is_none() {
        return Err(usage("stats needs --dataset, --results or both"));
    }
    let dir = r.out_dir.clone().unwrap();
    write_snapshot(&dir, "stats", &r, None)?;
    if let Some(p) = &r.dataset {
        frequency_analysis(&load_dataset(p)?, r.runs.unwrap(), r.seed.unwrap(), &dir)?;
    }
    if let Some(p) = &r.results {
        let rows = patchlens::eval::read_results_csv(p)?;
        results_analysis(&rows, r.group_by.as_deref().unwrap(), &dir)?;
    }
    Ok(())
}
