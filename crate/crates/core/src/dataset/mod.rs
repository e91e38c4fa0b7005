//! Dataset construction: corpus co-occurrence counts, attribute assignment,
//! prompt rendering and the option-swapping bias split.

mod cooccur;
pub mod prompts;
mod split;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineError;

pub use cooccur::{
    assign_attributes, scan_corpus, scan_corpus_dir, AttributeDraft, CooccurrenceTable, ScanOptions,
};
pub use prompts::{render_prompts, RenderedPrompts, PLACEHOLDER};
pub use split::{bias_split, score_choice, ModelChooser, OptionChooser};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("need {needed} few-shot exemplars for {id}, only {available} available")]
    InsufficientExemplars {
        id: String,
        needed: usize,
        available: usize,
    },
    #[error("attribute {0:?} cannot be tokenized")]
    UnencodableAttribute(String),
    #[error("primary and secondary attribute are both {0:?}")]
    SameAttributes(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Color,
    Gender,
    Culture,
    Age,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Color => "color",
            Task::Gender => "gender",
            Task::Culture => "culture",
            Task::Age => "age",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "color" => Ok(Task::Color),
            "gender" => Ok(Task::Gender),
            "culture" => Ok(Task::Culture),
            "age" => Ok(Task::Age),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Biased,
    Nonbiased,
    #[default]
    Unsplit,
}

/// Order in which the two attribute options appear in a target prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionOrder {
    Original,
    Swapped,
}

impl OptionOrder {
    pub const BOTH: [OptionOrder; 2] = [OptionOrder::Original, OptionOrder::Swapped];
}

/// One row of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub id: String,
    pub task: Task,
    /// Relation within a task, e.g. `religion` for culture or `occupation` for gender.
    #[serde(default)]
    pub category: Option<String>,
    pub noun: String,
    pub a_pri: String,
    pub a_sec: String,
    #[serde(default)]
    pub delta_f: Option<f64>,
    pub source_prompt: String,
    pub target_prompt: String,
    pub target_prompt_swapped: String,
    pub contrastive_prompt: String,
    pub contrastive_prompt_swapped: String,
    #[serde(default)]
    pub fewshot_target: Option<String>,
    #[serde(default)]
    pub subset: Subset,
}

impl Datapoint {
    /// Builds a datapoint with its zero-shot prompt set rendered.
    pub fn new(
        task: Task,
        category: Option<String>,
        noun: &str,
        a_pri: &str,
        a_sec: &str,
        delta_f: Option<f64>,
    ) -> Result<Self> {
        if a_pri == a_sec {
            return Err(DatasetError::SameAttributes(a_pri.to_string()));
        }
        let mut dp = Datapoint {
            id: match &category {
                Some(c) => format!("{}/{}/{}", task.name(), c, noun),
                None => format!("{}/{}", task.name(), noun),
            },
            task,
            category,
            noun: noun.to_string(),
            a_pri: a_pri.to_string(),
            a_sec: a_sec.to_string(),
            delta_f,
            source_prompt: String::new(),
            target_prompt: String::new(),
            target_prompt_swapped: String::new(),
            contrastive_prompt: String::new(),
            contrastive_prompt_swapped: String::new(),
            fewshot_target: None,
            subset: Subset::Unsplit,
        };
        let r = prompts::render_zero_shot(&dp);
        dp.source_prompt = r.source;
        dp.target_prompt = r.target;
        dp.target_prompt_swapped = r.target_swapped;
        dp.contrastive_prompt = r.contrastive;
        dp.contrastive_prompt_swapped = r.contrastive_swapped;
        Ok(dp)
    }

    /// Relation word used in templates (`color`, `religion`, `age`, ...).
    pub fn relation(&self) -> &str {
        match (self.task, &self.category) {
            (Task::Culture, Some(c)) => c.as_str(),
            (t, _) => t.name(),
        }
    }

    pub fn target_for(&self, order: OptionOrder) -> &str {
        match order {
            OptionOrder::Original => &self.target_prompt,
            OptionOrder::Swapped => &self.target_prompt_swapped,
        }
    }
}

/// Seed entry for the relational tasks (gender, culture, age).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub task: Task,
    #[serde(default)]
    pub category: Option<String>,
    pub noun: String,
    pub a_pri: String,
    pub a_sec: String,
}

/// Relation entries bundled with the crate.
pub fn builtin_relations() -> Vec<RelationEntry> {
    include_str!("../../data/relations.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled relations are valid"))
        .collect()
}

/// Mini corpus bundled with the crate, one string per file.
pub fn builtin_corpus() -> Vec<&'static str> {
    vec![
        include_str!("../../data/mini_corpus/part1.txt"),
        include_str!("../../data/mini_corpus/part2.txt"),
    ]
}

pub fn builtin_color_lexicon() -> Vec<String> {
    serde_json::from_str(include_str!("../../data/lexicons/colors.json")).expect("bundled lexicon")
}

pub fn builtin_color_nouns() -> Vec<String> {
    serde_json::from_str(include_str!("../../data/lexicons/color_nouns.json"))
        .expect("bundled lexicon")
}

/// Every bundled lexicon word (colors, nouns, countries, religions, pronouns, ages).
pub fn builtin_lexicon_words() -> Vec<String> {
    let files = [
        include_str!("../../data/lexicons/colors.json"),
        include_str!("../../data/lexicons/color_nouns.json"),
        include_str!("../../data/lexicons/countries.json"),
        include_str!("../../data/lexicons/religions.json"),
        include_str!("../../data/lexicons/pronouns.json"),
        include_str!("../../data/lexicons/ages.json"),
    ];
    files
        .iter()
        .flat_map(|f| serde_json::from_str::<Vec<String>>(f).expect("bundled lexicon"))
        .collect()
}

/// Color datapoints from attribute drafts followed by the relation entries,
/// with ids deduplicated in first-seen order.
pub fn build_datapoints(
    drafts: &[AttributeDraft],
    relations: &[RelationEntry],
) -> Result<Vec<Datapoint>> {
    let mut out: Vec<Datapoint> = Vec::with_capacity(drafts.len() + relations.len());
    let mut seen = std::collections::HashSet::new();
    let colors = drafts.iter().map(|d| {
        Datapoint::new(Task::Color, None, &d.noun, &d.a_pri, &d.a_sec, Some(d.delta_f))
    });
    let rels = relations.iter().map(|r| {
        Datapoint::new(r.task, r.category.clone(), &r.noun, &r.a_pri, &r.a_sec, None)
    });
    for dp in colors.chain(rels) {
        let dp = dp?;
        if seen.insert(dp.id.clone()) {
            out.push(dp);
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in rows {
        let line = serde_json::to_string(r).expect("dataset rows serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
