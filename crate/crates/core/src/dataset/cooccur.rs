//! Sentence-level noun/attribute co-occurrence counting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{DatasetError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Half-width of the token window used when a text has no sentence terminators.
    pub window_tokens: usize,
    pub corpus_id: String,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            window_tokens: 16,
            corpus_id: "corpus".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    /// noun → attribute → number of sentences (or windows) containing both.
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub window_tokens: usize,
    pub corpus_id: String,
}

impl CooccurrenceTable {
    fn merge(mut self, other: CooccurrenceTable) -> Self {
        for (noun, attrs) in other.counts {
            let slot = self.counts.entry(noun).or_default();
            for (a, c) in attrs {
                *slot.entry(a).or_default() += c;
            }
        }
        self
    }

    pub fn get(&self, noun: &str, attribute: &str) -> u64 {
        self.counts
            .get(noun)
            .and_then(|m| m.get(attribute))
            .copied()
            .unwrap_or(0)
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
/// Returns `None` when the text contains no terminator at all.
fn sentences(text: &str) -> Option<Vec<&str>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut found = false;
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') {
            let next = bytes.get(i + 1);
            if next.is_none_or(|c| c.is_ascii_whitespace()) {
                out.push(&text[start..=i]);
                start = i + 1;
                found = true;
            }
        }
    }
    if !found {
        return None;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    Some(out)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn scan_one(
    text: &str,
    nouns: &HashSet<String>,
    attrs: &HashSet<String>,
    window: usize,
) -> BTreeMap<String, BTreeMap<String, u64>> {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut add = |span: &[String]| {
        let ns: BTreeSet<&String> = span.iter().filter(|w| nouns.contains(*w)).collect();
        let as_: BTreeSet<&String> = span.iter().filter(|w| attrs.contains(*w)).collect();
        for n in &ns {
            for a in &as_ {
                *counts
                    .entry((*n).clone())
                    .or_default()
                    .entry((*a).clone())
                    .or_default() += 1;
            }
        }
    };
    match sentences(text) {
        Some(ss) => {
            for s in ss {
                add(&words(s));
            }
        }
        None => {
            let ws = words(text);
            for (i, w) in ws.iter().enumerate() {
                if nouns.contains(w) {
                    let lo = i.saturating_sub(window);
                    let hi = (i + window + 1).min(ws.len());
                    let mut span: Vec<String> = ws[lo..hi]
                        .iter()
                        .filter(|x| !nouns.contains(*x))
                        .cloned()
                        .collect();
                    span.push(w.clone());
                    add(&span);
                }
            }
        }
    }
    counts
}

/// Counts noun/attribute co-occurrences over `texts`. Lexicon entries are
/// matched case-insensitively against whole words.
pub fn scan_corpus<S: AsRef<str> + Sync>(
    texts: &[S],
    nouns: &[String],
    attributes: &[String],
    opts: &ScanOptions,
) -> CooccurrenceTable {
    let nouns: HashSet<String> = nouns.iter().map(|s| s.to_lowercase()).collect();
    let attrs: HashSet<String> = attributes.iter().map(|s| s.to_lowercase()).collect();
    let empty = CooccurrenceTable {
        counts: BTreeMap::new(),
        window_tokens: opts.window_tokens,
        corpus_id: opts.corpus_id.clone(),
    };
    if texts.iter().all(|t| t.as_ref().trim().is_empty()) {
        warn!(corpus = %opts.corpus_id, "empty corpus");
        return empty;
    }
    let table = texts
        .par_iter()
        .map(|t| CooccurrenceTable {
            counts: scan_one(t.as_ref(), &nouns, &attrs, opts.window_tokens),
            ..empty.clone()
        })
        .reduce(|| empty.clone(), CooccurrenceTable::merge);
    info!(corpus = %opts.corpus_id, nouns = table.counts.len(), "corpus scanned");
    table
}

/// Scans every `*.txt` file under `dir` (sorted by name).
pub fn scan_corpus_dir(
    dir: &Path,
    nouns: &[String],
    attributes: &[String],
    opts: &ScanOptions,
) -> Result<CooccurrenceTable> {
    let io = |source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    let texts = paths
        .iter()
        .map(|p| {
            std::fs::read_to_string(p).map_err(|source| DatasetError::Io {
                path: p.display().to_string(),
                source,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scan_corpus(&texts, nouns, attributes, opts))
}

/// Primary and secondary attribute for one noun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDraft {
    pub noun: String,
    pub a_pri: String,
    pub a_sec: String,
    pub f_pri: u64,
    pub f_sec: u64,
    pub delta_f: f64,
}

/// Most and second-most frequent attribute per noun; count ties resolve
/// lexicographically. Nouns seen with fewer than two attributes are dropped.
pub fn assign_attributes(table: &CooccurrenceTable) -> Vec<AttributeDraft> {
    let mut out = Vec::new();
    for (noun, attrs) in &table.counts {
        let mut ranked: Vec<(&String, u64)> = attrs
            .iter()
            .map(|(a, &c)| (a, c))
            .filter(|(_, c)| *c > 0)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if ranked.len() < 2 {
            info!(noun = %noun, "dropped: fewer than two attributes");
            continue;
        }
        let (a_pri, f_pri) = ranked[0];
        let (a_sec, f_sec) = ranked[1];
        out.push(AttributeDraft {
            noun: noun.clone(),
            a_pri: a_pri.clone(),
            a_sec: a_sec.clone(),
            f_pri,
            f_sec,
            delta_f: f_pri as f64 - f_sec as f64,
        });
    }
    out
}
