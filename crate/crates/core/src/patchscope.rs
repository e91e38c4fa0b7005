//! Hidden-state patching with an identity mapping and a single model.
//!
//! A [`PatchPlan`] pairs a source prompt and noun (whose hidden states at the
//! source layer are read) with a target template whose placeholder is expanded
//! to one filler token per noun token. Running the plan overwrites the target
//! residual stream at the filler positions after the target layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PLACEHOLDER;
use crate::engine::{
    ActivationTrace, EngineError, Hook, ModelBundle, Scalar, TokenizerError, TokenizerMode,
};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("noun {noun:?} not found in source prompt {prompt:?}")]
    NounNotFound { noun: String, prompt: String },
    #[error("noun {noun:?} occurs {count} times in source prompt")]
    AmbiguousNoun { noun: String, count: usize },
    #[error("target template has no {PLACEHOLDER} marker")]
    NoPlaceholder,
    #[error("target template has {0} {PLACEHOLDER} markers, expected one")]
    MultiplePlaceholders(usize),
    #[error("tokenizer defines no filler token")]
    NoFiller,
    #[error("placeholder count {slots} does not match noun token count {noun_tokens}")]
    SpanMismatch { noun_tokens: usize, slots: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl From<TokenizerError> for PatchError {
    fn from(e: TokenizerError) -> Self {
        PatchError::Engine(e.into())
    }
}

pub type Result<T, E = PatchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub prompt: String,
    pub noun: String,
    pub layer: usize,
    pub tokens: Vec<u32>,
    /// Token indices of the noun span within `tokens`.
    pub positions: Vec<usize>,
}

fn find_all(hay: &[u32], needle: &[u32]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| hay[i..i + needle.len()] == *needle)
        .collect()
}

fn check_layer<F: Scalar>(layer: usize, bundle: &ModelBundle<F>) -> Result<()> {
    if layer > bundle.n_layers() {
        return Err(EngineError::LayerOutOfRange {
            layer,
            n_layers: bundle.n_layers(),
        }
        .into());
    }
    Ok(())
}

impl SourceSpec {
    /// Tokenizes `prompt` and locates the in-context token span of `noun`.
    pub fn resolve<F: Scalar>(
        prompt: &str,
        noun: &str,
        layer: usize,
        bundle: &ModelBundle<F>,
    ) -> Result<Self> {
        check_layer(layer, bundle)?;
        let tok = &bundle.tokenizer;
        let tokens = tok.encode_prompt(prompt)?;
        let mut variants = vec![tok.encode(noun)?];
        let cont = tok.encode_continuation(noun)?;
        if cont != variants[0] {
            variants.push(cont);
        }
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for v in &variants {
            for start in find_all(&tokens, v) {
                if !hits.iter().any(|&(s, _)| s == start) {
                    hits.push((start, v.len()));
                }
            }
        }
        match hits.as_slice() {
            [] => Err(PatchError::NounNotFound {
                noun: noun.into(),
                prompt: prompt.into(),
            }),
            [(start, len)] => Ok(Self {
                prompt: prompt.into(),
                noun: noun.into(),
                layer,
                positions: (*start..start + len).collect(),
                tokens,
            }),
            many => Err(PatchError::AmbiguousNoun {
                noun: noun.into(),
                count: many.len(),
            }),
        }
    }

    pub fn noun_tokens(&self) -> Vec<u32> {
        self.positions.iter().map(|&p| self.tokens[p]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub prompt_template: String,
    pub layer: usize,
    pub tokens: Vec<u32>,
    pub placeholder_positions: Vec<usize>,
}

/// Expands the single placeholder in `template` to `count` filler tokens.
pub fn resolve_placeholder<F: Scalar>(
    template: &str,
    count: usize,
    layer: usize,
    bundle: &ModelBundle<F>,
) -> Result<TargetSpec> {
    check_layer(layer, bundle)?;
    let parts: Vec<&str> = template.split(PLACEHOLDER).collect();
    let (prefix, suffix) = match parts.as_slice() {
        [_] => return Err(PatchError::NoPlaceholder),
        [p, s] => (*p, *s),
        _ => return Err(PatchError::MultiplePlaceholders(parts.len() - 1)),
    };
    let tok = &bundle.tokenizer;
    let filler = tok.specials().filler.ok_or(PatchError::NoFiller)?;
    // In byte-level BPE the space before the slot belongs to the noun's first token.
    let prefix = match tok.mode() {
        TokenizerMode::Bpe => prefix.trim_end(),
        TokenizerMode::Word => prefix,
    };
    let mut tokens = tok.encode_prompt(prefix)?;
    let start = tokens.len();
    tokens.extend(std::iter::repeat_n(filler, count));
    tokens.extend(tok.encode(suffix)?);
    Ok(TargetSpec {
        prompt_template: template.into(),
        layer,
        tokens,
        placeholder_positions: (start..start + count).collect(),
    })
}

/// Source and target of one intervention; the mapping is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub source: SourceSpec,
    pub target: TargetSpec,
}

impl PatchPlan {
    pub fn new<F: Scalar>(
        source_prompt: &str,
        noun: &str,
        target_template: &str,
        source_layer: usize,
        target_layer: usize,
        bundle: &ModelBundle<F>,
    ) -> Result<Self> {
        let source = SourceSpec::resolve(source_prompt, noun, source_layer, bundle)?;
        let target = resolve_placeholder(
            target_template,
            source.positions.len(),
            target_layer,
            bundle,
        )?;
        Ok(Self { source, target })
    }

    pub fn validate(&self) -> Result<()> {
        let (s, t) = (
            self.source.positions.len(),
            self.target.placeholder_positions.len(),
        );
        if s != t {
            return Err(PatchError::SpanMismatch {
                noun_tokens: s,
                slots: t,
            });
        }
        Ok(())
    }

    /// Overwrite hook injecting `vectors` at the placeholder positions.
    pub fn hook<F: Scalar>(&self, vectors: Vec<Vec<F>>) -> Hook<F> {
        Hook::overwrite(
            self.target.layer,
            self.target.placeholder_positions.clone(),
            vectors,
        )
    }
}

/// `hidden[layer][i]` of the source run for every noun position, in order.
pub fn extract_hidden<F: Scalar>(
    source: &SourceSpec,
    bundle: &ModelBundle<F>,
) -> Result<Vec<Vec<F>>> {
    let h = bundle.hidden_states(&source.tokens, source.layer, &[])?;
    source
        .positions
        .iter()
        .map(|&p| {
            if p >= h.rows() {
                Err(EngineError::PositionOutOfRange {
                    position: p,
                    len: h.rows(),
                }
                .into())
            } else {
                Ok(h.row(p).to_vec())
            }
        })
        .collect()
}

/// Target forward pass with the extracted source vectors injected.
pub fn run_patched<F: Scalar>(
    plan: &PatchPlan,
    bundle: &ModelBundle<F>,
    extra_hooks: &[Hook<F>],
) -> Result<ActivationTrace<F>> {
    plan.validate()?;
    let vectors = extract_hidden(&plan.source, bundle)?;
    let mut hooks = vec![plan.hook(vectors)];
    hooks.extend_from_slice(extra_hooks);
    Ok(bundle.forward(&plan.target.tokens, &hooks)?)
}
