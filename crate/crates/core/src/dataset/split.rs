//! Forced-decoding choice scores and the option-swapping bias split.

use rayon::prelude::*;

use super::prompts::{bias_probe_prompt, options};
use super::{Datapoint, DatasetError, OptionOrder, Result, Subset};
use crate::engine::tensor::log_softmax;
use crate::engine::{ModelBundle, Scalar};

/// Summed log-probability of `attribute`'s tokens force-decoded after `context`.
pub fn score_choice<F: Scalar>(
    context: &[u32],
    attribute: &str,
    bundle: &ModelBundle<F>,
) -> Result<f64> {
    let ids = bundle
        .tokenizer
        .encode_continuation(attribute)
        .map_err(|_| DatasetError::UnencodableAttribute(attribute.to_string()))?;
    if ids.is_empty() {
        return Err(DatasetError::UnencodableAttribute(attribute.to_string()));
    }
    let mut seq = context.to_vec();
    let mut total = 0.0;
    for &id in &ids {
        let logits: Vec<f64> = bundle
            .next_token_logits(&seq, &[])?
            .iter()
            .map(|v| v.f64())
            .collect();
        total += log_softmax(&logits)[id as usize];
        seq.push(id);
    }
    Ok(total)
}

/// Decides which of the two attributes a model picks for a datapoint.
pub trait OptionChooser: Sync {
    /// `true` when the primary attribute is chosen under `order`.
    fn prefers_primary(&self, dp: &Datapoint, order: OptionOrder) -> Result<bool>;
}

/// Chooses by comparing [`score_choice`] of both attributes on the unpatched
/// probe prompt. An exact tie goes to the first-listed option.
pub struct ModelChooser<'a, F> {
    pub bundle: &'a ModelBundle<F>,
}

impl<F: Scalar> OptionChooser for ModelChooser<'_, F> {
    fn prefers_primary(&self, dp: &Datapoint, order: OptionOrder) -> Result<bool> {
        let ctx = self.bundle.encode_prompt(&bias_probe_prompt(dp, order))?;
        let pri = score_choice(&ctx, &dp.a_pri, self.bundle)?;
        let sec = score_choice(&ctx, &dp.a_sec, self.bundle)?;
        if pri == sec {
            return Ok(options(dp, order).0 == dp.a_pri);
        }
        Ok(pri > sec)
    }
}

/// Marks a datapoint biased iff the primary attribute wins under both option
/// orders. Returns `(biased, nonbiased)`, each with `subset` set.
pub fn bias_split(
    datapoints: &[Datapoint],
    chooser: &dyn OptionChooser,
) -> Result<(Vec<Datapoint>, Vec<Datapoint>)> {
    let flags = datapoints
        .par_iter()
        .map(|dp| {
            Ok(chooser.prefers_primary(dp, OptionOrder::Original)?
                && chooser.prefers_primary(dp, OptionOrder::Swapped)?)
        })
        .collect::<Result<Vec<bool>>>()?;
    let (mut biased, mut nonbiased) = (Vec::new(), Vec::new());
    for (dp, b) in datapoints.iter().zip(flags) {
        let mut dp = dp.clone();
        if b {
            dp.subset = Subset::Biased;
            biased.push(dp);
        } else {
            dp.subset = Subset::Nonbiased;
            nonbiased.push(dp);
        }
    }
    Ok((biased, nonbiased))
}
