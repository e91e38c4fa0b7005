//! Hidden-representation patching, contrastive logit recalibration and bias
//! analysis on small decoder-only transformers.

pub mod balor;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod layer_select;
pub mod patchscope;
pub mod stats;
