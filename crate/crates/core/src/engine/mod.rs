//! Decoder-only transformer engine: tensors, tokenizer, forward pass with
//! hooks, hidden-state gradients, toy models and the FPTL weight format.

pub mod fptl;
mod grad;
mod model;
pub mod tensor;
pub mod tokenizer;
pub mod toy;

pub use grad::{HiddenGradient, Readout};
pub use model::{
    gelu, gelu_grad, ActivationTrace, Block, EngineError, Hook, HookAction, LayerNorm, Linear,
    ModelBundle, ModelConfig, Result,
};
pub use tensor::{Matrix, Scalar};
pub use tokenizer::{Specials, Tokenizer, TokenizerError, TokenizerMode};
pub use toy::{make_toy_model, BiasRig, ToyOptions};
