//! Toy encoder-decoder transformer in the T5 family.
//!
//! Pre-layer-norm blocks, fixed sinusoidal positions, ReLU feed-forward
//! layers without biases, and one embedding table shared by the encoder
//! input, the decoder input and the output projection. The decoder start
//! token is the pad id. Sequences are taken literally: callers append the
//! end-of-sequence id to inputs and targets.

mod forward;
mod params;
#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::tensor::TensorError;

pub use forward::{
    encode, encode_batch, forward_loss, greedy_generate, greedy_generate_batch, loss_and_grads, mean_pool,
    EncoderStates, Example,
};
pub use params::{init_params, ModelParams, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid transformer config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example has an empty input or target")]
    EmptySequence,
    #[error("every position is masked")]
    AllMasked,
    #[error("encoder layer {layer} requested but the model has {n_layers}")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("parameter {name} expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("flat parameter vector has {got} values, model needs {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
