//! Pretraining, fine-tuning and checkpoint persistence.

mod adam;
mod checkpoint;
mod config;
mod data;
mod finetune;
mod pretrain;

use thiserror::Error;

use crate::diagnostics::DiagError;
use crate::model::ModelError;
use crate::synthlang::SynthError;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Provenance, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use data::{encode_instance, mix_sources, span_corrupt, DataMixture, MASK_RATE, MEAN_SPAN_LEN};
pub use finetune::{checkpoint_steps, finetune, mean_loss, resume_finetune, CheckpointEvent, FinetuneRun, XlrsProbe};
pub use pretrain::{denoise_examples, pretrain_span_denoise, PretrainRun};

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub source_langs: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("source {lang} has {have} instances, the mixture needs {need}")]
    InsufficientData { lang: String, have: usize, need: usize },
    #[error("no source languages given")]
    NoSources,
    #[error("train_budget {budget} cannot fill a single batch of {batch_size}")]
    BudgetTooSmall { budget: usize, batch_size: usize },
    #[error("non-finite loss at step {}", .0.step)]
    NonFiniteLoss(LogRow),
    #[error("gradient list has {got} tensors, parameters have {expected}")]
    GradientCount { expected: usize, got: usize },
    #[error("checkpoint is not in XLCK format")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint header is invalid: {0}")]
    BadHeader(String),
    #[error("checkpoint step {step} is past the end of training ({total} steps)")]
    ResumePastEnd { step: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
