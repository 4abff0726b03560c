//! Measurements: representation similarity, label overlap, task metrics,
//! rank correlation and language identification.

mod evaluate;
mod lid;
mod metrics;
mod overlap;
mod report;
mod similarity;
mod spearman;

use thiserror::Error;

use crate::model::ModelError;
use crate::synthlang::SynthError;

pub use evaluate::{evaluate, generate_outputs, Evaluation};
pub use lid::{accidental_translation_rate, train_lid, LidModel, TranslationReport};
pub use metrics::{canonicalize, lcs_len, rouge_l, task_metric, token_f1, TaskScore};
pub use overlap::{label_overlap, overlap_report, OverlapReport};
pub use report::{markdown_table, write_csv, xlrs_csv};
pub use similarity::{cosine, sample_probes, xlrs, xlrs_many, ProbeSet, XLRSRecord, DEFAULT_PROBES};
pub use spearman::{pearson, ranks, spearman_rho, CorrelationResult, DEFAULT_PERMUTATIONS};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("aligned inputs differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("rank correlation is undefined for a constant series")]
    ConstantSeries,
    #[error("no outputs to score")]
    EmptyOutputs,
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("no usable probe pairs")]
    NoPairs,
    #[error("language {lang} has {got} training sentences, need at least {min}")]
    TooFewSentences { lang: String, got: usize, min: usize },
    #[error("mixed tasks in one overlap computation")]
    MixedTasks,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
