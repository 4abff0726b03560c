//! Per-checkpoint measurements: task metrics on dev and test sets and the
//! wrong-language rate of generated outputs.

use serde::{Deserialize, Serialize};
use xlrs_core::diagnostics::{accidental_translation_rate, evaluate, DiagError, LidModel};
use xlrs_core::model::ModelParams;
use xlrs_core::synthlang::{cast_many, ParallelCorpus, Split, SynthError, TaskInstance, TaskKind, TaskOptions, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// Name of the headline metric of a task.
pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Tag => "accuracy",
        TaskKind::Paircls | TaskKind::Spanx => "f1",
        _ => "rouge_l",
    }
}

/// Dev and test instances of one evaluated language.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub lang: String,
    pub role: Role,
    pub dev: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl EvalSet {
    pub fn split(&self, split: Split) -> &[TaskInstance] {
        match split {
            Split::Dev => &self.dev,
            _ => &self.test,
        }
    }
}

fn leading(
    corpus: &ParallelCorpus,
    split: Split,
    task: TaskKind,
    lang: &str,
    n: usize,
    opts: &TaskOptions,
) -> Result<Vec<TaskInstance>, SynthError> {
    let (mut v, _) = cast_many(corpus, &corpus.indices(split), task, lang, opts)?;
    v.truncate(n);
    Ok(v)
}

/// The first `n` dev and test instances of every source and target.
pub fn eval_sets(
    corpus: &ParallelCorpus,
    task: TaskKind,
    sources: &[String],
    targets: &[String],
    n: usize,
    opts: &TaskOptions,
) -> Result<Vec<EvalSet>, SynthError> {
    let langs = sources
        .iter()
        .map(|l| (l, Role::Source))
        .chain(targets.iter().map(|l| (l, Role::Target)));
    langs
        .map(|(l, role)| {
            Ok(EvalSet {
                lang: l.clone(),
                role,
                dev: leading(corpus, Split::Dev, task, l, n, opts)?,
                test: leading(corpus, Split::Test, task, l, n, opts)?,
            })
        })
        .collect()
}

/// One measured value: a task metric of one checkpoint on one language split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lang: String,
    pub role: Role,
    pub split: Split,
    pub value: f64,
    pub exact_match: Option<f64>,
    /// Fraction of generated outputs not identified as `lang`.
    pub wrong_language: Option<f64>,
    /// Mean LID confidence that an output is in the first source language.
    pub source_confidence: Option<f64>,
}

/// Everything needed to score checkpoints of one fine-tuning run.
pub struct Evaluator<'a> {
    pub vocab: &'a Vocab,
    pub corpus: &'a ParallelCorpus,
    pub lid: &'a LidModel,
    pub task: TaskKind,
    pub first_source: String,
    pub sets: Vec<EvalSet>,
}

impl Evaluator<'_> {
    /// Scores `params` on every set and split. Wrong-language rates are only
    /// reported for generation tasks.
    pub fn measure(&self, params: &ModelParams, step: usize) -> Result<Vec<MetricRow>, DiagError> {
        let mut rows = Vec::new();
        for set in &self.sets {
            for split in [Split::Dev, Split::Test] {
                let inst = set.split(split);
                if inst.is_empty() {
                    continue;
                }
                let e = evaluate(params, self.vocab, &self.corpus.family, inst)?;
                let lid_report = self
                    .task
                    .is_generation()
                    .then(|| accidental_translation_rate(self.lid, &e.predictions, &set.lang, Some(&self.first_source)))
                    .transpose()?;
                rows.push(MetricRow {
                    step,
                    lang: set.lang.clone(),
                    role: set.role,
                    split,
                    value: e.score.value,
                    exact_match: e.score.exact_match,
                    wrong_language: lid_report.as_ref().map(|r| r.rate),
                    source_confidence: lid_report.and_then(|r| r.mean_conf_source),
                });
            }
        }
        Ok(rows)
    }
}

/// Fraction of raw test sentences of `lang` the identifier labels correctly.
pub fn lid_accuracy(lid: &LidModel, corpus: &ParallelCorpus, lang: &str) -> Option<f64> {
    let l = corpus.family.index_of(lang)?;
    let idx = corpus.indices(Split::Test);
    if idx.is_empty() {
        return None;
    }
    let right = idx
        .iter()
        .filter(|&&i| lid.predict(&corpus.renderings[l][i]) == Some(lang))
        .count();
    Some(right as f64 / idx.len() as f64)
}
