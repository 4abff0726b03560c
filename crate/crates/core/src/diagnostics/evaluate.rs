use super::{canonicalize, task_metric, DiagError, TaskScore};
use crate::model::{greedy_generate_batch, ModelParams};
use crate::synthlang::{Family, TaskInstance, Vocab, EOS};

const GEN_BATCH: usize = 64;

pub struct Evaluation {
    pub score: TaskScore,
    /// Decoded model outputs, aligned with the instances.
    pub predictions: Vec<String>,
}

/// Greedy outputs for each instance input.
pub fn generate_outputs(
    params: &ModelParams,
    vocab: &Vocab,
    instances: &[TaskInstance],
) -> Result<Vec<String>, DiagError> {
    let inputs: Vec<Vec<usize>> = instances
        .iter()
        .map(|i| {
            let mut ids = vocab.encode(&i.input_text);
            ids.push(EOS);
            ids
        })
        .collect();
    let longest = instances
        .iter()
        .map(|i| vocab.encode(&i.target_text).len())
        .max()
        .unwrap_or(0);
    let max_new = (longest + 2).min(params.config().max_len);
    let mut out = Vec::with_capacity(instances.len());
    for chunk in inputs.chunks(GEN_BATCH) {
        for ids in greedy_generate_batch(params, chunk, max_new)? {
            out.push(vocab.decode(&ids));
        }
    }
    Ok(out)
}

/// Generates for every instance and scores against the instance targets.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocab,
    family: &Family,
    instances: &[TaskInstance],
) -> Result<Evaluation, DiagError> {
    let first = instances.first().ok_or(DiagError::EmptyOutputs)?;
    let task = first.task;
    if instances.iter().any(|i| i.task != task) {
        return Err(DiagError::MixedTasks);
    }
    let predictions = generate_outputs(params, vocab, instances)?;
    let preds: Vec<String> = predictions.iter().map(|p| canonicalize(task, p, family)).collect();
    let golds: Vec<String> = instances
        .iter()
        .map(|i| canonicalize(task, &i.target_text, family))
        .collect();
    Ok(Evaluation {
        score: task_metric(task, &preds, &golds)?,
        predictions,
    })
}
