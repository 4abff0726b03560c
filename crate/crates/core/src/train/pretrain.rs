use rand::seq::SliceRandom;

use super::data::span_corrupt;
use super::{adam_step, LogRow, OptimizerState, TrainConfig, TrainError};
use crate::model::{loss_and_grads, Example, ModelParams};
use crate::seeding::{derive_seed, rng_for, STREAM_DROPOUT, STREAM_PRETRAIN, STREAM_SHUFFLE};
use crate::synthlang::{ParallelCorpus, Split, Vocab, EOS};

#[derive(Debug)]
pub struct PretrainRun {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRow>,
}

fn sentence_ids(vocab: &Vocab, corpus: &ParallelCorpus, split: Split) -> Vec<Vec<usize>> {
    let idx = corpus.indices(split);
    corpus
        .renderings
        .iter()
        .flat_map(|r| idx.iter().map(|&i| vocab.encode(&r[i])))
        .collect()
}

fn corrupted(ids: &[usize], rng: &mut impl rand::Rng) -> Example {
    let (mut input, mut target) = span_corrupt(ids, rng);
    input.push(EOS);
    target.push(EOS);
    Example { input, target }
}

/// Span-corrupted copies of every sentence of `split` in every language,
/// with masks fixed by `seed`.
pub fn denoise_examples(vocab: &Vocab, corpus: &ParallelCorpus, split: Split, seed: u64) -> Vec<Example> {
    let mut rng = rng_for(seed, STREAM_PRETRAIN, u64::MAX);
    sentence_ids(vocab, corpus, split)
        .iter()
        .map(|ids| corrupted(ids, &mut rng))
        .collect()
}

/// Multilingual span-denoising over the train split of every language.
///
/// Runs `epochs` passes with fresh masks each pass, stopping early once
/// `train_budget` instances have been consumed.
pub fn pretrain_span_denoise(
    mut params: ModelParams,
    corpus: &ParallelCorpus,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<PretrainRun, TrainError> {
    cfg.validate()?;
    if cfg.train_budget < cfg.batch_size {
        return Err(TrainError::BudgetTooSmall {
            budget: cfg.train_budget,
            batch_size: cfg.batch_size,
        });
    }
    let pool = sentence_ids(vocab, corpus, Split::Train);
    let root = derive_seed(cfg.seed, STREAM_PRETRAIN, 0);
    let total = cfg.train_budget.min(cfg.epochs * pool.len());
    let n_steps = total / cfg.batch_size;
    let langs = corpus.family.lang_ids();
    let mut optimizer = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(n_steps);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = rng_for(root, STREAM_SHUFFLE, epoch as u64);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == n_steps {
                break 'epochs;
            }
            let batch: Vec<Example> = chunk.iter().map(|&i| corrupted(&pool[i], &mut rng)).collect();
            step += 1;
            let (loss, grads) = loss_and_grads(&params, &batch, Some(derive_seed(root, STREAM_DROPOUT, step as u64)))?;
            let row = LogRow {
                step,
                loss,
                lr: cfg.learning_rate,
                source_langs: langs.clone(),
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(row));
            }
            log.push(row);
            adam_step(&mut params, &grads, &mut optimizer, cfg.learning_rate)?;
        }
    }
    Ok(PretrainRun { params, optimizer, log })
}
