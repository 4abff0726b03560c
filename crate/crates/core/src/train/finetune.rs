use rand::seq::SliceRandom;

use super::{
    adam_step, encode_instance, Checkpoint, DataMixture, LogRow, OptimizerState, Provenance, RngState, TrainConfig,
    TrainError,
};
use crate::diagnostics::{xlrs_many, ProbeSet, XLRSRecord};
use crate::model::{forward_loss, loss_and_grads, Example, ModelParams};
use crate::seeding::{derive_seed, rng_for, STREAM_DROPOUT, STREAM_SHUFFLE};
use crate::synthlang::{ParallelCorpus, Vocab};

/// Fixed probe sentences on which XLRS is logged at every checkpoint.
pub struct XlrsProbe<'a> {
    pub corpus: &'a ParallelCorpus,
    pub source: String,
    pub targets: Vec<String>,
    pub probes: ProbeSet,
}

#[derive(Debug)]
/// What a fine-tuning run reports at each checkpoint.
pub struct CheckpointEvent<'a> {
    pub checkpoint: &'a Checkpoint,
    /// XLRS measured on this checkpoint, empty without a probe.
    pub xlrs: &'a [XLRSRecord],
    /// Log rows since the previous event.
    pub log: &'a [LogRow],
}

pub struct FinetuneRun {
    pub xlrs: Vec<XLRSRecord>,
    pub log: Vec<LogRow>,
    pub final_checkpoint: Checkpoint,
    pub total_steps: usize,
}

/// Token-weighted mean loss over `examples`, evaluated in chunks.
pub fn mean_loss(params: &ModelParams, examples: &[Example], chunk: usize) -> Result<f64, TrainError> {
    let (mut sum, mut tokens) = (0.0, 0usize);
    for c in examples.chunks(chunk.max(1)) {
        let n: usize = c.iter().map(|e| e.target.len()).sum();
        sum += forward_loss(params, c)? * n as f64;
        tokens += n;
    }
    Ok(sum / tokens.max(1) as f64)
}

fn is_checkpoint(step: usize, per_epoch: usize, every: usize) -> bool {
    step.is_multiple_of(every) || step.is_multiple_of(per_epoch)
}

/// Steps at which a fresh run of `total` steps emits checkpoints.
pub fn checkpoint_steps(total: usize, per_epoch: usize, every: usize) -> Vec<usize> {
    (0..=total)
        .filter(|&s| s == 0 || is_checkpoint(s, per_epoch, every))
        .collect()
}

/// Cross-entropy fine-tuning over a mixture.
///
/// A checkpoint is emitted at step 0, every `checkpoint_every` steps and at
/// each epoch end; `on_checkpoint` sees each one together with its XLRS
/// records and the log rows since the previous one. The data order of epoch
/// `e` and the dropout masks of step `s` depend only on `(seed, e)` and
/// `(seed, s)`, so [`resume_finetune`] continues a run exactly.
pub fn finetune<F>(
    params: ModelParams,
    mix: &DataMixture,
    vocab: &Vocab,
    cfg: &TrainConfig,
    provenance: Provenance,
    probe: Option<&XlrsProbe>,
    on_checkpoint: F,
) -> Result<FinetuneRun, TrainError>
where
    F: FnMut(&CheckpointEvent) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let optimizer = OptimizerState::new(&params);
    let start = Checkpoint {
        train_config: cfg.clone(),
        step: 0,
        params,
        optimizer,
        rng: RngState {
            seed: cfg.seed,
            epoch: 0,
            step: 0,
        },
        provenance,
    };
    run(start, mix, vocab, probe, true, on_checkpoint)
}

/// Continues training from `ck` with its stored config.
pub fn resume_finetune<F>(
    ck: Checkpoint,
    mix: &DataMixture,
    vocab: &Vocab,
    probe: Option<&XlrsProbe>,
    on_checkpoint: F,
) -> Result<FinetuneRun, TrainError>
where
    F: FnMut(&CheckpointEvent) -> Result<(), TrainError>,
{
    ck.train_config.validate()?;
    run(ck, mix, vocab, probe, false, on_checkpoint)
}

fn run<F>(
    mut ck: Checkpoint,
    mix: &DataMixture,
    vocab: &Vocab,
    probe: Option<&XlrsProbe>,
    fresh: bool,
    mut on_checkpoint: F,
) -> Result<FinetuneRun, TrainError>
where
    F: FnMut(&CheckpointEvent) -> Result<(), TrainError>,
{
    if mix.is_empty() {
        return Err(TrainError::NoSources);
    }
    let cfg = ck.train_config.clone();
    let examples: Vec<Example> = mix.instances.iter().map(|i| encode_instance(vocab, i)).collect();
    let per_epoch = cfg.steps_per_epoch(examples.len());
    let total = cfg.epochs * per_epoch;
    if ck.step > total {
        return Err(TrainError::ResumePastEnd { step: ck.step, total });
    }
    let mut xlrs = Vec::new();
    let mut log = Vec::new();
    let mut emitted = 0;
    let mut emit = |ck: &Checkpoint, xlrs: &mut Vec<XLRSRecord>, log: &[LogRow]| -> Result<(), TrainError> {
        let first = xlrs.len();
        if let Some(p) = probe {
            xlrs.extend(xlrs_many(
                &ck.params, vocab, p.corpus, &p.source, &p.targets, &p.probes, ck.step,
            )?);
        }
        on_checkpoint(&CheckpointEvent {
            checkpoint: ck,
            xlrs: &xlrs[first..],
            log: &log[emitted..],
        })?;
        emitted = log.len();
        Ok(())
    };
    if fresh {
        emit(&ck, &mut xlrs, &log)?;
    }
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    while ck.step < total {
        let epoch = ck.step / per_epoch;
        let b = ck.step % per_epoch;
        if order_epoch != epoch {
            order = (0..examples.len()).collect();
            order.shuffle(&mut rng_for(cfg.seed, STREAM_SHUFFLE, epoch as u64));
            order_epoch = epoch;
        }
        let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let step = ck.step + 1;
        let (loss, grads) = loss_and_grads(
            &ck.params,
            &batch,
            Some(derive_seed(cfg.seed, STREAM_DROPOUT, step as u64)),
        )?;
        let row = LogRow {
            step,
            loss,
            lr: cfg.learning_rate,
            source_langs: mix.sources.clone(),
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(row));
        }
        log.push(row);
        adam_step(&mut ck.params, &grads, &mut ck.optimizer, cfg.learning_rate)?;
        ck.step = step;
        ck.rng = RngState {
            seed: cfg.seed,
            epoch: step / per_epoch,
            step,
        };
        if is_checkpoint(step, per_epoch, cfg.checkpoint_every) {
            emit(&ck, &mut xlrs, &log)?;
        }
    }
    Ok(FinetuneRun {
        xlrs,
        log,
        final_checkpoint: ck,
        total_steps: total,
    })
}
