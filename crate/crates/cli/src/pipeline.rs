//! Stage execution. Every stage reads its inputs from, and writes its
//! outputs under, the experiment's output directory:
//!
//! ```text
//! config.json                       normalized configuration
//! manifest.json                     stage status, artifact hashes, data access
//! corpus/{corpus,vocab}.json        gen-corpus
//! pretrain/{pretrained.xlck,log.jsonl}
//! finetune/<run>/step_NNNNNN.xlck   one per checkpoint, with log.jsonl,
//!                                   xlrs.jsonl and xlrs.csv
//! diagnose/<run>/step_NNNNNN.json   metrics per checkpoint, plus metrics.csv
//! diagnose/{lid,overlap}.json
//! select/{selection,correlation}.csv
//! report/                           see [`crate::report`]
//! ```
//!
//! Seeds: the family, corpus, initialization, pretraining and task casting
//! use the root seed (each consumer derives its own stream from it); the
//! fine-tuning run of replicate `r` uses `derive_seed(root, FINETUNE, r)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xlrs_core::diagnostics::{
    overlap_report, sample_probes, spearman_rho, train_lid, xlrs_csv, CorrelationResult, DiagError, XLRSRecord,
};
use xlrs_core::model::{init_params, ModelError};
use xlrs_core::selection::{compare_strategies, CheckpointSeries, SelectionError, StrategyKind};
use xlrs_core::synthlang::{
    build_vocab, cast_many, generate_parallel_corpus, make_family, ParallelCorpus, Split, SynthError, TaskKind,
    TaskOptions, Vocab,
};
use xlrs_core::train::{
    finetune, load_checkpoint, mix_sources, pretrain_span_denoise, resume_finetune, Checkpoint, CheckpointEvent,
    LogRow, Provenance, RngState, TrainError, XlrsProbe,
};

use crate::config::ExperimentConfig;
use crate::manifest::{
    io_error, sha256_hex, write_atomic, write_atomic_io, DataAccess, ExperimentManifest, ManifestError, Stage,
    StageStatus,
};
use crate::measure::{eval_sets, lid_accuracy, metric_name, Evaluator, MetricRow};

pub const CONFIG_FILE: &str = "config.json";
pub const CORPUS_FILE: &str = "corpus/corpus.json";
pub const VOCAB_FILE: &str = "corpus/vocab.json";
pub const PRETRAINED_FILE: &str = "pretrain/pretrained.xlck";
pub const PRETRAIN_LOG: &str = "pretrain/log.jsonl";
pub const LID_FILE: &str = "diagnose/lid.json";
pub const OVERLAP_FILE: &str = "diagnose/overlap.json";
pub const SELECTION_FILE: &str = "select/selection.csv";
pub const CORRELATION_FILE: &str = "select/correlation.csv";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("output directory {0} holds a different experiment; use a fresh directory")]
    ConfigMismatch(PathBuf),
    #[error("stage {0} has not completed")]
    MissingStage(Stage),
    #[error("cannot reuse stages from {dir}: {reason}")]
    Reuse { dir: PathBuf, reason: String },
    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

impl PipelineError {
    /// Errors caused by how the experiment was invoked rather than by a stage.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::ConfigMismatch(_) | PipelineError::Reuse { .. })
    }
}

/// One fine-tuning run of the experiment grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: TaskKind,
    pub sources: Vec<String>,
    pub seed: u64,
}

impl RunSpec {
    pub fn id(&self) -> String {
        format!("{}.{}.s{}", self.task, self.sources.join("+"), self.seed)
    }

    pub fn first_source(&self) -> &str {
        &self.sources[0]
    }
}

/// Tasks × source sets × replicate seeds, in that nesting order.
pub fn run_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let g = &cfg.experiment;
    let mut out = Vec::new();
    for &task in &g.tasks {
        for sources in &g.source_sets {
            for &seed in &g.seeds {
                out.push(RunSpec {
                    task,
                    sources: sources.clone(),
                    seed,
                });
            }
        }
    }
    out
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn run_dir(stage: &str, run: &str) -> String {
    format!("{stage}/{run}")
}

pub fn checkpoint_file(run: &str, step: usize) -> String {
    format!("finetune/{run}/step_{step:06}.xlck")
}

pub fn metrics_file(run: &str, step: usize) -> String {
    format!("diagnose/{run}/step_{step:06}.json")
}

fn json_lines<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

fn artifact_error(path: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Artifact {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    serde_json::from_slice(&bytes).map_err(|e| artifact_error(path, e))
}

/// Reads a JSON-lines file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| artifact_error(path, e)))
        .collect()
}

fn append(path: &Path, text: &str) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())
}

/// Steps of the checkpoints saved for `run`, ascending.
pub fn saved_steps(out: &Path, run: &str) -> Result<Vec<usize>, PipelineError> {
    let dir = out.join(run_dir("finetune", run));
    let mut steps = Vec::new();
    let entries = match std::fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(steps),
        Err(e) => return Err(io_error(&dir)(e).into()),
    };
    for entry in entries {
        let name = entry.map_err(io_error(&dir))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".xlck")) {
            if let Ok(step) = n.parse() {
                steps.push(step);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

pub fn load_xlrs(out: &Path, run: &str) -> Result<Vec<XLRSRecord>, PipelineError> {
    read_jsonl(&out.join(run_dir("finetune", run)).join("xlrs.jsonl"))
}

pub fn load_metrics(out: &Path, run: &str) -> Result<Vec<MetricRow>, PipelineError> {
    let mut rows = Vec::new();
    for step in saved_steps(out, run)? {
        let rs: Vec<MetricRow> = read_json(&out.join(metrics_file(run, step)))?;
        rows.extend(rs);
    }
    Ok(rows)
}

/// One strategy's choice for one run and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub run: String,
    pub task: TaskKind,
    pub sources: String,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub target: String,
    pub step: usize,
    pub criterion: f64,
    pub metric: f64,
    pub delta_vs_oracle: f64,
}

/// Spearman correlation between XLRS and the target test metric across the
/// checkpoints of one run. `target` is `mean` for target-averaged series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub run: String,
    pub task: TaskKind,
    pub sources: String,
    pub seed: u64,
    pub target: String,
    pub n: usize,
    /// Empty when either series is constant.
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| artifact_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| artifact_error(path, e)))
        .collect()
}

/// Per-checkpoint inputs to selection and correlation for one run; step 0
/// (the pretrained model) is excluded.
pub struct RunSeries {
    pub series: CheckpointSeries,
    pub target_dev: BTreeMap<String, Vec<f64>>,
    pub target_test: BTreeMap<String, Vec<f64>>,
}

pub fn run_series(out: &Path, spec: &RunSpec, targets: &[String]) -> Result<RunSeries, PipelineError> {
    let metrics = load_metrics(out, &spec.id())?;
    let xlrs = load_xlrs(out, &spec.id())?;
    let steps: Vec<usize> = saved_steps(out, &spec.id())?.into_iter().filter(|&s| s > 0).collect();
    let missing = |what: String| PipelineError::Artifact {
        path: run_dir("diagnose", &spec.id()),
        message: format!("no {what}"),
    };
    let metric = |step: usize, lang: &str, split: Split| {
        metrics
            .iter()
            .find(|r| r.step == step && r.lang == lang && r.split == split)
            .map(|r| r.value)
            .ok_or_else(|| missing(format!("{split:?} metric for {lang} at step {step}")))
    };
    let series_of = |lang: &str, split: Split| {
        steps
            .iter()
            .map(|&s| metric(s, lang, split))
            .collect::<Result<Vec<f64>, _>>()
    };
    let mut xl = BTreeMap::new();
    let mut target_dev = BTreeMap::new();
    let mut target_test = BTreeMap::new();
    for t in targets {
        let v = steps
            .iter()
            .map(|&s| {
                xlrs.iter()
                    .find(|r| r.step == s && &r.target_lang == t)
                    .map(|r| r.value)
                    .ok_or_else(|| missing(format!("XLRS for {t} at step {s}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        xl.insert(t.clone(), v);
        target_dev.insert(t.clone(), series_of(t, Split::Dev)?);
        target_test.insert(t.clone(), series_of(t, Split::Test)?);
    }
    Ok(RunSeries {
        series: CheckpointSeries {
            source_dev: series_of(spec.first_source(), Split::Dev)?,
            steps,
            xlrs: xl,
        },
        target_dev,
        target_test,
    })
}

/// Spearman ρ, or `None` when a series is constant.
pub fn correlation(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<Option<CorrelationResult>, DiagError> {
    match spearman_rho(x, y, n_perm, seed) {
        Ok(c) => Ok(Some(c)),
        Err(DiagError::ConstantSeries) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Element-wise mean of equal-length series.
pub fn mean_series<'a>(series: impl IntoIterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let all: Vec<&Vec<f64>> = series.into_iter().collect();
    let n = all.first().map_or(0, |s| s.len());
    (0..n)
        .map(|i| all.iter().map(|s| s[i]).sum::<f64>() / all.len() as f64)
        .collect()
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: ExperimentManifest,
    resume: bool,
}

impl Experiment {
    /// Opens `out`, creating a manifest on first use. An existing manifest
    /// must describe the same normalized configuration.
    pub fn open(
        cfg: ExperimentConfig,
        config_path: Option<&Path>,
        out: &Path,
        resume: bool,
    ) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(out).map_err(io_error(out))?;
        let hash = config_hash(&cfg);
        let manifest = match ExperimentManifest::load(out)? {
            Some(m) if m.config_sha256 != hash => return Err(PipelineError::ConfigMismatch(out.to_path_buf())),
            Some(m) => m,
            None => {
                let json = serde_json::to_vec_pretty(&cfg).expect("config serializes");
                write_atomic(&out.join(CONFIG_FILE), &json)?;
                let m = ExperimentManifest::new(config_path, hash, cfg.seed, out);
                m.save(out)?;
                m
            }
        };
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            manifest,
            resume,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Runs one stage unless it is already done. A failure marks the stage
    /// failed and leaves earlier artifacts untouched.
    pub fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        if self.manifest.is_done(stage) {
            return Ok(());
        }
        if let Some(&missing) = stage.prerequisites().iter().find(|s| !self.manifest.is_done(**s)) {
            return Err(PipelineError::MissingStage(missing));
        }
        self.manifest.record_mut(stage).status = StageStatus::Running;
        self.manifest.save(&self.out)?;
        let result = match stage {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::Pretrain => self.pretrain(),
            Stage::Finetune => self.finetune(),
            Stage::Diagnose => self.diagnose(),
            Stage::Select => self.select(),
            Stage::Report => self.report(),
        };
        if let Err(e) = &result {
            self.manifest.record_mut(stage).status = StageStatus::Failed { message: e.to_string() };
            self.manifest.save(&self.out)?;
        }
        result
    }

    pub fn run_all(&mut self) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Adopts the completed gen-corpus and pretrain stages of another
    /// experiment with the same seed, family, corpus, model and pretraining
    /// settings, copying their artifacts.
    pub fn reuse_upstream(&mut self, from: &Path) -> Result<(), PipelineError> {
        let reuse = |reason: String| PipelineError::Reuse {
            dir: from.to_path_buf(),
            reason,
        };
        let other: ExperimentConfig = read_json(&from.join(CONFIG_FILE)).map_err(|e| reuse(e.to_string()))?;
        let c = &self.cfg;
        if (other.seed, &other.family, &other.corpus, &other.model, &other.pretrain)
            != (c.seed, &c.family, &c.corpus, &c.model, &c.pretrain)
        {
            return Err(reuse(
                "seed, family, corpus, model or pretraining settings differ".into(),
            ));
        }
        let m = ExperimentManifest::load(from)?.ok_or_else(|| reuse("no manifest".into()))?;
        for stage in [Stage::GenCorpus, Stage::Pretrain] {
            if self.manifest.is_done(stage) {
                continue;
            }
            if !m.is_done(stage) {
                return Err(reuse(format!("stage {stage} is not complete there")));
            }
            let rec = m.record(stage).clone();
            for a in &rec.artifacts {
                let dst = self.path(&a.path);
                let bytes = std::fs::read(from.join(&a.path)).map_err(io_error(&dst))?;
                if sha256_hex(&bytes) != a.sha256 {
                    return Err(reuse(format!("{} does not match its recorded hash", a.path)));
                }
                write_atomic(&dst, &bytes)?;
            }
            for d in m.data_access.iter().filter(|d| d.stage == stage) {
                self.manifest.declare(d.clone());
            }
            *self.manifest.record_mut(stage) = rec;
        }
        self.manifest.save(&self.out)?;
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<(ParallelCorpus, Vocab), PipelineError> {
        Ok((read_json(&self.path(CORPUS_FILE))?, read_json(&self.path(VOCAB_FILE))?))
    }

    fn gen_corpus(&mut self) -> Result<(), PipelineError> {
        let c = &self.cfg;
        let family = make_family(c.seed, c.family.concept_vocab, &c.family.languages)?;
        let corpus = generate_parallel_corpus(&family, c.corpus.n_sentences, c.seed)?;
        let vocab = build_vocab(&corpus);
        write_atomic(
            &self.path(CORPUS_FILE),
            &serde_json::to_vec(&corpus).expect("corpus serializes"),
        )?;
        write_atomic(
            &self.path(VOCAB_FILE),
            &serde_json::to_vec(&vocab).expect("vocab serializes"),
        )?;
        self.manifest
            .complete(&self.out, Stage::GenCorpus, &[CORPUS_FILE.into(), VOCAB_FILE.into()])?;
        Ok(())
    }

    fn pretrain(&mut self) -> Result<(), PipelineError> {
        let (corpus, vocab) = self.load_corpus()?;
        let langs = corpus.family.lang_ids();
        self.manifest.declare(DataAccess {
            stage: Stage::Pretrain,
            split: Split::Train,
            langs: langs.clone(),
            labels: false,
            purpose: "span denoising".into(),
        });
        let tc = self.cfg.pretrain_train_config();
        let params = init_params(&self.cfg.model.transformer(vocab.len()), self.cfg.seed)?;
        let run = pretrain_span_denoise(params, &corpus, &vocab, &tc)?;
        let step = run.log.len();
        let pool = corpus.indices(Split::Train).len() * langs.len();
        let ck = Checkpoint {
            train_config: tc.clone(),
            step,
            params: run.params,
            optimizer: run.optimizer,
            rng: RngState {
                seed: tc.seed,
                epoch: step * tc.batch_size / pool.max(1),
                step,
            },
            provenance: Provenance {
                stage: Stage::Pretrain.to_string(),
                task: None,
                source_langs: langs,
            },
        };
        write_atomic(&self.path(PRETRAIN_LOG), json_lines(&run.log).as_bytes())?;
        write_atomic(&self.path(PRETRAINED_FILE), &ck.to_bytes())?;
        self.manifest.complete(
            &self.out,
            Stage::Pretrain,
            &[PRETRAINED_FILE.into(), PRETRAIN_LOG.into()],
        )?;
        Ok(())
    }

    fn task_options(&self) -> TaskOptions {
        TaskOptions {
            summary_len: self.cfg.experiment.summary_len,
            seed: self.cfg.seed,
        }
    }

    fn finetune(&mut self) -> Result<(), PipelineError> {
        let (corpus, vocab) = self.load_corpus()?;
        let pretrained = load_checkpoint(&self.path(PRETRAINED_FILE))?;
        let targets = self.cfg.experiment.targets.clone();
        let mut probe_langs = vec![];
        let specs = run_specs(&self.cfg);
        for spec in &specs {
            self.manifest.declare(DataAccess {
                stage: Stage::Finetune,
                split: Split::Train,
                langs: spec.sources.clone(),
                labels: true,
                purpose: format!("{} fine-tuning", spec.task),
            });
            if !probe_langs.contains(&spec.sources[0]) {
                probe_langs.push(spec.sources[0].clone());
            }
        }
        probe_langs.extend(targets.iter().cloned());
        self.manifest.declare(DataAccess {
            stage: Stage::Finetune,
            split: Split::Test,
            langs: probe_langs,
            labels: false,
            purpose: "XLRS probe sentences".into(),
        });
        self.manifest.save(&self.out)?;

        let probes = sample_probes(&corpus, self.cfg.diagnostics.xlrs_sample, self.cfg.seed);
        let train_idx = corpus.indices(Split::Train);
        for spec in &specs {
            let id = spec.id();
            if self.manifest.record(Stage::Finetune).completed.contains(&id) {
                continue;
            }
            let data = spec
                .sources
                .iter()
                .map(|l| {
                    Ok((
                        l.clone(),
                        cast_many(&corpus, &train_idx, spec.task, l, &self.task_options())?.0,
                    ))
                })
                .collect::<Result<Vec<_>, SynthError>>()?;
            let tc = self.cfg.finetune_train_config(spec.seed);
            let mix = mix_sources(&data, tc.train_budget, tc.seed)?;
            let probe = XlrsProbe {
                corpus: &corpus,
                source: spec.first_source().to_string(),
                targets: targets.clone(),
                probes: probes.clone(),
            };
            let dir = self.path(&run_dir("finetune", &id));
            let log_path = dir.join("log.jsonl");
            let xlrs_path = dir.join("xlrs.jsonl");
            let latest = if self.resume {
                saved_steps(&self.out, &id)?.last().copied()
            } else {
                None
            };
            let out = self.out.clone();
            let on_checkpoint = |ev: &CheckpointEvent| -> Result<(), TrainError> {
                let ck = ev.checkpoint;
                append(&log_path, &json_lines(ev.log))?;
                append(&xlrs_path, &json_lines(ev.xlrs))?;
                write_atomic_io(&out.join(checkpoint_file(&id, ck.step)), &ck.to_bytes())?;
                Ok(())
            };
            match latest {
                Some(step) => {
                    // Drop anything written after the checkpoint we resume from.
                    let log: Vec<LogRow> = read_jsonl(&log_path).unwrap_or_default();
                    let keep: Vec<&LogRow> = log.iter().filter(|r| r.step <= step).collect();
                    write_atomic(&log_path, json_lines(&keep).as_bytes())?;
                    let xl: Vec<XLRSRecord> = read_jsonl(&xlrs_path).unwrap_or_default();
                    let keep: Vec<&XLRSRecord> = xl.iter().filter(|r| r.step <= step).collect();
                    write_atomic(&xlrs_path, json_lines(&keep).as_bytes())?;
                    let ck = load_checkpoint(&self.path(&checkpoint_file(&id, step)))?;
                    resume_finetune(ck, &mix, &vocab, Some(&probe), on_checkpoint)?;
                }
                None => {
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(io_error(&dir))?;
                    }
                    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
                    let provenance = Provenance {
                        stage: Stage::Finetune.to_string(),
                        task: Some(spec.task),
                        source_langs: spec.sources.clone(),
                    };
                    finetune(
                        pretrained.params.clone(),
                        &mix,
                        &vocab,
                        &tc,
                        provenance,
                        Some(&probe),
                        on_checkpoint,
                    )?;
                }
            }
            let records = load_xlrs(&self.out, &id)?;
            write_atomic(&dir.join("xlrs.csv"), xlrs_csv(&records)?.as_bytes())?;
            self.manifest.record_mut(Stage::Finetune).completed.insert(id);
            self.manifest.save(&self.out)?;
        }
        let mut artifacts = Vec::new();
        for spec in &specs {
            let id = spec.id();
            for step in saved_steps(&self.out, &id)? {
                artifacts.push(checkpoint_file(&id, step));
            }
            for f in ["log.jsonl", "xlrs.jsonl", "xlrs.csv"] {
                artifacts.push(format!("{}/{f}", run_dir("finetune", &id)));
            }
        }
        self.manifest.complete(&self.out, Stage::Finetune, &artifacts)?;
        Ok(())
    }

    fn diagnose(&mut self) -> Result<(), PipelineError> {
        let (corpus, vocab) = self.load_corpus()?;
        let all = corpus.family.lang_ids();
        let d = self.cfg.diagnostics.clone();
        let g = self.cfg.experiment.clone();
        let evaluated = self.cfg.evaluated_languages();
        let sources: Vec<String> = evaluated.iter().filter(|l| !g.targets.contains(l)).cloned().collect();
        for (split, langs, labels, purpose) in [
            (Split::Train, all.clone(), false, "language identifier training"),
            (Split::Test, all.clone(), false, "LID accuracy"),
            (Split::Dev, sources, true, "SOURCE_DEV selection metric"),
            (Split::Dev, g.targets.clone(), true, "TARGET_DEV oracle evaluation"),
            (
                Split::Test,
                evaluated.clone(),
                true,
                "final test scoring and label overlap",
            ),
        ] {
            self.manifest.declare(DataAccess {
                stage: Stage::Diagnose,
                split,
                langs,
                labels,
                purpose: purpose.into(),
            });
        }
        self.manifest.save(&self.out)?;

        let lid = train_lid(&corpus, d.lid_order)?;
        let accuracy: BTreeMap<String, Option<f64>> = all
            .iter()
            .map(|l| (l.clone(), lid_accuracy(&lid, &corpus, l)))
            .collect();
        write_atomic(
            &self.path(LID_FILE),
            &serde_json::to_vec_pretty(&accuracy).expect("serializes"),
        )?;

        let opts = self.task_options();
        let test_idx = corpus.indices(Split::Test);
        let test_idx = &test_idx[..test_idx.len().min(d.eval_sample)];
        let mut overlaps = Vec::new();
        for &task in &g.tasks {
            let first = &g.source_sets[0][0];
            let (src, _) = cast_many(&corpus, test_idx, task, first, &opts)?;
            let mut targets = BTreeMap::new();
            for t in &g.targets {
                let (inst, _) = cast_many(&corpus, test_idx, task, t, &opts)?;
                targets.insert(t.clone(), inst);
            }
            overlaps.push(overlap_report(&src, &targets)?);
        }
        write_atomic(
            &self.path(OVERLAP_FILE),
            &serde_json::to_vec_pretty(&overlaps).expect("serializes"),
        )?;

        let mut artifacts = vec![LID_FILE.to_string(), OVERLAP_FILE.to_string()];
        for spec in run_specs(&self.cfg) {
            let id = spec.id();
            let ev = Evaluator {
                vocab: &vocab,
                corpus: &corpus,
                lid: &lid,
                task: spec.task,
                first_source: spec.first_source().to_string(),
                sets: eval_sets(&corpus, spec.task, &spec.sources, &g.targets, d.eval_sample, &opts)?,
            };
            let mut rows = Vec::new();
            for step in saved_steps(&self.out, &id)? {
                let path = self.path(&metrics_file(&id, step));
                // Checkpoints measured before an interruption are kept.
                let rs: Vec<MetricRow> = match read_json(&path) {
                    Ok(rs) => rs,
                    Err(_) => {
                        let ck = load_checkpoint(&self.path(&checkpoint_file(&id, step)))?;
                        let rs = ev.measure(&ck.params, step)?;
                        write_atomic(&path, &serde_json::to_vec(&rs).expect("serializes"))?;
                        rs
                    }
                };
                artifacts.push(metrics_file(&id, step));
                rows.extend(rs);
            }
            let csv_path = format!("{}/metrics.csv", run_dir("diagnose", &id));
            let mut buf = Vec::new();
            xlrs_core::diagnostics::write_csv(&rows, &mut buf)?;
            write_atomic(&self.path(&csv_path), &buf)?;
            artifacts.push(csv_path);
        }
        self.manifest.complete(&self.out, Stage::Diagnose, &artifacts)?;
        Ok(())
    }

    fn select(&mut self) -> Result<(), PipelineError> {
        let g = self.cfg.experiment.clone();
        let mut selections = Vec::new();
        let mut correlations = Vec::new();
        for spec in run_specs(&self.cfg) {
            let id = spec.id();
            let rs = run_series(&self.out, &spec, &g.targets)?;
            let cmp = compare_strategies(
                &rs.series,
                &self.cfg.selection.strategies,
                metric_name(spec.task),
                &g.targets,
                &rs.target_dev,
                &rs.target_test,
            )?;
            for o in &cmp.outcomes {
                selections.push(SelectionRow {
                    run: id.clone(),
                    task: spec.task,
                    sources: spec.sources.join("+"),
                    seed: spec.seed,
                    strategy: o.strategy,
                    target: o.target.clone(),
                    step: o.step,
                    criterion: o.criterion,
                    metric: o.test_metric,
                    delta_vs_oracle: o.delta_vs_oracle,
                });
            }
            let n_perm = self.cfg.diagnostics.n_permutations;
            let mut pairs: Vec<(String, Vec<f64>, Vec<f64>)> = g
                .targets
                .iter()
                .map(|t| (t.clone(), rs.series.xlrs[t].clone(), rs.target_test[t].clone()))
                .collect();
            pairs.push((
                "mean".into(),
                mean_series(rs.series.xlrs.values()),
                mean_series(rs.target_test.values()),
            ));
            for (target, x, y) in pairs {
                let c = if x.len() >= 3 {
                    correlation(&x, &y, n_perm, self.cfg.seed)?
                } else {
                    None
                };
                correlations.push(CorrelationRow {
                    run: id.clone(),
                    task: spec.task,
                    sources: spec.sources.join("+"),
                    seed: spec.seed,
                    target,
                    n: x.len(),
                    rho: c.map(|c| c.rho),
                    p_value: c.map(|c| c.p_value),
                });
            }
        }
        let mut buf = Vec::new();
        xlrs_core::diagnostics::write_csv(&selections, &mut buf)?;
        write_atomic(&self.path(SELECTION_FILE), &buf)?;
        let mut buf = Vec::new();
        xlrs_core::diagnostics::write_csv(&correlations, &mut buf)?;
        write_atomic(&self.path(CORRELATION_FILE), &buf)?;
        self.manifest.complete(
            &self.out,
            Stage::Select,
            &[SELECTION_FILE.into(), CORRELATION_FILE.into()],
        )?;
        Ok(())
    }

    fn report(&mut self) -> Result<(), PipelineError> {
        let files = crate::report::emit_report(&self.out)?;
        self.manifest.complete(&self.out, Stage::Report, &files)?;
        Ok(())
    }
}
