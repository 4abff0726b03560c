//! Experiment configuration: JSON schema, defaults and validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xlrs_core::diagnostics::DEFAULT_PROBES;
use xlrs_core::model::TransformerConfig;
use xlrs_core::seeding::{derive_seed, STREAM_FINETUNE};
use xlrs_core::selection::StrategyKind;
use xlrs_core::synthlang::{alphabet_count, LanguageParams, OrderRule, Split, TaskKind, MAX_LEN, MIN_CONCEPTS};
use xlrs_core::train::TrainConfig;

/// Shortest `max_len` that fits every task template: a PAIRCLS input holds
/// two sentences, a sentinel and the end-of-sequence token.
pub const MIN_MAX_LEN: usize = 2 * MAX_LEN + 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub family: FamilyConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub experiment: RunGrid,
    pub diagnostics: DiagnosticsConfig,
    pub selection: SelectionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub concept_vocab: usize,
    pub languages: Vec<LanguageParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Denoising instances consumed; with the defaults, 6000 steps.
    pub train_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_budget: usize,
    pub checkpoint_every: usize,
}

/// Which fine-tuning runs an experiment performs: every task crossed with
/// every source set and every replicate seed. XLRS is measured between each
/// run's first source and every target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunGrid {
    pub tasks: Vec<TaskKind>,
    pub source_sets: Vec<Vec<String>>,
    pub targets: Vec<String>,
    /// Fine-tuning replicates; all share the corpus and pretrained model.
    pub seeds: Vec<u64>,
    pub summary_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub xlrs_sample: usize,
    /// Dev and test instances scored per language and checkpoint.
    pub eval_sample: usize,
    pub n_permutations: usize,
    pub lid_order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategies: Vec<StrategyKind>,
}

fn lang(id: &str, alphabet_id: u32, order_rule: OrderRule, lexical_overlap: f64) -> LanguageParams {
    LanguageParams {
        lang_id: id.into(),
        alphabet_id,
        order_rule,
        lexical_overlap,
    }
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            concept_vocab: 200,
            languages: vec![
                lang("en", 0, OrderRule::Identity, 0.0),
                lang("hi", 6, OrderRule::VerbFinal, 0.0),
                lang("de", 0, OrderRule::VerbFinal, 0.3),
                lang("ru", 2, OrderRule::Identity, 0.0),
                lang("zh", 7, OrderRule::Reverse, 0.0),
            ],
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_sentences: 12_500 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TransformerConfig::toy(0);
        Self {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_enc_layers: t.n_enc_layers,
            n_dec_layers: t.n_dec_layers,
            d_ff: t.d_ff,
            max_len: t.max_len,
            dropout_rate: t.dropout_rate,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            train_budget: 6000 * 32,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            train_budget: t.train_budget,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl Default for RunGrid {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Paircls, TaskKind::GenTitle],
            source_sets: vec![vec!["en".into()], vec!["en".into(), "hi".into()]],
            targets: vec!["de".into(), "ru".into(), "zh".into()],
            seeds: vec![0],
            summary_len: 3,
        }
    }
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            xlrs_sample: DEFAULT_PROBES,
            eval_sample: 200,
            n_permutations: 10_000,
            lid_order: 2,
        }
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategies: StrategyKind::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
        }
    }
}

impl ExperimentConfig {
    pub fn pretrain_train_config(&self) -> TrainConfig {
        let p = &self.pretrain;
        TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            epochs: p.epochs,
            train_budget: p.train_budget,
            checkpoint_every: p.train_budget,
            seed: self.seed,
        }
    }

    /// Fine-tuning hyperparameters for one replicate; its seed is derived
    /// from the root seed and the replicate seed.
    pub fn finetune_train_config(&self, replicate: u64) -> TrainConfig {
        let f = &self.finetune;
        TrainConfig {
            learning_rate: f.learning_rate,
            batch_size: f.batch_size,
            epochs: f.epochs,
            train_budget: f.train_budget,
            checkpoint_every: f.checkpoint_every,
            seed: derive_seed(self.seed, STREAM_FINETUNE, replicate),
        }
    }

    /// Source and target languages in first-seen order.
    pub fn evaluated_languages(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for l in self
            .experiment
            .source_sets
            .iter()
            .flatten()
            .chain(&self.experiment.targets)
        {
            if seen.insert(l.clone()) {
                out.push(l.clone());
            }
        }
        out
    }
}

/// One problem found in a configuration, located by a dotted field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid JSON")]
    Parse(#[from] serde_json::Error),
    #[error("{} invalid field(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Reads, defaults and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    let errors = check(&cfg);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

struct Checker(Vec<FieldError>);

impl Checker {
    fn fail(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.fail(field, "must be positive");
        }
    }

    fn rate(&mut self, field: &str, v: f64) {
        if !(v.is_finite() && v > 0.0) {
            self.fail(field, format!("must be a positive finite number, got {v}"));
        }
    }
}

/// Every invariant the pipeline would otherwise discover mid-run.
pub fn check(cfg: &ExperimentConfig) -> Vec<FieldError> {
    let mut c = Checker(Vec::new());

    let fam = &cfg.family;
    if fam.concept_vocab < MIN_CONCEPTS {
        c.fail(
            "family.concept_vocab",
            format!("must be at least {MIN_CONCEPTS}, got {}", fam.concept_vocab),
        );
    }
    if fam.languages.len() < 2 {
        c.fail("family.languages", "a family needs at least 2 languages");
    }
    let mut ids = BTreeSet::new();
    for (i, l) in fam.languages.iter().enumerate() {
        let at = |f: &str| format!("family.languages[{i}].{f}");
        if l.lang_id.is_empty() || l.lang_id.contains(char::is_whitespace) {
            c.fail(at("lang_id"), format!("invalid language id {:?}", l.lang_id));
        } else if !ids.insert(l.lang_id.as_str()) {
            c.fail(at("lang_id"), format!("duplicate language id {:?}", l.lang_id));
        }
        if !(0.0..=1.0).contains(&l.lexical_overlap) {
            c.fail(
                at("lexical_overlap"),
                format!("must lie in [0, 1], got {}", l.lexical_overlap),
            );
        }
        if l.alphabet_id as usize >= alphabet_count() {
            c.fail(
                at("alphabet_id"),
                format!("must be below {}, got {}", alphabet_count(), l.alphabet_id),
            );
        }
    }

    c.positive("corpus.n_sentences", cfg.corpus.n_sentences);

    let m = &cfg.model;
    for (f, v) in [
        ("model.d_model", m.d_model),
        ("model.n_heads", m.n_heads),
        ("model.n_enc_layers", m.n_enc_layers),
        ("model.n_dec_layers", m.n_dec_layers),
        ("model.d_ff", m.d_ff),
    ] {
        c.positive(f, v);
    }
    if m.n_heads > 0 && !m.d_model.is_multiple_of(m.n_heads) {
        c.fail(
            "model.d_model",
            format!("{} is not divisible by n_heads = {}", m.d_model, m.n_heads),
        );
    }
    if m.max_len < MIN_MAX_LEN {
        c.fail(
            "model.max_len",
            format!("must be at least {MIN_MAX_LEN}, got {}", m.max_len),
        );
    }
    if !(0.0..1.0).contains(&m.dropout_rate) {
        c.fail(
            "model.dropout_rate",
            format!("must lie in [0, 1), got {}", m.dropout_rate),
        );
    }

    let p = &cfg.pretrain;
    c.rate("pretrain.learning_rate", p.learning_rate);
    c.positive("pretrain.batch_size", p.batch_size);
    c.positive("pretrain.epochs", p.epochs);
    if p.train_budget < p.batch_size.max(1) {
        c.fail("pretrain.train_budget", "must fill at least one batch");
    }

    let f = &cfg.finetune;
    c.rate("finetune.learning_rate", f.learning_rate);
    c.positive("finetune.batch_size", f.batch_size);
    c.positive("finetune.epochs", f.epochs);
    c.positive("finetune.train_budget", f.train_budget);
    c.positive("finetune.checkpoint_every", f.checkpoint_every);

    let g = &cfg.experiment;
    let known = |l: &str| fam.languages.iter().any(|x| x.lang_id == l);
    if g.tasks.is_empty() {
        c.fail("experiment.tasks", "at least one task is required");
    }
    if g.source_sets.is_empty() {
        c.fail("experiment.source_sets", "at least one source set is required");
    }
    let n_train = (0..cfg.corpus.n_sentences)
        .filter(|&i| Split::of_index(i) == Split::Train)
        .count();
    for (i, set) in g.source_sets.iter().enumerate() {
        let at = format!("experiment.source_sets[{i}]");
        if set.is_empty() {
            c.fail(&at, "a source set needs at least one language");
            continue;
        }
        if set.iter().collect::<BTreeSet<_>>().len() != set.len() {
            c.fail(&at, "repeats a language");
        }
        for (j, l) in set.iter().enumerate() {
            if !known(l) {
                c.fail(format!("{at}[{j}]"), format!("unknown language {l:?}"));
            }
            if g.targets.contains(l) {
                c.fail(format!("{at}[{j}]"), format!("{l:?} is also a target"));
            }
        }
        let need = f.train_budget.div_ceil(set.len());
        if need > n_train {
            c.fail(
                "finetune.train_budget",
                format!("source set {i} needs {need} training sentences per language, the corpus has {n_train}"),
            );
        }
    }
    if g.targets.is_empty() {
        c.fail("experiment.targets", "at least one target is required");
    }
    for (j, l) in g.targets.iter().enumerate() {
        if !known(l) {
            c.fail(format!("experiment.targets[{j}]"), format!("unknown language {l:?}"));
        }
    }
    if g.seeds.is_empty() {
        c.fail("experiment.seeds", "at least one seed is required");
    }
    if g.seeds.iter().collect::<BTreeSet<_>>().len() != g.seeds.len() {
        c.fail("experiment.seeds", "repeats a seed");
    }
    c.positive("experiment.summary_len", g.summary_len);

    let d = &cfg.diagnostics;
    c.positive("diagnostics.xlrs_sample", d.xlrs_sample);
    c.positive("diagnostics.eval_sample", d.eval_sample);
    c.positive("diagnostics.n_permutations", d.n_permutations);
    c.positive("diagnostics.lid_order", d.lid_order);

    if cfg.selection.strategies.is_empty() {
        c.fail("selection.strategies", "at least one strategy is required");
    }
    c.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_fully_defaulted() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.finetune.learning_rate, 7e-5);
        assert_eq!(cfg.finetune.batch_size, 32);
        assert_eq!(cfg.finetune.epochs, 10);
        assert_eq!(cfg.finetune.train_budget, 10_000);
        assert_eq!(cfg.diagnostics.xlrs_sample, 512);
    }

    #[test]
    fn absent_batch_size_defaults_to_32() {
        let cfg = parse_config(r#"{"finetune": {"learning_rate": 1e-3}}"#).unwrap();
        assert_eq!(cfg.finetune.batch_size, 32);
        assert_eq!(cfg.finetune.learning_rate, 1e-3);
    }

    #[test]
    fn overlap_out_of_range_names_the_field() {
        let text = r#"{"family": {"languages": [
            {"lang_id": "en", "alphabet_id": 0, "order_rule": "identity", "lexical_overlap": 0.0},
            {"lang_id": "de", "alphabet_id": 1, "order_rule": "reverse", "lexical_overlap": 1.5}
        ]}, "experiment": {"source_sets": [["en"]], "targets": ["de"]}}"#;
        let err = parse_config(text).unwrap_err();
        let fields = err.fields();
        assert_eq!(fields.len(), 1, "{fields:?}");
        assert_eq!(fields[0].field, "family.languages[1].lexical_overlap");
    }

    #[test]
    fn errors_are_aggregated() {
        let text = r#"{"model": {"d_model": 30, "n_heads": 4}, "finetune": {"batch_size": 0},
                       "experiment": {"targets": ["xx"]}}"#;
        let fields: Vec<String> = parse_config(text)
            .unwrap_err()
            .fields()
            .iter()
            .map(|e| e.field.clone())
            .collect();
        for f in ["model.d_model", "finetune.batch_size", "experiment.targets[0]"] {
            assert!(fields.iter().any(|x| x == f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(
            parse_config(r#"{"finetune": {"lr": 1}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn source_languages_must_not_be_targets() {
        let text = r#"{"experiment": {"source_sets": [["en", "de"]]}}"#;
        let fields = parse_config(text).unwrap_err();
        assert_eq!(fields.fields()[0].field, "experiment.source_sets[0][1]");
    }

    #[test]
    fn normalized_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
