//! The report stage: flat CSVs over every run plus a markdown summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xlrs_core::diagnostics::{markdown_table, write_csv, OverlapReport};
use xlrs_core::selection::StrategyKind;
use xlrs_core::synthlang::{Split, TaskKind};

use crate::config::ExperimentConfig;
use crate::manifest::{write_atomic, ExperimentManifest, Stage};
use crate::measure::{metric_name, MetricRow, Role};
use crate::pipeline::{
    load_metrics, load_xlrs, read_csv, read_json, run_specs, CorrelationRow, PipelineError, RunSpec, SelectionRow,
    CONFIG_FILE, CORRELATION_FILE, OVERLAP_FILE, SELECTION_FILE,
};

pub const REPORT_MD: &str = "report/report.md";
pub const REPORT_XLRS: &str = "report/xlrs.csv";
pub const REPORT_METRICS: &str = "report/metrics.csv";
pub const REPORT_SELECTION: &str = "report/selection.csv";
pub const REPORT_CORRELATION: &str = "report/correlation.csv";

/// Significance level marked with `*` in the correlation table.
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportXlrsRow {
    pub run: String,
    pub task: TaskKind,
    pub sources: String,
    pub seed: u64,
    pub step: usize,
    pub source: String,
    pub target: String,
    pub value: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetricRow {
    pub run: String,
    pub task: TaskKind,
    pub sources: String,
    pub seed: u64,
    pub step: usize,
    pub lang: String,
    pub role: Role,
    pub split: Split,
    pub value: f64,
    pub exact_match: Option<f64>,
    pub wrong_language: Option<f64>,
    pub source_confidence: Option<f64>,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(buf)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pct(v: Option<f64>) -> Option<String> {
    v.map(|x| format!("{:.2}", 100.0 * x))
}

/// ρ to two decimals, starred when significant at [`ALPHA`].
pub fn format_rho(rho: Option<f64>, p_value: Option<f64>) -> Option<String> {
    let rho = rho?;
    let star = if p_value.is_some_and(|p| p < ALPHA) { "*" } else { "" };
    Some(format!("{rho:.2}{star}"))
}

/// Test-split rows of the last checkpoint of one run.
fn final_rows(rows: &[MetricRow]) -> Vec<&MetricRow> {
    let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
    rows.iter()
        .filter(|r| r.step == last && r.split == Split::Test)
        .collect()
}

/// Final-checkpoint test scores of one task: a row per source set (averaged
/// over seeds), a column per evaluated language. `field` picks the value.
pub fn final_table(
    task: TaskKind,
    langs: &[String],
    runs: &[(RunSpec, Vec<MetricRow>)],
    corner: &str,
    field: impl Fn(&MetricRow) -> Option<f64>,
) -> String {
    let mut by_set: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut order = Vec::new();
    for (spec, rows) in runs.iter().filter(|(s, _)| s.task == task) {
        let set = spec.sources.join("+");
        if !order.contains(&set) {
            order.push(set.clone());
        }
        let cells = by_set.entry(set).or_default();
        for r in final_rows(rows) {
            if let Some(v) = field(r) {
                cells.entry(r.lang.clone()).or_default().push(v);
            }
        }
    }
    let rows: Vec<(String, Vec<Option<String>>)> = order
        .iter()
        .map(|set| {
            let cells = &by_set[set];
            let values = langs.iter().map(|l| pct(cells.get(l).and_then(|v| mean(v)))).collect();
            (set.clone(), values)
        })
        .collect();
    markdown_table(corner, langs, &rows)
}

/// Chosen-checkpoint test scores per strategy and source set, averaged over
/// seeds, with the mean Δ against TARGET_DEV in the last column.
pub fn selection_table(task: TaskKind, targets: &[String], rows: &[SelectionRow]) -> String {
    let mut cells: BTreeMap<(String, StrategyKind), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut deltas: BTreeMap<(String, StrategyKind), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows.iter().filter(|r| r.task == task) {
        let key = (r.sources.clone(), r.strategy);
        if !order.contains(&key) {
            order.push(key.clone());
        }
        cells
            .entry(key.clone())
            .or_default()
            .entry(r.target.clone())
            .or_default()
            .push(r.metric);
        deltas.entry(key).or_default().push(r.delta_vs_oracle);
    }
    let mut columns = targets.to_vec();
    columns.push("Δ".into());
    let table: Vec<(String, Vec<Option<String>>)> = order
        .iter()
        .map(|key| {
            let mut v: Vec<Option<String>> = targets
                .iter()
                .map(|t| pct(cells[key].get(t).and_then(|x| mean(x))))
                .collect();
            v.push(pct(mean(&deltas[key])));
            (format!("{} {}", key.0, key.1), v)
        })
        .collect();
    markdown_table("sources / strategy", &columns, &table)
}

/// Spearman ρ between XLRS and the target test metric, one row per run.
pub fn correlation_table(targets: &[String], rows: &[CorrelationRow]) -> String {
    let mut columns = targets.to_vec();
    columns.push("mean".into());
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.run.as_str()) {
            order.push(&r.run);
        }
    }
    let table: Vec<(String, Vec<Option<String>>)> = order
        .iter()
        .map(|run| {
            let cells = columns
                .iter()
                .map(|t| {
                    rows.iter()
                        .find(|r| r.run == *run && &r.target == t)
                        .and_then(|r| format_rho(r.rho, r.p_value))
                })
                .collect();
            (run.to_string(), cells)
        })
        .collect();
    markdown_table("run", &columns, &table)
}

fn overlap_table(targets: &[String], reports: &[OverlapReport]) -> String {
    let mut columns = targets.to_vec();
    columns.push("mean".into());
    let rows: Vec<(String, Vec<Option<String>>)> = reports
        .iter()
        .map(|r| {
            let mut cells: Vec<Option<String>> = targets.iter().map(|t| pct(r.per_target.get(t).copied())).collect();
            cells.push(pct(Some(r.aggregate)));
            (format!("{} ({})", r.task, r.source), cells)
        })
        .collect();
    markdown_table("task", &columns, &rows)
}

/// Writes every report file and returns their paths relative to `out`.
pub fn emit_report(out: &Path) -> Result<Vec<String>, PipelineError> {
    let manifest = ExperimentManifest::load(out)?.ok_or(PipelineError::MissingStage(Stage::GenCorpus))?;
    for stage in Stage::Report.prerequisites() {
        if !manifest.is_done(*stage) {
            return Err(PipelineError::MissingStage(*stage));
        }
    }
    let cfg: ExperimentConfig = read_json(&out.join(CONFIG_FILE))?;
    let targets = &cfg.experiment.targets;
    let langs = cfg.evaluated_languages();

    let mut runs = Vec::new();
    let mut xlrs_rows = Vec::new();
    let mut metric_rows = Vec::new();
    for spec in run_specs(&cfg) {
        let id = spec.id();
        let sources = spec.sources.join("+");
        for r in load_xlrs(out, &id)? {
            xlrs_rows.push(ReportXlrsRow {
                run: id.clone(),
                task: spec.task,
                sources: sources.clone(),
                seed: spec.seed,
                step: r.step,
                source: r.source_lang,
                target: r.target_lang,
                value: r.value,
                n_pairs: r.n_pairs,
            });
        }
        let metrics = load_metrics(out, &id)?;
        metric_rows.extend(metrics.iter().map(|m| ReportMetricRow {
            run: id.clone(),
            task: spec.task,
            sources: sources.clone(),
            seed: spec.seed,
            step: m.step,
            lang: m.lang.clone(),
            role: m.role,
            split: m.split,
            value: m.value,
            exact_match: m.exact_match,
            wrong_language: m.wrong_language,
            source_confidence: m.source_confidence,
        }));
        runs.push((spec, metrics));
    }
    let selection: Vec<SelectionRow> = read_csv(&out.join(SELECTION_FILE))?;
    let correlation: Vec<CorrelationRow> = read_csv(&out.join(CORRELATION_FILE))?;
    let overlap: Vec<OverlapReport> = read_json(&out.join(OVERLAP_FILE))?;

    let mut md = String::from("# Experiment report\n\n");
    let _ = writeln!(
        md,
        "Seed {}. Values are ×100; final checkpoint, test split, mean over seeds {:?}.\n",
        cfg.seed, cfg.experiment.seeds
    );
    for &task in &cfg.experiment.tasks {
        let _ = writeln!(md, "## {task}\n");
        let _ = writeln!(
            md,
            "{}",
            final_table(task, &langs, &runs, metric_name(task), |r| Some(r.value))
        );
        if task.is_generation() {
            let _ = writeln!(md, "Wrong-language rate:\n");
            let _ = writeln!(
                md,
                "{}",
                final_table(task, &langs, &runs, "wrong language", |r| r.wrong_language)
            );
        }
        let _ = writeln!(md, "Checkpoint selection ({}):\n", metric_name(task));
        let _ = writeln!(md, "{}", selection_table(task, targets, &selection));
    }
    let _ = writeln!(md, "## XLRS vs target test metric (Spearman ρ, * p < {ALPHA})\n");
    let _ = writeln!(md, "{}", correlation_table(targets, &correlation));
    let _ = writeln!(md, "## Label overlap with the first source\n");
    let _ = write!(md, "{}", overlap_table(targets, &overlap));

    write_atomic(&out.join(REPORT_XLRS), &csv_bytes(&xlrs_rows)?)?;
    write_atomic(&out.join(REPORT_METRICS), &csv_bytes(&metric_rows)?)?;
    write_atomic(&out.join(REPORT_SELECTION), &csv_bytes(&selection)?)?;
    write_atomic(&out.join(REPORT_CORRELATION), &csv_bytes(&correlation)?)?;
    write_atomic(&out.join(REPORT_MD), md.as_bytes())?;
    Ok([
        REPORT_MD,
        REPORT_XLRS,
        REPORT_METRICS,
        REPORT_SELECTION,
        REPORT_CORRELATION,
    ]
    .map(String::from)
    .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_marks_only_significant_rho() {
        assert_eq!(format_rho(Some(0.61), Some(0.01)).as_deref(), Some("0.61*"));
        assert_eq!(format_rho(Some(0.61), Some(0.05)).as_deref(), Some("0.61"));
        assert_eq!(format_rho(Some(-0.2), None).as_deref(), Some("-0.20"));
        assert_eq!(format_rho(None, Some(0.0)), None);
    }

    #[test]
    fn correlation_table_has_a_row_per_run() {
        let row = |run: &str, target: &str, rho, p| CorrelationRow {
            run: run.into(),
            task: TaskKind::Tag,
            sources: "en".into(),
            seed: 0,
            target: target.into(),
            n: 10,
            rho,
            p_value: p,
        };
        let rows = vec![
            row("TAG.en.s0", "de", Some(0.9), Some(0.001)),
            row("TAG.en.s0", "mean", Some(0.3), Some(0.4)),
            row("TAG.en.s1", "de", None, None),
        ];
        let t = correlation_table(&["de".into()], &rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "| TAG.en.s0 | 0.90* | 0.30 |");
        assert_eq!(lines[3], "| TAG.en.s1 | - | - |");
    }
}
