//! Checkpoint selection without target labels (source dev, lowest XLRS)
//! against the target-dev oracle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{markdown_table, write_csv, DiagError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("{strategy} needs a target language")]
    MissingTarget { strategy: StrategyKind },
    #[error("no XLRS series for target {0}")]
    MissingXlrs(String),
    #[error("no target dev scores for {0}")]
    MissingTargetDev(String),
    #[error("no test scores for {0}")]
    MissingTest(String),
    #[error("series {name} has {got} values for {expected} checkpoints")]
    Misaligned { name: String, expected: usize, got: usize },
    #[error("unknown selection strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    SourceDev,
    CosSim,
    TargetDev,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::SourceDev, StrategyKind::CosSim, StrategyKind::TargetDev];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::SourceDev => "SOURCE_DEV",
            StrategyKind::CosSim => "COS_SIM",
            StrategyKind::TargetDev => "TARGET_DEV",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SelectionError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Name of the task metric the dev criteria use (e.g. `ROUGE-L`).
    pub metric: String,
    pub target: Option<String>,
}

/// Per-checkpoint measurements that involve no target-language labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSeries {
    pub steps: Vec<usize>,
    pub source_dev: Vec<f64>,
    /// XLRS(source, target) per target, aligned with `steps`.
    pub xlrs: BTreeMap<String, Vec<f64>>,
}

/// Annotated target dev data. Only the TARGET_DEV strategy consults it.
pub trait TargetDevOracle {
    fn dev_scores(&self, target: &str) -> Option<&[f64]>;
}

impl TargetDevOracle for BTreeMap<String, Vec<f64>> {
    fn dev_scores(&self, target: &str) -> Option<&[f64]> {
        self.get(target).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kind: StrategyKind,
    pub target: Option<String>,
    pub index: usize,
    pub step: usize,
    /// Criterion value at the chosen checkpoint.
    pub criterion: f64,
}

#[derive(Clone, Copy)]
enum Extremum {
    Max,
    Min,
}

/// Index of the extremal value; ties go to the later checkpoint.
fn extremal(values: &[f64], ext: Extremum) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = match ext {
            Extremum::Max => v >= values[best],
            Extremum::Min => v <= values[best],
        };
        if better {
            best = i;
        }
    }
    best
}

fn aligned<'a>(name: &str, values: &'a [f64], n: usize) -> Result<&'a [f64], SelectionError> {
    if values.len() != n {
        return Err(SelectionError::Misaligned {
            name: name.to_string(),
            expected: n,
            got: values.len(),
        });
    }
    Ok(values)
}

fn by_xlrs(series: &CheckpointSeries, target: &str) -> Result<(usize, f64), SelectionError> {
    let v = series
        .xlrs
        .get(target)
        .ok_or_else(|| SelectionError::MissingXlrs(target.to_string()))?;
    let v = aligned(&format!("xlrs[{target}]"), v, series.steps.len())?;
    let i = extremal(v, Extremum::Min);
    Ok((i, v[i]))
}

/// Picks one checkpoint of `series` under `strat`.
///
/// COS_SIM and SOURCE_DEV never touch `oracle`.
pub fn select_checkpoint(
    series: &CheckpointSeries,
    strat: &SelectionStrategy,
    oracle: Option<&dyn TargetDevOracle>,
) -> Result<Selection, SelectionError> {
    let n = series.steps.len();
    if n == 0 {
        return Err(SelectionError::NoCheckpoints);
    }
    let target = || {
        strat
            .target
            .as_deref()
            .ok_or(SelectionError::MissingTarget { strategy: strat.kind })
    };
    let (index, criterion) = match strat.kind {
        StrategyKind::SourceDev => {
            let v = aligned("source_dev", &series.source_dev, n)?;
            let i = extremal(v, Extremum::Max);
            (i, v[i])
        }
        StrategyKind::CosSim => by_xlrs(series, target()?)?,
        StrategyKind::TargetDev => {
            let t = target()?;
            let v = oracle
                .and_then(|o| o.dev_scores(t))
                .ok_or_else(|| SelectionError::MissingTargetDev(t.to_string()))?;
            let v = aligned(&format!("target_dev[{t}]"), v, n)?;
            let i = extremal(v, Extremum::Max);
            (i, v[i])
        }
    };
    Ok(Selection {
        kind: strat.kind,
        target: strat.target.clone(),
        index,
        step: series.steps[index],
        criterion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub strategy: StrategyKind,
    pub target: String,
    pub step: usize,
    pub criterion: f64,
    /// Target test metric of the chosen checkpoint.
    pub test_metric: f64,
    /// `test_metric` minus that of the TARGET_DEV choice.
    pub delta_vs_oracle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyComparison {
    pub metric: String,
    pub targets: Vec<String>,
    pub outcomes: Vec<SelectionOutcome>,
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    strategy: StrategyKind,
    target: &'a str,
    metric: f64,
    delta_vs_oracle: f64,
}

impl StrategyComparison {
    pub fn get(&self, strategy: StrategyKind, target: &str) -> Option<&SelectionOutcome> {
        self.outcomes
            .iter()
            .find(|o| o.strategy == strategy && o.target == target)
    }

    /// Mean Δ over targets for one strategy.
    pub fn mean_delta(&self, strategy: StrategyKind) -> Option<f64> {
        let d: Vec<f64> = self
            .outcomes
            .iter()
            .filter(|o| o.strategy == strategy)
            .map(|o| o.delta_vs_oracle)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// CSV with columns `strategy,target,metric,delta_vs_oracle`.
    pub fn to_csv(&self) -> Result<String, SelectionError> {
        let rows: Vec<ComparisonRow> = self
            .outcomes
            .iter()
            .map(|o| ComparisonRow {
                strategy: o.strategy,
                target: &o.target,
                metric: o.test_metric,
                delta_vs_oracle: o.delta_vs_oracle,
            })
            .collect();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// One row per strategy, one column per target plus the mean Δ; values ×100.
    pub fn to_markdown(&self) -> String {
        let mut columns = self.targets.clone();
        columns.push("Δ".to_string());
        let kinds: Vec<StrategyKind> = StrategyKind::ALL
            .into_iter()
            .filter(|k| self.outcomes.iter().any(|o| o.strategy == *k))
            .collect();
        let rows: Vec<(String, Vec<Option<String>>)> = kinds
            .iter()
            .map(|&k| {
                let mut cells: Vec<Option<String>> = self
                    .targets
                    .iter()
                    .map(|t| self.get(k, t).map(|o| format!("{:.2}", 100.0 * o.test_metric)))
                    .collect();
                cells.push(self.mean_delta(k).map(|d| format!("{:.2}", 100.0 * d)));
                (k.to_string(), cells)
            })
            .collect();
        markdown_table(&self.metric, &columns, &rows)
    }
}

/// Runs every strategy for every target and scores the choices on the test
/// series. TARGET_DEV is always evaluated since it anchors Δ.
pub fn compare_strategies(
    series: &CheckpointSeries,
    strategies: &[StrategyKind],
    metric: &str,
    targets: &[String],
    target_dev: &BTreeMap<String, Vec<f64>>,
    target_test: &BTreeMap<String, Vec<f64>>,
) -> Result<StrategyComparison, SelectionError> {
    let n = series.steps.len();
    let mut outcomes = Vec::new();
    for t in targets {
        let test = target_test
            .get(t)
            .ok_or_else(|| SelectionError::MissingTest(t.clone()))?;
        let test = aligned(&format!("target_test[{t}]"), test, n)?;
        let choose = |kind| {
            select_checkpoint(
                series,
                &SelectionStrategy {
                    kind,
                    metric: metric.to_string(),
                    target: Some(t.clone()),
                },
                Some(target_dev),
            )
        };
        let oracle = test[choose(StrategyKind::TargetDev)?.index];
        for &kind in strategies {
            let sel = choose(kind)?;
            outcomes.push(SelectionOutcome {
                strategy: kind,
                target: t.clone(),
                step: sel.step,
                criterion: sel.criterion,
                test_metric: test[sel.index],
                delta_vs_oracle: test[sel.index] - oracle,
            });
        }
    }
    Ok(StrategyComparison {
        metric: metric.to_string(),
        targets: targets.to_vec(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Forbidden;

    impl TargetDevOracle for Forbidden {
        fn dev_scores(&self, _: &str) -> Option<&[f64]> {
            panic!("target labels read outside TARGET_DEV");
        }
    }

    fn series() -> CheckpointSeries {
        CheckpointSeries {
            steps: vec![100, 200, 300],
            source_dev: vec![0.5, 0.6, 0.6],
            xlrs: BTreeMap::from([("de".to_string(), vec![0.9, 0.7, 0.8])]),
        }
    }

    fn strat(kind: StrategyKind) -> SelectionStrategy {
        SelectionStrategy {
            kind,
            metric: "ROUGE-L".into(),
            target: Some("de".into()),
        }
    }

    #[test]
    fn cos_sim_picks_lowest_xlrs() {
        let s = select_checkpoint(&series(), &strat(StrategyKind::CosSim), Some(&Forbidden)).unwrap();
        assert_eq!((s.index, s.step), (1, 200));
        assert_eq!(s.criterion, 0.7);
    }

    #[test]
    fn label_free_strategies_never_consult_the_oracle() {
        for k in [StrategyKind::SourceDev, StrategyKind::CosSim] {
            select_checkpoint(&series(), &strat(k), Some(&Forbidden)).unwrap();
        }
    }

    #[test]
    fn ties_go_to_the_later_step() {
        let s = select_checkpoint(&series(), &strat(StrategyKind::SourceDev), None).unwrap();
        assert_eq!(s.step, 300);
        assert_eq!(extremal(&[0.2, 0.1, 0.1, 0.3], Extremum::Min), 2);
    }

    #[test]
    fn single_checkpoint_is_chosen_by_every_strategy() {
        let one = CheckpointSeries {
            steps: vec![50],
            source_dev: vec![0.1],
            xlrs: BTreeMap::from([("de".to_string(), vec![0.4])]),
        };
        let dev = BTreeMap::from([("de".to_string(), vec![0.3])]);
        for k in StrategyKind::ALL {
            assert_eq!(select_checkpoint(&one, &strat(k), Some(&dev)).unwrap().step, 50);
        }
    }

    #[test]
    fn missing_data_is_an_error() {
        let s = series();
        assert!(matches!(
            select_checkpoint(&s, &strat(StrategyKind::TargetDev), None),
            Err(SelectionError::MissingTargetDev(_))
        ));
        let mut no_target = strat(StrategyKind::CosSim);
        no_target.target = None;
        assert!(matches!(
            select_checkpoint(&s, &no_target, None),
            Err(SelectionError::MissingTarget { .. })
        ));
        let mut zh = strat(StrategyKind::CosSim);
        zh.target = Some("zh".into());
        assert!(select_checkpoint(&s, &zh, None).is_err());
        assert!(matches!(
            select_checkpoint(&CheckpointSeries::default(), &strat(StrategyKind::SourceDev), None),
            Err(SelectionError::NoCheckpoints)
        ));
    }

    #[test]
    fn comparison_shape_and_oracle_delta() {
        let s = series();
        let targets = vec!["de".to_string()];
        let dev = BTreeMap::from([("de".to_string(), vec![0.3, 0.2, 0.25])]);
        let test = BTreeMap::from([("de".to_string(), vec![0.31, 0.28, 0.2])]);
        let c = compare_strategies(&s, &StrategyKind::ALL, "ROUGE-L", &targets, &dev, &test).unwrap();
        assert_eq!(c.outcomes.len(), 3);
        assert_eq!(c.get(StrategyKind::TargetDev, "de").unwrap().delta_vs_oracle, 0.0);
        assert_eq!(c.get(StrategyKind::SourceDev, "de").unwrap().step, 300);
        assert!((c.get(StrategyKind::CosSim, "de").unwrap().delta_vs_oracle + 0.03).abs() < 1e-12);
        let csv = c.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "strategy,target,metric,delta_vs_oracle");
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("COS_SIM,de,"));
        let md = c.to_markdown();
        assert_eq!(md.lines().count(), 5);
        assert!(md.lines().next().unwrap().ends_with("| de | Δ |"));
        assert!(md.contains("| TARGET_DEV | 31.00 | 0.00 |"));
    }

    #[test]
    fn chosen_value_is_extremal() {
        let s = CheckpointSeries {
            steps: (1..=6).collect(),
            source_dev: vec![0.2, 0.5, 0.1, 0.5, 0.4, 0.3],
            xlrs: BTreeMap::from([("ru".to_string(), vec![0.8, 0.6, 0.9, 0.7, 0.6, 0.95])]),
        };
        let dev = BTreeMap::from([("ru".to_string(), vec![0.1, 0.0, 0.3, 0.2, 0.3, 0.1])]);
        let pick = |k| {
            let st = SelectionStrategy {
                kind: k,
                metric: "ROUGE-L".into(),
                target: Some("ru".into()),
            };
            select_checkpoint(&s, &st, Some(&dev)).unwrap()
        };
        assert_eq!(pick(StrategyKind::SourceDev).step, 4);
        assert_eq!(pick(StrategyKind::CosSim).step, 5);
        assert_eq!(pick(StrategyKind::TargetDev).step, 5);
        assert_eq!("COS_SIM".parse::<StrategyKind>().unwrap(), StrategyKind::CosSim);
    }
}
