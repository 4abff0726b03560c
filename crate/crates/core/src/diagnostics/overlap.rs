use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::synthlang::{TaskInstance, TaskKind};

/// Fraction of aligned pairs whose canonical gold labels coincide.
pub fn label_overlap(source: &[TaskInstance], target: &[TaskInstance]) -> Result<f64, DiagError> {
    if source.len() != target.len() {
        return Err(DiagError::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.is_empty() {
        return Err(DiagError::TooFewPoints { min: 1, got: 0 });
    }
    let task = source[0].task;
    if source.iter().chain(target).any(|i| i.task != task) {
        return Err(DiagError::MixedTasks);
    }
    let same = source.iter().zip(target).filter(|(s, t)| s.gold == t.gold).count();
    Ok(same as f64 / source.len() as f64)
}

/// Per-target overlap with one source, aggregated by the mean over targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub task: TaskKind,
    pub source: String,
    pub per_target: BTreeMap<String, f64>,
    pub aggregate: f64,
}

pub fn overlap_report(
    source: &[TaskInstance],
    targets: &BTreeMap<String, Vec<TaskInstance>>,
) -> Result<OverlapReport, DiagError> {
    let first = source.first().ok_or(DiagError::TooFewPoints { min: 1, got: 0 })?;
    if targets.is_empty() {
        return Err(DiagError::TooFewPoints { min: 1, got: 0 });
    }
    let per_target = targets
        .iter()
        .map(|(lang, t)| Ok((lang.clone(), label_overlap(source, t)?)))
        .collect::<Result<BTreeMap<_, _>, DiagError>>()?;
    let aggregate = per_target.values().sum::<f64>() / per_target.len() as f64;
    Ok(OverlapReport {
        task: first.task,
        source: first.lang.clone(),
        per_target,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::GoldLabel;

    fn inst(label: &str) -> TaskInstance {
        TaskInstance {
            input_text: "x".into(),
            target_text: "y".into(),
            task: TaskKind::GenSum,
            lang: "en".into(),
            gold: GoldLabel::Text(label.into()),
            idx: 0,
        }
    }

    fn insts(labels: &[&str]) -> Vec<TaskInstance> {
        labels.iter().map(|l| inst(l)).collect()
    }

    #[test]
    fn hand_count() {
        let s = insts(&["A", "B", "A", "C"]);
        let t = insts(&["A", "B", "C", "C"]);
        assert_eq!(label_overlap(&s, &t).unwrap(), 0.75);
        assert_eq!(label_overlap(&t, &s).unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            label_overlap(&insts(&["A"]), &insts(&["A", "B"])),
            Err(DiagError::LengthMismatch { .. })
        ));
        let mut t = insts(&["A"]);
        t[0].task = TaskKind::Tag;
        assert!(matches!(label_overlap(&insts(&["A"]), &t), Err(DiagError::MixedTasks)));
    }

    #[test]
    fn aggregate_is_mean_over_targets() {
        let s = insts(&["A", "B", "A", "C"]);
        let mut targets = BTreeMap::new();
        targets.insert("de".to_string(), insts(&["A", "B", "C", "C"]));
        targets.insert("zh".to_string(), insts(&["A", "X", "X", "X"]));
        let r = overlap_report(&s, &targets).unwrap();
        assert_eq!(r.per_target["de"], 0.75);
        assert_eq!(r.per_target["zh"], 0.25);
        assert_eq!(r.aggregate, 0.5);
    }
}
