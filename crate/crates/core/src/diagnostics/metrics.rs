use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::synthlang::{parse_tag_slots, strip_sentinels, Family, TaskKind};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (beta = 1) over whitespace tokens; 0 when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Bag-of-tokens F1; two empty strings count as a match.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let prec = common as f64 / p.len() as f64;
    let rec = common as f64 / g.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

/// Headline value of a task metric; span extraction also reports exact match.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub value: f64,
    pub exact_match: Option<f64>,
}

/// Reduces a model output or target string to the form [`task_metric`] compares.
///
/// TAG keeps one tag per sentinel slot (`_` where none parses), PAIRCLS maps
/// the answer word of any family language to `true`/`false` (`none`
/// otherwise), and the other tasks drop sentinel tokens.
pub fn canonicalize(task: TaskKind, text: &str, family: &Family) -> String {
    match task {
        TaskKind::Tag => parse_tag_slots(text)
            .iter()
            .map(|s| s.map_or("_", |c| c.tag()))
            .collect::<Vec<_>>()
            .join(" "),
        TaskKind::Paircls => {
            let stripped = strip_sentinels(text);
            let word = stripped.split_whitespace().next().unwrap_or("");
            match family.answer_value(word) {
                Some(true) => "true".into(),
                Some(false) => "false".into(),
                None => "none".into(),
            }
        }
        _ => strip_sentinels(text),
    }
}

/// Scores canonicalized predictions against canonicalized golds.
///
/// TAG: token accuracy over gold slots. PAIRCLS: binary F1 with `true` as
/// the positive class. SPANX: token F1 (exact match alongside). GEN: mean ROUGE-L.
pub fn task_metric(task: TaskKind, predictions: &[String], golds: &[String]) -> Result<TaskScore, DiagError> {
    if predictions.len() != golds.len() {
        return Err(DiagError::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(DiagError::EmptyOutputs);
    }
    let n = golds.len() as f64;
    let pairs = predictions.iter().zip(golds);
    let score = match task {
        TaskKind::Tag => {
            let (mut right, mut total) = (0usize, 0usize);
            for (p, g) in pairs {
                let pt: Vec<&str> = p.split_whitespace().collect();
                for (i, gt) in g.split_whitespace().enumerate() {
                    total += 1;
                    if pt.get(i) == Some(&gt) {
                        right += 1;
                    }
                }
            }
            TaskScore {
                value: if total == 0 { 1.0 } else { right as f64 / total as f64 },
                exact_match: None,
            }
        }
        TaskKind::Paircls => {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (p, g) in pairs {
                match (p == "true", g == "true") {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let value = if tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            TaskScore {
                value,
                exact_match: None,
            }
        }
        TaskKind::Spanx => {
            let (mut f1, mut em) = (0.0, 0.0);
            for (p, g) in pairs {
                f1 += token_f1(p, g);
                em += f64::from(u8::from(p.split_whitespace().eq(g.split_whitespace())));
            }
            TaskScore {
                value: f1 / n,
                exact_match: Some(em / n),
            }
        }
        TaskKind::GenSum | TaskKind::GenTitle | TaskKind::GenStory => TaskScore {
            value: pairs.map(|(p, g)| rouge_l(p, g)).sum::<f64>() / n,
            exact_match: None,
        },
    };
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// All subsequences of `a`, by bitmask.
    fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
        let is_subseq = |sub: &[&str]| {
            let mut it = b.iter();
            sub.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&sub).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("", "a b"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(rouge_l("a b c d", "a c d e"), 0.75);
        assert_eq!(brute_lcs(&["a", "b", "c", "d"], &["a", "c", "d", "e"]), 3);
    }

    #[test]
    fn dp_lcs_matches_brute_force() {
        let words = ["a", "b", "c"];
        let mut rng = 12345u64;
        let mut next = || {
            rng = crate::seeding::splitmix64(rng);
            rng
        };
        for _ in 0..300 {
            let la = (next() % 10) as usize;
            let lb = (next() % 10) as usize;
            let a: Vec<&str> = (0..la).map(|_| words[(next() % 3) as usize]).collect();
            let b: Vec<&str> = (0..lb).map(|_| words[(next() % 3) as usize]).collect();
            assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let cases = [
            (TaskKind::Tag, s(&["NOUN VERB", "ADJ NOUN NUM"])),
            (TaskKind::Paircls, s(&["true", "false"])),
            (TaskKind::Spanx, s(&["12", "ab cd"])),
            (TaskKind::GenSum, s(&["x y", "z"])),
            (TaskKind::GenTitle, s(&["x"])),
            (TaskKind::GenStory, s(&["x y z"])),
        ];
        for (task, golds) in cases {
            let score = task_metric(task, &golds, &golds).unwrap();
            assert_eq!(score.value, 1.0, "{task}");
        }
    }

    #[test]
    fn paircls_f1_half() {
        let preds = s(&["true", "true", "false"]);
        let golds = s(&["true", "false", "true"]);
        assert_eq!(task_metric(TaskKind::Paircls, &preds, &golds).unwrap().value, 0.5);
        let unparsed = s(&["none"]);
        assert_eq!(
            task_metric(TaskKind::Paircls, &unparsed, &s(&["true"])).unwrap().value,
            0.0
        );
    }

    #[test]
    fn spanx_partial_overlap() {
        let score = task_metric(TaskKind::Spanx, &s(&["12"]), &s(&["12 34"])).unwrap();
        assert_eq!(score.exact_match, Some(0.0));
        assert!((score.value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tag_accuracy_counts_missing_slots_wrong() {
        let score = task_metric(TaskKind::Tag, &s(&["NOUN _"]), &s(&["NOUN VERB ADJ"])).unwrap();
        assert!((score.value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(task_metric(TaskKind::Tag, &s(&["a"]), &[]).is_err());
        assert!(matches!(
            task_metric(TaskKind::Tag, &[], &[]),
            Err(DiagError::EmptyOutputs)
        ));
    }
}
