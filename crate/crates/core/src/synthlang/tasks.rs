//! Text-to-text casting of the four task families.
//!
//! Templates (tokens are space separated, `<k>` is `<extra_id_k>`):
//!
//! | task      | input                              | target                  |
//! |-----------|------------------------------------|-------------------------|
//! | TAG       | `<0> w0 <1> w1 ...`                | `<0> NOUN <1> VERB ...` |
//! | PAIRCLS   | `s1 <0> s2`                        | `<0> yes` / `<0> no`    |
//! | SPANX     | `number: s <0>` / `name: s <0>`    | `<0> answer`            |
//! | GEN_SUM   | `summarize: s <0>`                 | `<0> first k concepts`  |
//! | GEN_TITLE | `text: s title: <0>`               | `<0> title word`        |
//! | GEN_STORY | `story: s next: <0>`               | `<0> continuation`      |

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{ConceptSentence, ParallelCorpus};
use super::lang::{Category, ConceptId, LanguageSpec};
use super::vocab::sentinel;
use super::SynthError;
use crate::seeding::{derive_seed, rng_for, STREAM_TASKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Tag,
    Paircls,
    Spanx,
    GenSum,
    GenTitle,
    GenStory,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Tag,
        TaskKind::Paircls,
        TaskKind::Spanx,
        TaskKind::GenSum,
        TaskKind::GenTitle,
        TaskKind::GenStory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Tag => "TAG",
            TaskKind::Paircls => "PAIRCLS",
            TaskKind::Spanx => "SPANX",
            TaskKind::GenSum => "GEN_SUM",
            TaskKind::GenTitle => "GEN_TITLE",
            TaskKind::GenStory => "GEN_STORY",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, TaskKind::GenSum | TaskKind::GenTitle | TaskKind::GenStory)
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Tag | TaskKind::Paircls)
    }

    fn stream_index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| SynthError::UnknownTask(s.to_string()))
    }
}

/// Canonical label used for cross-lingual label overlap.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldLabel {
    /// Tags in concept (interlingua) order, so they are language independent.
    Tags(Vec<Category>),
    Bool(bool),
    Text(String),
}

impl fmt::Display for GoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoldLabel::Tags(tags) => {
                let t: Vec<&str> = tags.iter().map(|c| c.tag()).collect();
                f.write_str(&t.join(" "))
            }
            GoldLabel::Bool(b) => write!(f, "{b}"),
            GoldLabel::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input_text: String,
    pub target_text: String,
    pub task: TaskKind,
    pub lang: String,
    pub gold: GoldLabel,
    pub idx: usize,
}

pub fn gold_label(inst: &TaskInstance) -> &GoldLabel {
    &inst.gold
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    /// Number of leading concepts a GEN_SUM summary keeps.
    pub summary_len: usize,
    pub seed: u64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            summary_len: 3,
            seed: 0,
        }
    }
}

fn render_subset(lang: &LanguageSpec, sent: &ConceptSentence, positions: &[usize]) -> String {
    let concepts: Vec<ConceptId> = positions.iter().map(|&p| sent.concepts[p]).collect();
    let cats: Vec<Category> = positions.iter().map(|&p| sent.categories[p]).collect();
    lang.render(&concepts, &cats)
}

/// Title concept: the most frequent content concept; ties prefer nouns,
/// then the earliest position.
fn title_position(sent: &ConceptSentence) -> usize {
    let mut best: Option<(usize, bool, usize)> = None;
    for (p, (&c, &cat)) in sent.concepts.iter().zip(&sent.categories).enumerate() {
        if !cat.is_content() {
            continue;
        }
        let freq = sent.concepts.iter().filter(|&&x| x == c).count();
        let noun = cat == Category::Noun;
        let better = match best {
            None => true,
            Some((bf, bn, _)) => (freq, noun) > (bf, bn),
        };
        if better {
            best = Some((freq, noun, p));
        }
    }
    best.map(|b| b.2).unwrap_or(sent.subject)
}

/// The grammar's deterministic next sentence: the object becomes the
/// subject of the verb's successor, acting on the old subject.
pub fn continuation(corpus: &ParallelCorpus, sent: &ConceptSentence) -> (Vec<ConceptId>, Vec<Category>) {
    let inv = &corpus.family.inventory;
    let verbs = inv.ids_of(Category::Verb);
    let v = sent.concepts[sent.verb];
    let k = verbs.iter().position(|&x| x == v).expect("verb concept");
    let next_verb = verbs[(k + 1) % verbs.len()];
    let concepts = vec![sent.concepts[sent.object], next_verb, sent.concepts[sent.subject]];
    let categories = vec![
        sent.categories[sent.object],
        Category::Verb,
        sent.categories[sent.subject],
    ];
    (concepts, categories)
}

/// Casts sentence `idx` of `corpus` into a `task` instance in language `lang`.
///
/// Random choices (the PAIRCLS partner) depend only on `(opts.seed, task, idx)`
/// so instances built from the same index in different languages are parallel.
pub fn cast_to_text2text(
    corpus: &ParallelCorpus,
    idx: usize,
    task: TaskKind,
    lang: &str,
    opts: &TaskOptions,
) -> Result<TaskInstance, SynthError> {
    let spec = corpus
        .family
        .language(lang)
        .ok_or_else(|| SynthError::UnknownLanguage(lang.to_string()))?;
    let sent = corpus.sentences.get(idx).ok_or(SynthError::IndexOutOfRange(idx))?;
    let s0 = sentinel(0);
    let rendered = spec.render(&sent.concepts, &sent.categories);
    let (input_text, target_text, gold) = match task {
        TaskKind::Tag => {
            let perm = spec.order_rule.permutation(&sent.categories);
            let mut input = Vec::with_capacity(2 * perm.len());
            let mut target = Vec::with_capacity(2 * perm.len());
            for (k, &p) in perm.iter().enumerate() {
                let s = sentinel(k);
                input.push(s.clone());
                input.push(spec.surface(sent.concepts[p]).to_string());
                target.push(s);
                target.push(sent.categories[p].tag().to_string());
            }
            (
                input.join(" "),
                target.join(" "),
                GoldLabel::Tags(sent.categories.clone()),
            )
        }
        TaskKind::Paircls => {
            let mut rng = rng_for(
                derive_seed(opts.seed, STREAM_TASKS, task.stream_index()),
                STREAM_TASKS,
                idx as u64,
            );
            let positive = rng.random_bool(0.5);
            let partner = if positive {
                let mut order: Vec<usize> = (0..sent.len()).collect();
                order.shuffle(&mut rng);
                render_subset(spec, sent, &order)
            } else {
                let same_len: Vec<usize> = corpus
                    .by_length()
                    .remove(&sent.len())
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|&j| j != idx)
                    .collect();
                let j = if same_len.is_empty() {
                    (idx + 1 + rng.random_range(0..corpus.len().max(2) - 1)) % corpus.len()
                } else {
                    same_len[rng.random_range(0..same_len.len())]
                };
                let other = &corpus.sentences[j];
                spec.render(&other.concepts, &other.categories)
            };
            let word = if positive { spec.yes_word() } else { spec.no_word() };
            (
                format!("{rendered} {s0} {partner}"),
                format!("{s0} {word}"),
                GoldLabel::Bool(positive),
            )
        }
        TaskKind::Spanx => {
            let p = sent.answer_position().ok_or(SynthError::NoSpanAnswer(idx))?;
            let prompt = match sent.categories[p] {
                Category::Number => "number:",
                _ => "name:",
            };
            let answer = spec.surface(sent.concepts[p]).to_string();
            (
                format!("{prompt} {rendered} {s0}"),
                format!("{s0} {answer}"),
                GoldLabel::Text(answer),
            )
        }
        TaskKind::GenSum => {
            let k = opts.summary_len.clamp(1, sent.len());
            let positions: Vec<usize> = (0..k).collect();
            let summary = render_subset(spec, sent, &positions);
            (
                format!("summarize: {rendered} {s0}"),
                format!("{s0} {summary}"),
                GoldLabel::Text(summary),
            )
        }
        TaskKind::GenTitle => {
            let title = spec.surface(sent.concepts[title_position(sent)]).to_string();
            (
                format!("text: {rendered} title: {s0}"),
                format!("{s0} {title}"),
                GoldLabel::Text(title),
            )
        }
        TaskKind::GenStory => {
            let (concepts, cats) = continuation(corpus, sent);
            let next = spec.render(&concepts, &cats);
            (
                format!("story: {rendered} next: {s0}"),
                format!("{s0} {next}"),
                GoldLabel::Text(next),
            )
        }
    };
    Ok(TaskInstance {
        input_text,
        target_text,
        task,
        lang: lang.to_string(),
        gold,
        idx,
    })
}

/// Casts every index in `indices`, collecting skipped ones separately.
pub fn cast_many(
    corpus: &ParallelCorpus,
    indices: &[usize],
    task: TaskKind,
    lang: &str,
    opts: &TaskOptions,
) -> Result<(Vec<TaskInstance>, Vec<usize>), SynthError> {
    let mut out = Vec::with_capacity(indices.len());
    let mut skipped = Vec::new();
    for &i in indices {
        match cast_to_text2text(corpus, i, task, lang, opts) {
            Ok(inst) => out.push(inst),
            Err(SynthError::NoSpanAnswer(i)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

/// One line of the corpus JSONL export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub task: TaskKind,
    pub lang: String,
    pub input: String,
    pub target: String,
    pub gold: String,
    pub split: String,
    pub idx: usize,
}

impl InstanceRecord {
    pub fn new(inst: &TaskInstance, corpus: &ParallelCorpus) -> Self {
        Self {
            task: inst.task,
            lang: inst.lang.clone(),
            input: inst.input_text.clone(),
            target: inst.target_text.clone(),
            gold: inst.gold.to_string(),
            split: corpus.splits[inst.idx].as_str().to_string(),
            idx: inst.idx,
        }
    }
}

/// Removes sentinel tokens from a target or prediction.
pub fn strip_sentinels(text: &str) -> String {
    text.split_whitespace()
        .filter(|t| !(t.starts_with("<extra_id_") && t.ends_with('>')))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tag following each `<extra_id_k>` in a TAG target or prediction, indexed by `k`.
pub fn parse_tag_slots(text: &str) -> Vec<Option<Category>> {
    let mut slots: Vec<Option<Category>> = Vec::new();
    let toks: Vec<&str> = text.split_whitespace().collect();
    for (i, t) in toks.iter().enumerate() {
        let Some(k) = t
            .strip_prefix("<extra_id_")
            .and_then(|r| r.strip_suffix('>'))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if k >= slots.len() {
            slots.resize(k + 1, None);
        }
        if slots[k].is_none() {
            slots[k] = toks.get(i + 1).and_then(|tag| Category::from_tag(tag));
        }
    }
    slots
}

#[cfg(test)]
mod tests {
    use super::super::corpus::generate_parallel_corpus;
    use super::super::lang::{make_family, LanguageParams, OrderRule};
    use super::*;

    fn corpus() -> ParallelCorpus {
        let p = |id: &str, a: u32, o| LanguageParams {
            lang_id: id.into(),
            alphabet_id: a,
            order_rule: o,
            lexical_overlap: 0.0,
        };
        let fam = make_family(
            7,
            200,
            &[p("en", 0, OrderRule::Identity), p("zh", 1, OrderRule::Reverse)],
        )
        .unwrap();
        generate_parallel_corpus(&fam, 400, 1).unwrap()
    }

    fn count_sentinels(s: &str) -> usize {
        s.split_whitespace().filter(|t| t.starts_with("<extra_id_")).count()
    }

    #[test]
    fn tag_template_shape() {
        let c = corpus();
        let opts = TaskOptions::default();
        for idx in 0..50 {
            for lang in ["en", "zh"] {
                let inst = cast_to_text2text(&c, idx, TaskKind::Tag, lang, &opts).unwrap();
                let n = c.sentences[idx].len();
                assert_eq!(count_sentinels(&inst.input_text), n);
                assert_eq!(count_sentinels(&inst.target_text), n);
                let slots = parse_tag_slots(&inst.target_text);
                assert_eq!(slots.len(), n);
                assert!(slots.iter().all(Option::is_some));
            }
        }
    }

    #[test]
    fn three_word_tag_example() {
        let c = corpus();
        let mut c3 = c.clone();
        let sent = &mut c3.sentences[0];
        sent.concepts.truncate(3);
        sent.categories.truncate(3);
        let inst = cast_to_text2text(&c3, 0, TaskKind::Tag, "en", &TaskOptions::default()).unwrap();
        assert_eq!(count_sentinels(&inst.input_text), 3);
        assert_eq!(inst.target_text.split_whitespace().count(), 6);
    }

    #[test]
    fn paircls_targets_follow_gold() {
        let c = corpus();
        let opts = TaskOptions {
            summary_len: 3,
            seed: 4,
        };
        let mut seen = [false, false];
        for idx in 0..100 {
            let en = cast_to_text2text(&c, idx, TaskKind::Paircls, "en", &opts).unwrap();
            let zh = cast_to_text2text(&c, idx, TaskKind::Paircls, "zh", &opts).unwrap();
            assert_eq!(en.gold, zh.gold);
            let GoldLabel::Bool(pos) = en.gold else { panic!() };
            seen[pos as usize] = true;
            let word = if pos {
                c.family.languages[0].yes_word()
            } else {
                c.family.languages[0].no_word()
            };
            assert_eq!(en.target_text, format!("<extra_id_0> {word}"));
            assert_eq!(c.family.answer_value(word), Some(pos));
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn gen_sum_keeps_leading_concepts() {
        let c = corpus();
        let opts = TaskOptions {
            summary_len: 2,
            seed: 0,
        };
        let s = &c.sentences[3];
        let en = &c.family.languages[0];
        let inst = cast_to_text2text(&c, 3, TaskKind::GenSum, "en", &opts).unwrap();
        let expected = format!("{} {}", en.surface(s.concepts[0]), en.surface(s.concepts[1]));
        assert_eq!(inst.gold, GoldLabel::Text(expected.clone()));
        assert_eq!(inst.target_text, format!("<extra_id_0> {expected}"));
    }

    #[test]
    fn span_answers_are_shared_across_languages() {
        let c = corpus();
        let opts = TaskOptions::default();
        for idx in 0..100 {
            let en = cast_to_text2text(&c, idx, TaskKind::Spanx, "en", &opts).unwrap();
            let zh = cast_to_text2text(&c, idx, TaskKind::Spanx, "zh", &opts).unwrap();
            assert_eq!(en.gold, zh.gold);
        }
    }

    #[test]
    fn spanx_without_entity_is_skipped() {
        let mut c = corpus();
        let s = &mut c.sentences[0];
        for (k, cat) in s.categories.iter_mut().enumerate() {
            if cat.is_shared() {
                *cat = Category::Noun;
                s.concepts[k] = c.family.inventory.ids_of(Category::Noun)[0];
            }
        }
        let (kept, skipped) = cast_many(&c, &[0, 1], TaskKind::Spanx, "en", &TaskOptions::default()).unwrap();
        assert_eq!(skipped, vec![0]);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn generation_labels_differ_across_disjoint_alphabets() {
        let c = corpus();
        let opts = TaskOptions::default();
        for task in [TaskKind::GenSum, TaskKind::GenTitle, TaskKind::GenStory] {
            let same = (0..100)
                .filter(|&i| {
                    let en = cast_to_text2text(&c, i, task, "en", &opts).unwrap();
                    let zh = cast_to_text2text(&c, i, task, "zh", &opts).unwrap();
                    en.gold == zh.gold
                })
                .count();
            assert!(same <= 2, "{task}: {same}");
        }
    }

    #[test]
    fn all_instances_are_nonempty() {
        let c = corpus();
        let opts = TaskOptions::default();
        for task in TaskKind::ALL {
            for idx in 0..40 {
                let inst = cast_to_text2text(&c, idx, task, "zh", &opts).unwrap();
                assert!(!inst.input_text.is_empty() && !inst.target_text.is_empty());
            }
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(t.as_str().parse::<TaskKind>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert!("FOO".parse::<TaskKind>().is_err());
    }

    #[test]
    fn strip_sentinels_removes_only_sentinels() {
        assert_eq!(strip_sentinels("<extra_id_0> ab cd <extra_id_12>"), "ab cd");
    }
}
