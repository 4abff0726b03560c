use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lang::{Category, ConceptId, Family};
use super::SynthError;
use crate::seeding::{rng_for, splitmix64, STREAM_CORPUS};

pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 12;

/// A sentence in the latent interlingua, plus the positions of its
/// subject head, verb and object head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSentence {
    pub concepts: Vec<ConceptId>,
    pub categories: Vec<Category>,
    pub subject: usize,
    pub verb: usize,
    pub object: usize,
}

impl ConceptSentence {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Position of the first number, falling back to the first name.
    pub fn answer_position(&self) -> Option<usize> {
        self.categories
            .iter()
            .position(|c| *c == Category::Number)
            .or_else(|| self.categories.iter().position(|c| *c == Category::Name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// 80/10/10 by a stable hash of the sentence index.
    pub fn of_index(idx: usize) -> Self {
        match splitmix64(idx as u64) % 10 {
            0..=7 => Split::Train,
            8 => Split::Dev,
            _ => Split::Test,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Sentences rendered in every language of a family, aligned by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub family: Family,
    pub seed: u64,
    pub sentences: Vec<ConceptSentence>,
    /// `renderings[l][i]` is sentence `i` in `family.languages[l]`.
    pub renderings: Vec<Vec<String>>,
    pub splits: Vec<Split>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn rendering(&self, lang: &str, idx: usize) -> Option<&str> {
        let l = self.family.index_of(lang)?;
        self.renderings[l].get(idx).map(String::as_str)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Sentence indices grouped by length.
    pub fn by_length(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sentences.iter().enumerate() {
            groups.entry(s.len()).or_default().push(i);
        }
        groups
    }
}

const TOPIC_DIM: usize = 8;
/// Standard deviation of a concept's topic logit.
const TOPIC_SPREAD: f64 = 2.0;
const ZIPF_EXPONENT: f64 = 0.8;

/// Concepts of one category with their sampling statistics. Each concept
/// has a Zipfian base weight and a latent topic vector; a sentence draws a
/// topic and reweights every pool toward concepts aligned with it, so no two
/// concepts share a co-occurrence profile.
struct Pool {
    ids: Vec<ConceptId>,
    log_base: Vec<f64>,
    latent: Vec<[f64; TOPIC_DIM]>,
}

impl Pool {
    fn new<R: Rng>(rng: &mut R, ids: Vec<ConceptId>, topical: bool) -> Self {
        let scale = if topical {
            TOPIC_SPREAD / (TOPIC_DIM as f64).sqrt()
        } else {
            0.0
        };
        let latent = ids
            .iter()
            .map(|_| std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let log_base = (0..ids.len())
            .map(|r| {
                if topical {
                    -ZIPF_EXPONENT * ((r + 1) as f64).ln()
                } else {
                    0.0
                }
            })
            .collect();
        Pool { ids, log_base, latent }
    }

    fn pick<R: Rng>(&self, rng: &mut R, topic: &[f64; TOPIC_DIM]) -> ConceptId {
        let logits: Vec<f64> = self
            .latent
            .iter()
            .zip(&self.log_base)
            .map(|(z, b)| b + z.iter().zip(topic).map(|(a, t)| a * t).sum::<f64>())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let dist = WeightedIndex::new(&weights).expect("pool weights are positive and finite");
        self.ids[dist.sample(rng)]
    }
}

struct Pools {
    nouns: Pool,
    verbs: Pool,
    modifiers: Pool,
    numbers: Pool,
    names: Pool,
}

/// Subject-modifier-verb-object template:
/// `[mod{0,2}] head  verb [mod]  [num] [mod{0,2}] head  [tail: num|mod noun]`.
fn sample_sentence<R: Rng>(rng: &mut R, pools: &Pools) -> ConceptSentence {
    let topic: [f64; TOPIC_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let pick = |rng: &mut R, pool: &Pool| pool.pick(rng, &topic);
    let mut items: Vec<(ConceptId, Category)> = Vec::with_capacity(MAX_LEN);
    let head = |rng: &mut R| {
        if rng.random_bool(0.2) {
            (pick(rng, &pools.names), Category::Name)
        } else {
            (pick(rng, &pools.nouns), Category::Noun)
        }
    };
    for _ in 0..rng.random_range(0..=2) {
        items.push((pick(rng, &pools.modifiers), Category::Modifier));
    }
    let subject = items.len();
    items.push(head(rng));
    let verb = items.len();
    items.push((pick(rng, &pools.verbs), Category::Verb));
    if rng.random_bool(0.3) {
        items.push((pick(rng, &pools.modifiers), Category::Modifier));
    }
    if rng.random_bool(0.4) {
        items.push((pick(rng, &pools.numbers), Category::Number));
    }
    for _ in 0..rng.random_range(0..=2) {
        items.push((pick(rng, &pools.modifiers), Category::Modifier));
    }
    let object = items.len();
    items.push(head(rng));
    if rng.random_bool(0.5) {
        if rng.random_bool(0.5) {
            items.push((pick(rng, &pools.numbers), Category::Number));
        } else {
            items.push((pick(rng, &pools.modifiers), Category::Modifier));
        }
        items.push((pick(rng, &pools.nouns), Category::Noun));
    }
    let mut object = object;
    if !items.iter().any(|(_, c)| c.is_shared()) {
        items.insert(object, (pick(rng, &pools.numbers), Category::Number));
        object += 1;
    }
    while items.len() < MIN_LEN {
        items.insert(object, (pick(rng, &pools.modifiers), Category::Modifier));
        object += 1;
    }
    debug_assert!(items.len() <= MAX_LEN);
    let (concepts, categories) = items.into_iter().unzip();
    ConceptSentence {
        concepts,
        categories,
        subject,
        verb,
        object,
    }
}

/// Samples `n_sentences` interlingua sentences and renders each in every
/// language of `family`.
pub fn generate_parallel_corpus(family: &Family, n_sentences: usize, seed: u64) -> Result<ParallelCorpus, SynthError> {
    if n_sentences == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    let inv = &family.inventory;
    let mut stats_rng = rng_for(seed, STREAM_CORPUS, 1);
    let mut pool = |c: Category, topical: bool| Pool::new(&mut stats_rng, inv.ids_of(c), topical);
    let pools = Pools {
        nouns: pool(Category::Noun, true),
        verbs: pool(Category::Verb, true),
        modifiers: pool(Category::Modifier, true),
        numbers: pool(Category::Number, false),
        names: pool(Category::Name, true),
    };
    let mut rng = rng_for(seed, STREAM_CORPUS, 0);
    let sentences: Vec<ConceptSentence> = (0..n_sentences).map(|_| sample_sentence(&mut rng, &pools)).collect();
    let renderings = family
        .languages
        .iter()
        .map(|lang| {
            sentences
                .iter()
                .map(|s| lang.render(&s.concepts, &s.categories))
                .collect()
        })
        .collect();
    let splits = (0..n_sentences).map(Split::of_index).collect();
    Ok(ParallelCorpus {
        family: family.clone(),
        seed,
        sentences,
        renderings,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::super::lang::{make_family, LanguageParams, OrderRule};
    use super::*;

    fn family() -> Family {
        let p = |id: &str, a: u32, o: OrderRule| LanguageParams {
            lang_id: id.into(),
            alphabet_id: a,
            order_rule: o,
            lexical_overlap: 0.0,
        };
        make_family(
            7,
            200,
            &[
                p("en", 0, OrderRule::Identity),
                p("de", 1, OrderRule::VerbFinal),
                p("zh", 2, OrderRule::Reverse),
            ],
        )
        .unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let fam = family();
        let c = generate_parallel_corpus(&fam, 1000, 11).unwrap();
        assert_eq!(c.renderings.len(), 3);
        assert!(c.renderings.iter().all(|r| r.len() == 1000));
        let again = generate_parallel_corpus(&fam, 1000, 11).unwrap();
        assert_eq!(c.renderings, again.renderings);
        assert!(matches!(
            generate_parallel_corpus(&fam, 0, 1),
            Err(SynthError::EmptyCorpus)
        ));
    }

    #[test]
    fn reverse_order_reverses_identity_rendering() {
        let fam = family();
        let c = generate_parallel_corpus(&fam, 50, 3).unwrap();
        let en = &fam.languages[0];
        let zh = &fam.languages[2];
        for s in &c.sentences {
            let identity: Vec<&str> = s.concepts.iter().map(|&k| zh.surface(k)).collect();
            let reversed: Vec<&str> = identity.iter().rev().copied().collect();
            assert_eq!(zh.render(&s.concepts, &s.categories), reversed.join(" "));
            assert_eq!(
                en.render(&s.concepts, &s.categories),
                s.concepts.iter().map(|&k| en.surface(k)).collect::<Vec<_>>().join(" ")
            );
        }
    }

    #[test]
    fn grammar_invariants() {
        let fam = family();
        let c = generate_parallel_corpus(&fam, 2000, 5).unwrap();
        for s in &c.sentences {
            assert!((MIN_LEN..=MAX_LEN).contains(&s.len()), "len {}", s.len());
            assert_eq!(s.concepts.len(), s.categories.len());
            assert!(s.answer_position().is_some());
            assert_eq!(s.categories[s.verb], Category::Verb);
            assert!(s.categories[s.subject].is_entity());
            assert!(s.categories[s.object].is_entity());
        }
    }

    #[test]
    fn renderings_decode_to_the_same_sentence() {
        let fam = family();
        let c = generate_parallel_corpus(&fam, 200, 9).unwrap();
        for (l, lang) in fam.languages.iter().enumerate() {
            let inverse = lang.inverse();
            for (i, s) in c.sentences.iter().enumerate() {
                let decoded: Vec<ConceptId> = c.renderings[l][i].split(' ').map(|tok| inverse[tok]).collect();
                let perm = lang.order_rule.permutation(&s.categories);
                let expected: Vec<ConceptId> = perm.iter().map(|&p| s.concepts[p]).collect();
                assert_eq!(decoded, expected);
            }
        }
    }

    #[test]
    fn splits_are_roughly_80_10_10() {
        let counts = (0..10_000).fold([0usize; 3], |mut acc, i| {
            acc[Split::of_index(i) as usize] += 1;
            acc
        });
        assert!((7700..8300).contains(&counts[0]), "{counts:?}");
        assert!((800..1200).contains(&counts[1]), "{counts:?}");
        assert!((800..1200).contains(&counts[2]), "{counts:?}");
    }
}
