use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::RESERVED_TOKENS;
use super::SynthError;
use crate::seeding::{rng_for, STREAM_FAMILY};

pub type ConceptId = usize;

/// Grammatical role of a concept. `Answer` covers the yes/no words used by
/// pair classification and never occurs inside sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Noun,
    Verb,
    Modifier,
    Number,
    Name,
    Answer,
}

impl Category {
    pub const TAGGABLE: [Category; 5] = [
        Category::Noun,
        Category::Verb,
        Category::Modifier,
        Category::Number,
        Category::Name,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Category::Noun => "NOUN",
            Category::Verb => "VERB",
            Category::Modifier => "ADJ",
            Category::Number => "NUM",
            Category::Name => "PROPN",
            Category::Answer => "ANS",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::TAGGABLE.into_iter().find(|c| c.tag() == tag)
    }

    /// Numbers and names share one surface form across the whole family.
    pub fn is_shared(self) -> bool {
        matches!(self, Category::Number | Category::Name)
    }

    pub fn is_content(self) -> bool {
        matches!(self, Category::Noun | Category::Verb | Category::Modifier)
    }

    pub fn is_entity(self) -> bool {
        matches!(self, Category::Noun | Category::Name)
    }
}

/// The latent concept vocabulary every language of a family renders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptInventory {
    categories: Vec<Category>,
}

pub const YES: ConceptId = 0;
pub const NO: ConceptId = 1;
pub const MIN_CONCEPTS: usize = 50;

impl ConceptInventory {
    /// Layout: yes, no, numbers, names, nouns, verbs, modifiers.
    pub fn new(size: usize) -> Result<Self, SynthError> {
        if size < MIN_CONCEPTS {
            return Err(SynthError::VocabTooSmall(size));
        }
        let numbers = size / 20;
        let names = size / 20;
        let verbs = size / 5;
        let modifiers = size / 4;
        let nouns = size - 2 - numbers - names - verbs - modifiers;
        let mut categories = vec![Category::Answer, Category::Answer];
        for (cat, n) in [
            (Category::Number, numbers),
            (Category::Name, names),
            (Category::Noun, nouns),
            (Category::Verb, verbs),
            (Category::Modifier, modifiers),
        ] {
            categories.extend(std::iter::repeat_n(cat, n));
        }
        Ok(Self { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn category(&self, id: ConceptId) -> Category {
        self.categories[id]
    }

    pub fn ids_of(&self, cat: Category) -> Vec<ConceptId> {
        (0..self.len()).filter(|&i| self.categories[i] == cat).collect()
    }
}

/// Word-order permutation applied to a concept sequence before rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRule {
    Identity,
    /// The first verb moves to the end of the sentence.
    VerbFinal,
    Reverse,
}

impl OrderRule {
    /// `perm[p]` is the concept position shown at surface position `p`.
    pub fn permutation(self, categories: &[Category]) -> Vec<usize> {
        let n = categories.len();
        match self {
            OrderRule::Identity => (0..n).collect(),
            OrderRule::Reverse => (0..n).rev().collect(),
            OrderRule::VerbFinal => match categories.iter().position(|c| *c == Category::Verb) {
                Some(v) => (0..n).filter(|&i| i != v).chain(std::iter::once(v)).collect(),
                None => (0..n).collect(),
            },
        }
    }
}

/// User-facing parameters for one language of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageParams {
    pub lang_id: String,
    pub alphabet_id: u32,
    pub order_rule: OrderRule,
    pub lexical_overlap: f64,
}

const ALPHABETS: [&str; 8] = [
    "abcdefghijklmnopqrstuvwxyz",
    "αβγδεζηθικλμνξοπρστυφχψω",
    "абвгдежзиклмнопрстуфхцчшщ",
    "աբգդեզէըթժիլխծկհձղճմյնշոչպջռսվտրցւփքօֆ",
    "აბგდევზთიკლმნოპჟრსტუფქღყშჩცძწჭხჯჰ",
    "אבגדהוזחטיכלמנסעפצקרשת",
    "कखगघचछजझटठडढणतथदधनपफबभमयरलवशसह",
    "アイウエオカキクケコサシスセソタチツテトナニヌネノハヒフヘホマミムメモヤユヨラリルレロワ",
];
const NUMERAL_ALPHABET: &str = "0123456789";
const NAME_ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

pub fn alphabet_count() -> usize {
    ALPHABETS.len()
}

/// One synthetic language: a cipher from concepts to surface tokens plus a
/// word-order rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang_id: String,
    pub alphabet_id: u32,
    pub order_rule: OrderRule,
    pub lexical_overlap: f64,
    /// Surface form of each concept id.
    pub cipher: Vec<String>,
}

impl LanguageSpec {
    pub fn surface(&self, id: ConceptId) -> &str {
        &self.cipher[id]
    }

    pub fn yes_word(&self) -> &str {
        &self.cipher[YES]
    }

    pub fn no_word(&self) -> &str {
        &self.cipher[NO]
    }

    /// Renders a concept sequence in this language's word order.
    pub fn render(&self, concepts: &[ConceptId], categories: &[Category]) -> String {
        self.order_rule
            .permutation(categories)
            .into_iter()
            .map(|p| self.surface(concepts[p]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn inverse(&self) -> HashMap<&str, ConceptId> {
        self.cipher.iter().enumerate().map(|(id, s)| (s.as_str(), id)).collect()
    }
}

/// A family of languages over one concept inventory. The first language is
/// the reference that `lexical_overlap` is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub seed: u64,
    pub inventory: ConceptInventory,
    pub languages: Vec<LanguageSpec>,
}

impl Family {
    pub fn language(&self, lang_id: &str) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.lang_id == lang_id)
    }

    pub fn index_of(&self, lang_id: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.lang_id == lang_id)
    }

    pub fn lang_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.lang_id.clone()).collect()
    }

    /// Maps a yes/no word of any language to its truth value.
    pub fn answer_value(&self, word: &str) -> Option<bool> {
        self.languages.iter().find_map(|l| {
            if l.yes_word() == word {
                Some(true)
            } else if l.no_word() == word {
                Some(false)
            } else {
                None
            }
        })
    }
}

fn random_form<R: Rng>(rng: &mut R, alphabet: &[char], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

fn fresh_form<R: Rng>(rng: &mut R, alphabet: &[char], min: usize, max: usize, used: &mut HashSet<String>) -> String {
    loop {
        let s = random_form(rng, alphabet, min, max);
        if !RESERVED_TOKENS.contains(&s.as_str()) && used.insert(s.clone()) {
            return s;
        }
    }
}

pub fn validate_params(specs: &[LanguageParams]) -> Vec<SynthError> {
    let mut errors = Vec::new();
    if specs.len() < 2 {
        errors.push(SynthError::TooFewLanguages(specs.len()));
    }
    let mut seen = BTreeSet::new();
    for spec in specs {
        if spec.lang_id.is_empty() || spec.lang_id.contains(char::is_whitespace) {
            errors.push(SynthError::InvalidLangId(spec.lang_id.clone()));
        }
        if !seen.insert(spec.lang_id.as_str()) {
            errors.push(SynthError::DuplicateLang(spec.lang_id.clone()));
        }
        if !(0.0..=1.0).contains(&spec.lexical_overlap) {
            errors.push(SynthError::OverlapOutOfRange {
                lang: spec.lang_id.clone(),
                value: spec.lexical_overlap,
            });
        }
        if spec.alphabet_id as usize >= ALPHABETS.len() {
            errors.push(SynthError::UnknownAlphabet {
                lang: spec.lang_id.clone(),
                alphabet_id: spec.alphabet_id,
            });
        }
    }
    errors
}

/// Builds a deterministic language family from `seed`.
pub fn make_family(seed: u64, concept_vocab: usize, specs: &[LanguageParams]) -> Result<Family, SynthError> {
    if let Some(e) = validate_params(specs).into_iter().next() {
        return Err(e);
    }
    let inventory = ConceptInventory::new(concept_vocab)?;
    let mut rng = rng_for(seed, STREAM_FAMILY, 0);
    let mut used: HashSet<String> = HashSet::new();

    let numerals: Vec<char> = NUMERAL_ALPHABET.chars().collect();
    let names: Vec<char> = NAME_ALPHABET.chars().collect();
    let mut shared: HashMap<ConceptId, String> = HashMap::new();
    for id in 0..inventory.len() {
        match inventory.category(id) {
            Category::Number => {
                shared.insert(id, fresh_form(&mut rng, &numerals, 2, 3, &mut used));
            }
            Category::Name => {
                shared.insert(id, fresh_form(&mut rng, &names, 3, 4, &mut used));
            }
            _ => {}
        }
    }

    let own_ids: Vec<ConceptId> = (0..inventory.len())
        .filter(|&id| !inventory.category(id).is_shared())
        .collect();
    let mut languages: Vec<LanguageSpec> = Vec::with_capacity(specs.len());
    for (li, spec) in specs.iter().enumerate() {
        let alphabet: Vec<char> = ALPHABETS[spec.alphabet_id as usize].chars().collect();
        let mut borrowed = HashSet::new();
        if li > 0 {
            let mut pool = own_ids.clone();
            pool.shuffle(&mut rng);
            let k = (spec.lexical_overlap * own_ids.len() as f64).round() as usize;
            borrowed.extend(pool.into_iter().take(k));
        }
        let cipher = (0..inventory.len())
            .map(|id| {
                if let Some(s) = shared.get(&id) {
                    s.clone()
                } else if borrowed.contains(&id) {
                    languages[0].cipher[id].clone()
                } else {
                    fresh_form(&mut rng, &alphabet, 2, 4, &mut used)
                }
            })
            .collect();
        languages.push(LanguageSpec {
            lang_id: spec.lang_id.clone(),
            alphabet_id: spec.alphabet_id,
            order_rule: spec.order_rule,
            lexical_overlap: spec.lexical_overlap,
            cipher,
        });
    }
    Ok(Family {
        seed,
        inventory,
        languages,
    })
}
