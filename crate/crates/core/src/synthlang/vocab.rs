use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::corpus::ParallelCorpus;
use super::lang::Category;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SENTINEL_BASE: usize = 3;
pub const N_SENTINELS: usize = 100;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
/// How an unknown id is rendered by [`Vocab::decode`].
pub const UNK_PLACEHOLDER: &str = "⟨unk⟩";

/// Prompt words used by the text-to-text templates.
pub const PROMPT_TOKENS: [&str; 7] = ["number:", "name:", "summarize:", "text:", "title:", "story:", "next:"];

/// Template and tag tokens that generated surface forms must avoid.
pub const RESERVED_TOKENS: [&str; 13] = [
    "number:",
    "name:",
    "summarize:",
    "text:",
    "title:",
    "story:",
    "next:",
    "NOUN",
    "VERB",
    "ADJ",
    "NUM",
    "PROPN",
    "ANS",
];

pub fn sentinel(k: usize) -> String {
    format!("<extra_id_{k}>")
}

/// Joint token inventory over every language of a corpus.
///
/// Ids `0..n_special()` are fixed: pad, eos, unk, the sentinels, prompt
/// words and tag names. Corpus surface tokens follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_chars: usize,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let max_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Self {
            tokens,
            index,
            max_chars,
        }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

fn special_tokens() -> Vec<String> {
    let mut t = vec![PAD_TOKEN.to_string(), EOS_TOKEN.into(), UNK_TOKEN.into()];
    t.extend((0..N_SENTINELS).map(sentinel));
    t.extend(PROMPT_TOKENS.iter().map(|s| s.to_string()));
    t.extend(Category::TAGGABLE.iter().map(|c| c.tag().to_string()));
    t
}

pub fn n_special() -> usize {
    3 + N_SENTINELS + PROMPT_TOKENS.len() + Category::TAGGABLE.len()
}

/// Every surface token of the corpus (renderings plus each language's
/// yes/no words) gets an id after the special block.
pub fn build_vocab(corpus: &ParallelCorpus) -> Vocab {
    let mut surface: BTreeSet<&str> = BTreeSet::new();
    for lang in &corpus.renderings {
        for s in lang {
            surface.extend(s.split_whitespace());
        }
    }
    for lang in &corpus.family.languages {
        surface.insert(lang.yes_word());
        surface.insert(lang.no_word());
    }
    let specials = special_tokens();
    let mut tokens = specials.clone();
    tokens.extend(
        surface
            .into_iter()
            .filter(|t| !specials.iter().any(|s| s == t))
            .map(String::from),
    );
    Vocab::from(tokens)
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn sentinel_id(&self, k: usize) -> usize {
        assert!(k < N_SENTINELS, "sentinel {k} out of range");
        SENTINEL_BASE + k
    }

    pub fn is_sentinel(&self, id: usize) -> bool {
        (SENTINEL_BASE..SENTINEL_BASE + N_SENTINELS).contains(&id)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization; a chunk that is not a vocabulary entry is
    /// segmented by greedy longest match, and each maximal run of
    /// unmatched characters becomes a single unknown id.
    pub fn encode(&self, s: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in s.split_whitespace() {
            if let Some(id) = self.id(chunk) {
                ids.push(id);
                continue;
            }
            let chars: Vec<(usize, char)> = chunk.char_indices().collect();
            let mut pos = 0;
            let mut in_unknown = false;
            while pos < chars.len() {
                let start = chars[pos].0;
                let longest = (1..=self.max_chars.min(chars.len() - pos)).rev().find_map(|n| {
                    let end = chars.get(pos + n).map_or(chunk.len(), |c| c.0);
                    self.id(&chunk[start..end]).map(|id| (n, id))
                });
                match longest {
                    Some((n, id)) => {
                        ids.push(id);
                        pos += n;
                        in_unknown = false;
                    }
                    None => {
                        if !in_unknown {
                            ids.push(UNK);
                            in_unknown = true;
                        }
                        pos += 1;
                    }
                }
            }
        }
        ids
    }

    /// Joins tokens with single spaces; pads and eos are dropped and unknown
    /// ids render as [`UNK_PLACEHOLDER`].
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != EOS)
            .map(|&id| match id {
                UNK => UNK_PLACEHOLDER,
                _ => self.token(id).unwrap_or(UNK_PLACEHOLDER),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn encode_text(v: &Vocab, s: &str) -> Vec<usize> {
    v.encode(s)
}

pub fn decode_ids(v: &Vocab, ids: &[usize]) -> String {
    v.decode(ids)
}
