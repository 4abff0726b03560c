//! Synthetic language families, parallel corpora and text-to-text tasks.

mod corpus;
mod lang;
mod tasks;
mod vocab;

use thiserror::Error;

pub use corpus::{generate_parallel_corpus, ConceptSentence, ParallelCorpus, Split, MAX_LEN, MIN_LEN};
pub use lang::{
    alphabet_count, make_family, validate_params, Category, ConceptId, ConceptInventory, Family, LanguageParams,
    LanguageSpec, OrderRule, MIN_CONCEPTS, NO, YES,
};
pub use tasks::{
    cast_many, cast_to_text2text, continuation, gold_label, parse_tag_slots, strip_sentinels, GoldLabel,
    InstanceRecord, TaskInstance, TaskKind, TaskOptions,
};
pub use vocab::{
    build_vocab, decode_ids, encode_text, n_special, sentinel, Vocab, EOS, EOS_TOKEN, N_SENTINELS, PAD, PAD_TOKEN,
    PROMPT_TOKENS, RESERVED_TOKENS, SENTINEL_BASE, UNK, UNK_PLACEHOLDER, UNK_TOKEN,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("a family needs at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("invalid language id {0:?}")]
    InvalidLangId(String),
    #[error("duplicate language id {0:?}")]
    DuplicateLang(String),
    #[error("lexical_overlap for {lang} must lie in [0, 1], got {value}")]
    OverlapOutOfRange { lang: String, value: f64 },
    #[error("unknown alphabet {alphabet_id} for {lang}")]
    UnknownAlphabet { lang: String, alphabet_id: u32 },
    #[error("concept vocabulary of {0} is below the minimum of 50")]
    VocabTooSmall(usize),
    #[error("corpus must contain at least one sentence")]
    EmptyCorpus,
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("sentence {0} does not exist")]
    IndexOutOfRange(usize),
    #[error("sentence {0} has no number or name to extract")]
    NoSpanAnswer(usize),
}
