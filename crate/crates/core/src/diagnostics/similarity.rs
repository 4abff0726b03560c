use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::model::{encode_batch, mean_pool, ModelError, ModelParams};
use crate::seeding::{rng_for, STREAM_PROBES};
use crate::synthlang::{ParallelCorpus, Split, Vocab, EOS};

pub const DEFAULT_PROBES: usize = 512;
const POOL_BATCH: usize = 64;

/// Mean cosine similarity between pooled encodings of parallel sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XLRSRecord {
    pub step: usize,
    pub source_lang: String,
    pub target_lang: String,
    pub value: f64,
    pub n_pairs: usize,
}

/// Test-split sentence indices shared by every XLRS measurement of an
/// experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub indices: Vec<usize>,
}

/// Up to `n_sample` test sentences, drawn without replacement.
pub fn sample_probes(corpus: &ParallelCorpus, n_sample: usize, seed: u64) -> ProbeSet {
    let mut pool = corpus.indices(Split::Test);
    pool.shuffle(&mut rng_for(seed, STREAM_PROBES, 0));
    pool.truncate(n_sample.max(1));
    pool.sort_unstable();
    ProbeSet { indices: pool }
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Final-layer mean-pooled encodings; `None` for sentences with no
/// unmasked position.
pub(crate) fn pooled(p: &ModelParams, seqs: &[Vec<usize>]) -> Result<Vec<Option<Vec<f64>>>, ModelError> {
    let layer = p.config().n_enc_layers;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(POOL_BATCH) {
        for es in encode_batch(p, chunk, layer)? {
            match mean_pool(&es) {
                Ok(v) => out.push(Some(v)),
                Err(ModelError::AllMasked) => out.push(None),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

fn probe_inputs(
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    lang: &str,
    probes: &ProbeSet,
) -> Result<Vec<Vec<usize>>, DiagError> {
    let l = corpus
        .family
        .index_of(lang)
        .ok_or_else(|| DiagError::UnknownLanguage(lang.to_string()))?;
    Ok(probes
        .indices
        .iter()
        .map(|&i| {
            let mut ids = vocab.encode(&corpus.renderings[l][i]);
            ids.push(EOS);
            ids
        })
        .collect())
}

/// XLRS between `source` and each of `targets`, encoding the source side once.
pub fn xlrs_many(
    p: &ModelParams,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    source: &str,
    targets: &[String],
    probes: &ProbeSet,
    step: usize,
) -> Result<Vec<XLRSRecord>, DiagError> {
    let src = pooled(p, &probe_inputs(vocab, corpus, source, probes)?)?;
    targets
        .iter()
        .map(|t| {
            let tgt = pooled(p, &probe_inputs(vocab, corpus, t, probes)?)?;
            let sims: Vec<f64> = src
                .iter()
                .zip(&tgt)
                .filter_map(|(a, b)| Some(cosine(a.as_ref()?, b.as_ref()?)))
                .collect();
            if sims.is_empty() {
                return Err(DiagError::NoPairs);
            }
            Ok(XLRSRecord {
                step,
                source_lang: source.to_string(),
                target_lang: t.clone(),
                value: sims.iter().sum::<f64>() / sims.len() as f64,
                n_pairs: sims.len(),
            })
        })
        .collect()
}

pub fn xlrs(
    p: &ModelParams,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    source: &str,
    target: &str,
    probes: &ProbeSet,
    step: usize,
) -> Result<XLRSRecord, DiagError> {
    let mut out = xlrs_many(p, vocab, corpus, source, &[target.to_string()], probes, step)?;
    Ok(out.pop().expect("one target"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, TransformerConfig};
    use crate::synthlang::{build_vocab, generate_parallel_corpus, make_family, LanguageParams, OrderRule};

    #[test]
    fn cosine_closed_forms() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    fn setup() -> (ParallelCorpus, Vocab, ModelParams) {
        let p = |id: &str, a: u32, ov: f64| LanguageParams {
            lang_id: id.into(),
            alphabet_id: a,
            order_rule: OrderRule::Identity,
            lexical_overlap: ov,
        };
        let fam = make_family(1, 60, &[p("en", 0, 0.0), p("same", 1, 1.0), p("zh", 2, 0.0)]).unwrap();
        let corpus = generate_parallel_corpus(&fam, 300, 1).unwrap();
        let vocab = build_vocab(&corpus);
        let mut cfg = TransformerConfig::toy(vocab.len());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        let params = init_params(&cfg, 0).unwrap();
        (corpus, vocab, params)
    }

    #[test]
    fn probes_are_capped_and_from_test_split() {
        let (corpus, _, _) = setup();
        let probes = sample_probes(&corpus, DEFAULT_PROBES, 3);
        let test = corpus.indices(Split::Test);
        assert_eq!(probes.indices.len(), test.len());
        let few = sample_probes(&corpus, 5, 3);
        assert_eq!(few.indices.len(), 5);
        assert!(few.indices.iter().all(|i| test.contains(i)));
        assert_eq!(few, sample_probes(&corpus, 5, 3));
    }

    #[test]
    fn identical_renderings_have_unit_similarity() {
        let (corpus, vocab, params) = setup();
        let probes = sample_probes(&corpus, 20, 0);
        let r = xlrs(&params, &vocab, &corpus, "en", "same", &probes, 0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
        assert_eq!(r.n_pairs, probes.indices.len());
        let other = xlrs(&params, &vocab, &corpus, "en", "zh", &probes, 0).unwrap();
        assert!((-1.0..1.0).contains(&other.value));
        assert!(xlrs(&params, &vocab, &corpus, "en", "xx", &probes, 0).is_err());
    }
}
