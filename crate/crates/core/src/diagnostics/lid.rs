use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::synthlang::{strip_sentinels, ParallelCorpus, Split};

const MIN_SENTENCES: usize = 100;
const SMOOTHING: f64 = 0.5;

/// Additive-smoothed character n-gram model per language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidModel {
    pub order: usize,
    pub smoothing: f64,
    langs: Vec<String>,
    log_probs: Vec<HashMap<String, f64>>,
    unseen: Vec<f64>,
}

fn ngrams(s: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    if n == 0 || chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Trains on each language's train-split renderings.
pub fn train_lid(corpus: &ParallelCorpus, n: usize) -> Result<LidModel, DiagError> {
    let train = corpus.indices(Split::Train);
    let langs = corpus.family.lang_ids();
    if train.len() < MIN_SENTENCES {
        return Err(DiagError::TooFewSentences {
            lang: langs[0].clone(),
            got: train.len(),
            min: MIN_SENTENCES,
        });
    }
    let counts: Vec<HashMap<String, usize>> = corpus
        .renderings
        .iter()
        .map(|r| {
            let mut c = HashMap::new();
            for &i in &train {
                for g in ngrams(&r[i], n) {
                    *c.entry(g).or_default() += 1;
                }
            }
            c
        })
        .collect();
    let support: BTreeSet<&String> = counts.iter().flat_map(|c| c.keys()).collect();
    let g = (support.len() + 1) as f64;
    let mut log_probs = Vec::with_capacity(counts.len());
    let mut unseen = Vec::with_capacity(counts.len());
    for c in &counts {
        let total = c.values().sum::<usize>() as f64 + SMOOTHING * g;
        log_probs.push(
            c.iter()
                .map(|(k, &v)| (k.clone(), ((v as f64 + SMOOTHING) / total).ln()))
                .collect(),
        );
        unseen.push((SMOOTHING / total).ln());
    }
    Ok(LidModel {
        order: n,
        smoothing: SMOOTHING,
        langs,
        log_probs,
        unseen,
    })
}

impl LidModel {
    pub fn languages(&self) -> &[String] {
        &self.langs
    }

    pub fn log_likelihoods(&self, text: &str) -> Vec<f64> {
        let grams = ngrams(text, self.order);
        self.log_probs
            .iter()
            .zip(&self.unseen)
            .map(|(table, &u)| grams.iter().map(|g| table.get(g).copied().unwrap_or(u)).sum())
            .collect()
    }

    /// Softmax over per-language log-likelihoods; uniform without evidence.
    pub fn confidences(&self, text: &str) -> Vec<f64> {
        let ll = self.log_likelihoods(text);
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = ll.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    /// Most likely language; `None` when the text has no n-grams.
    pub fn predict(&self, text: &str) -> Option<&str> {
        if ngrams(text, self.order).is_empty() {
            return None;
        }
        let ll = self.log_likelihoods(text);
        let mut best = 0;
        for (i, &v) in ll.iter().enumerate() {
            if v > ll[best] {
                best = i;
            }
        }
        Some(&self.langs[best])
    }

    fn index(&self, lang: &str) -> Result<usize, DiagError> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| DiagError::UnknownLanguage(lang.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub n: usize,
    /// Fraction of outputs not identified as the expected language.
    pub rate: f64,
    pub mean_conf_expected: f64,
    pub mean_conf_source: Option<f64>,
}

/// Wrong-language rate of generated outputs. Sentinels are ignored, and an
/// output with no identifiable text counts as wrong-language.
pub fn accidental_translation_rate(
    lid: &LidModel,
    outputs: &[String],
    expected: &str,
    source: Option<&str>,
) -> Result<TranslationReport, DiagError> {
    if outputs.is_empty() {
        return Err(DiagError::EmptyOutputs);
    }
    let e = lid.index(expected)?;
    let s = source.map(|s| lid.index(s)).transpose()?;
    let mut wrong = 0usize;
    let mut conf_e = 0.0;
    let mut conf_s = 0.0;
    for out in outputs {
        let text = strip_sentinels(out);
        if lid.predict(&text) != Some(expected) {
            wrong += 1;
        }
        let c = lid.confidences(&text);
        conf_e += c[e];
        if let Some(s) = s {
            conf_s += c[s];
        }
    }
    let n = outputs.len() as f64;
    Ok(TranslationReport {
        n: outputs.len(),
        rate: wrong as f64 / n,
        mean_conf_expected: conf_e / n,
        mean_conf_source: s.map(|_| conf_s / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{generate_parallel_corpus, make_family, LanguageParams, OrderRule};

    fn corpus() -> ParallelCorpus {
        let p = |id: &str, a: u32| LanguageParams {
            lang_id: id.into(),
            alphabet_id: a,
            order_rule: OrderRule::Identity,
            lexical_overlap: 0.0,
        };
        let fam = make_family(2, 200, &[p("en", 0), p("de", 1), p("zh", 2)]).unwrap();
        generate_parallel_corpus(&fam, 1500, 4).unwrap()
    }

    #[test]
    fn held_out_accuracy_on_disjoint_alphabets() {
        let c = corpus();
        let lid = train_lid(&c, 2).unwrap();
        let test = c.indices(Split::Test);
        let mut right = 0;
        for (l, lang) in c.family.lang_ids().iter().enumerate() {
            for &i in &test {
                right += usize::from(lid.predict(&c.renderings[l][i]) == Some(lang.as_str()));
            }
        }
        let acc = right as f64 / (3 * test.len()) as f64;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn confidences_are_normalized_and_uniform_without_evidence() {
        let c = corpus();
        let lid = train_lid(&c, 2).unwrap();
        let conf = lid.confidences(&c.renderings[1][0]);
        assert!((conf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in lid.confidences("") {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(lid.predict(""), None);
    }

    #[test]
    fn translation_rates_by_construction() {
        let c = corpus();
        let lid = train_lid(&c, 2).unwrap();
        let own: Vec<String> = c.renderings[1][..10].to_vec();
        let r = accidental_translation_rate(&lid, &own, "de", Some("en")).unwrap();
        assert_eq!(r.rate, 0.0);
        let foreign: Vec<String> = c.renderings[0][..10].to_vec();
        let r = accidental_translation_rate(&lid, &foreign, "de", Some("en")).unwrap();
        assert_eq!(r.rate, 1.0);
        assert!(r.mean_conf_source.unwrap() > 0.9);
        let mut mixed = own.clone();
        mixed[..3].clone_from_slice(&foreign[..3]);
        let r = accidental_translation_rate(&lid, &mixed, "de", None).unwrap();
        assert!((r.rate - 0.3).abs() < 1e-15);
        assert_eq!(r.mean_conf_source, None);
        let empty = vec![String::new()];
        assert_eq!(accidental_translation_rate(&lid, &empty, "de", None).unwrap().rate, 1.0);
        assert!(accidental_translation_rate(&lid, &[], "de", None).is_err());
        assert!(accidental_translation_rate(&lid, &own, "xx", None).is_err());
    }
}
