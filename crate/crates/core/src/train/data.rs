use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Example;
use crate::seeding::{rng_for, STREAM_MIXTURE};
use crate::synthlang::{TaskInstance, Vocab, EOS, SENTINEL_BASE};

pub const MASK_RATE: f64 = 0.15;
pub const MEAN_SPAN_LEN: f64 = 3.0;

/// Token ids of an instance, each side terminated by eos.
pub fn encode_instance(vocab: &Vocab, inst: &TaskInstance) -> Example {
    let mut input = vocab.encode(&inst.input_text);
    input.push(EOS);
    let mut target = vocab.encode(&inst.target_text);
    target.push(EOS);
    Example { input, target }
}

/// Fine-tuning instances from one or more sources in training order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMixture {
    pub sources: Vec<String>,
    pub per_source: Vec<usize>,
    pub instances: Vec<TaskInstance>,
}

impl DataMixture {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Takes the leading `budget / k` instances of each of the `k` sources
/// (the first `budget % k` sources take one extra) and shuffles them together.
pub fn mix_sources(
    datasets: &[(String, Vec<TaskInstance>)],
    budget: usize,
    seed: u64,
) -> Result<DataMixture, TrainError> {
    if datasets.is_empty() {
        return Err(TrainError::NoSources);
    }
    let k = datasets.len();
    let mut instances = Vec::with_capacity(budget);
    let mut per_source = Vec::with_capacity(k);
    for (i, (lang, data)) in datasets.iter().enumerate() {
        let need = budget / k + usize::from(i < budget % k);
        if data.len() < need {
            return Err(TrainError::InsufficientData {
                lang: lang.clone(),
                have: data.len(),
                need,
            });
        }
        instances.extend_from_slice(&data[..need]);
        per_source.push(need);
    }
    instances.shuffle(&mut rng_for(seed, STREAM_MIXTURE, 0));
    Ok(DataMixture {
        sources: datasets.iter().map(|(l, _)| l.clone()).collect(),
        per_source,
        instances,
    })
}

/// Splits `total` into `parts` nonnegative random sizes.
fn random_partition<R: Rng>(rng: &mut R, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Span corruption: about [`MASK_RATE`] of the tokens, in spans of mean
/// length [`MEAN_SPAN_LEN`], are replaced by sentinels in the input; the
/// target lists each sentinel followed by the tokens it hid.
///
/// The noise count is stochastically rounded so the expected masking rate
/// is exact. Returns `(input, target)` without eos.
pub fn span_corrupt<R: Rng>(ids: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let len = ids.len();
    let expected = len as f64 * MASK_RATE;
    let mut n_noise = expected.floor() as usize;
    if rng.random::<f64>() < expected.fract() {
        n_noise += 1;
    }
    n_noise = n_noise.min(len.saturating_sub(1));
    if n_noise == 0 {
        return (ids.to_vec(), Vec::new());
    }
    let n_spans = ((n_noise as f64 / MEAN_SPAN_LEN).round() as usize).clamp(1, n_noise.min(len - n_noise));
    // every noise span is nonempty; inner gaps are nonempty, the two ends may be empty
    let noise: Vec<usize> = random_partition(rng, n_noise - n_spans, n_spans)
        .into_iter()
        .map(|n| n + 1)
        .collect();
    let mut gaps = random_partition(rng, len - n_noise - (n_spans - 1), n_spans + 1);
    for g in &mut gaps[1..n_spans] {
        *g += 1;
    }
    let mut input = Vec::with_capacity(len);
    let mut target = Vec::with_capacity(n_noise + n_spans);
    let mut pos = 0;
    for (s, &span) in noise.iter().enumerate() {
        input.extend_from_slice(&ids[pos..pos + gaps[s]]);
        pos += gaps[s];
        input.push(SENTINEL_BASE + s);
        target.push(SENTINEL_BASE + s);
        target.extend_from_slice(&ids[pos..pos + span]);
        pos += span;
    }
    input.extend_from_slice(&ids[pos..]);
    debug_assert_eq!(pos + gaps[n_spans], len);
    (input, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{GoldLabel, TaskKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn insts(lang: &str, n: usize) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| TaskInstance {
                input_text: format!("{lang}{i}"),
                target_text: "t".into(),
                task: TaskKind::Paircls,
                lang: lang.into(),
                gold: GoldLabel::Bool(true),
                idx: i,
            })
            .collect()
    }

    #[test]
    fn single_source_takes_the_whole_budget() {
        let m = mix_sources(&[("en".into(), insts("en", 12_000))], 10_000, 1).unwrap();
        assert_eq!(m.len(), 10_000);
        assert_eq!(m.per_source, vec![10_000]);
        assert!(m.instances.iter().all(|i| i.idx < 10_000));
    }

    #[test]
    fn two_sources_split_equally() {
        let data = [("en".into(), insts("en", 6000)), ("zh".into(), insts("zh", 6000))];
        let m = mix_sources(&data, 10_000, 1).unwrap();
        let en = m.instances.iter().filter(|i| i.lang == "en").count();
        assert_eq!((en, m.len() - en), (5000, 5000));
        assert_eq!(m, mix_sources(&data, 10_000, 1).unwrap());
        assert_ne!(m.instances, mix_sources(&data, 10_000, 2).unwrap().instances);
        let odd = mix_sources(&data, 11, 1).unwrap();
        assert_eq!(odd.per_source, vec![6, 5]);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let data = [("en".into(), insts("en", 6000)), ("zh".into(), insts("zh", 10))];
        assert!(matches!(
            mix_sources(&data, 10_000, 1),
            Err(TrainError::InsufficientData { need: 5000, .. })
        ));
        assert!(matches!(mix_sources(&[], 10, 1), Err(TrainError::NoSources)));
    }

    #[test]
    fn masking_rate_over_a_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut masked, mut total) = (0usize, 0usize);
        for i in 0..2000 {
            let len = 4 + i % 9;
            let ids: Vec<usize> = (200..200 + len).collect();
            let (input, _) = span_corrupt(&ids, &mut rng);
            masked += len - input.iter().filter(|&&t| t >= 200).count();
            total += len;
        }
        let rate = masked as f64 / total as f64;
        assert!((rate - MASK_RATE).abs() < 0.02, "{rate}");
    }

    proptest! {
        #[test]
        fn corruption_is_reversible(len in 1usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<usize> = (500..500 + len).collect();
            let (input, target) = span_corrupt(&ids, &mut rng);
            // splice each sentinel's span back into the input
            let mut spans: Vec<Vec<usize>> = Vec::new();
            for &t in &target {
                if t < 500 {
                    prop_assert_eq!(t, SENTINEL_BASE + spans.len());
                    spans.push(Vec::new());
                } else {
                    spans.last_mut().unwrap().push(t);
                }
            }
            prop_assert!(spans.iter().all(|s| !s.is_empty()));
            let rebuilt: Vec<usize> = input
                .iter()
                .flat_map(|&t| if t < 500 { spans[t - SENTINEL_BASE].clone() } else { vec![t] })
                .collect();
            prop_assert_eq!(rebuilt, ids);
        }
    }
}
