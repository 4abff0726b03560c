use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::seeding::{rng_for, STREAM_PERMUTATION};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the average of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` if either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with a two-sided permutation p-value,
/// `(1 + #{|rho_perm| >= |rho|}) / (n_perm + 1)`.
pub fn spearman_rho(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<CorrelationResult, DiagError> {
    if x.len() != y.len() {
        return Err(DiagError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(DiagError::TooFewPoints { min: 3, got: x.len() });
    }
    let rx = ranks(x);
    let mut ry = ranks(y);
    let rho = pearson(&rx, &ry).ok_or(DiagError::ConstantSeries)?;
    let mut rng = rng_for(seed, STREAM_PERMUTATION, 0);
    let threshold = rho.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        ry.shuffle(&mut rng);
        let r = pearson(&rx, &ry).expect("ranks keep their variance");
        if r.abs() >= threshold {
            extreme += 1;
        }
    }
    Ok(CorrelationResult {
        rho,
        p_value: (1 + extreme) as f64 / (n_perm + 1) as f64,
        n: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let r = spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0], 100, 0).unwrap();
        assert!((r.rho + 0.5).abs() < 1e-12);
        let up: Vec<f64> = (0..10).map(f64::from).collect();
        let down: Vec<f64> = up.iter().map(|v| -v).collect();
        assert_eq!(spearman_rho(&up, &up, 0, 0).unwrap().rho, 1.0);
        assert_eq!(spearman_rho(&up, &down, 0, 0).unwrap().rho, -1.0);
    }

    #[test]
    fn permutation_p_value_of_perfect_series() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let r = spearman_rho(&x, &y, DEFAULT_PERMUTATIONS, 9).unwrap();
        assert!(r.p_value <= 0.001, "{}", r.p_value);
        assert!(r.p_value > 0.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 10, 0),
            Err(DiagError::ConstantSeries)
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0], 10, 0),
            Err(DiagError::TooFewPoints { .. })
        ));
        assert!(spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0], 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            x in prop::collection::vec(-100.0f64..100.0, 4..30),
            y in prop::collection::vec(-100.0f64..100.0, 4..30),
        ) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            if let Ok(base) = spearman_rho(x, y, 0, 0) {
                let tx: Vec<f64> = x.iter().map(|v| v.exp().ln_1p() + 3.0 * v).collect();
                let moved = spearman_rho(&tx, y, 0, 0).unwrap();
                prop_assert!((base.rho - moved.rho).abs() < 1e-12);
                prop_assert!(base.rho.abs() <= 1.0);
            }
        }
    }
}
