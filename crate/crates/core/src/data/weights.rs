//! Per-class loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `w_c = n_c / N`: each class weighted by its own frequency.
    #[default]
    Proportional,
    /// `w_c ∝ 1 / n_c`, normalized to sum to one.
    InverseFrequency,
    /// `w_c = 1 / C`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub scheme: WeightScheme,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    /// Weights rounded to two decimals by largest remainder, so the
    /// displayed values still sum to exactly 1.00.
    pub fn display(&self) -> Vec<f64> {
        round_to_sum(&self.weights, 100).into_iter().map(|u| u as f64 / 100.0).collect()
    }
}

pub fn compute_class_weights(counts: &[usize], scheme: WeightScheme) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Data("class counts are empty".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    let raw: Vec<f64> = match scheme {
        WeightScheme::Proportional => counts.iter().map(|&n| n as f64).collect(),
        WeightScheme::InverseFrequency => counts.iter().map(|&n| 1.0 / n as f64).collect(),
        WeightScheme::Uniform => vec![1.0; counts.len()],
    };
    let total: f64 = raw.iter().sum();
    Ok(ClassWeights {
        scheme,
        weights: raw.iter().map(|w| w / total).collect(),
    })
}

/// Largest-remainder apportionment of `units` among non-negative shares
/// summing to one. Ties go to the lower index.
pub fn round_to_sum(shares: &[f64], units: u64) -> Vec<u64> {
    let scaled: Vec<f64> = shares.iter().map(|s| s * units as f64).collect();
    let mut out: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(units.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_published_tables() {
        let neh = compute_class_weights(&[3240, 3742, 5667], WeightScheme::Proportional).unwrap();
        assert_eq!(neh.display(), vec![0.26, 0.29, 0.45]);
        let ucsd = compute_class_weights(&[37206, 11349, 8617, 51140], WeightScheme::Proportional).unwrap();
        assert_eq!(ucsd.display(), vec![0.34, 0.11, 0.08, 0.47]);
    }

    #[test]
    fn equal_counts_give_equal_weights_under_every_scheme() {
        for s in [WeightScheme::Proportional, WeightScheme::InverseFrequency, WeightScheme::Uniform] {
            let w = compute_class_weights(&[10, 10, 10], s).unwrap();
            assert!(w.weights.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn inverse_frequency_favors_the_minority() {
        let w = compute_class_weights(&[10, 30], WeightScheme::InverseFrequency).unwrap();
        assert!((w.weights[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_count_is_an_error() {
        assert!(compute_class_weights(&[5, 0, 3], WeightScheme::Uniform).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(counts in proptest::collection::vec(1usize..100_000, 1..8)) {
            for s in [WeightScheme::Proportional, WeightScheme::InverseFrequency] {
                let w = compute_class_weights(&counts, s).unwrap();
                prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert_eq!(round_to_sum(&w.weights, 100).iter().sum::<u64>(), 100);
            }
        }
    }
}
