use crate::error::{MmqError, Result};

/// Log-scaled, min-max normalized interaction frequency per item.
///
/// `q′ = ln(q + 1)` is mapped to `[0, 1]`. When every count is equal the
/// range is empty and every item gets `0.5`.
pub fn frequency_feature(counts: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = counts.iter().find(|q| !(**q >= 0.0) || !q.is_finite()) {
        return Err(MmqError::InvalidArgument(format!(
            "interaction count must be finite and >= 0, got {bad}"
        )));
    }
    let logs: Vec<f64> = counts.iter().map(|q| q.ln_1p()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![0.5; counts.len()]);
    }
    Ok(logs.iter().map(|l| (l - lo) / (hi - lo)).collect())
}

/// [`frequency_feature`] over integer counts.
pub fn frequency_from_counts(counts: &[u64]) -> Vec<f64> {
    let c: Vec<f64> = counts.iter().map(|&q| q as f64).collect();
    frequency_feature(&c).expect("integer counts are finite and non-negative")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_range() {
        let q = frequency_feature(&[0.0, std::f64::consts::E - 1.0]).unwrap();
        assert_eq!(q, vec![0.0, 1.0]);
    }

    #[test]
    fn log_then_min_max() {
        let q = frequency_from_counts(&[1, 9, 99]);
        let expect = (10f64.ln() - 2f64.ln()) / (100f64.ln() - 2f64.ln());
        assert_eq!(q[0], 0.0);
        assert!((q[1] - expect).abs() < 1e-15);
        // The published figure 0.411357 is off by 5e-5; the exact value is
        // 0.4114081.
        assert!((q[1] - 0.4114081).abs() < 5e-8);
        assert_eq!(q[2], 1.0);
    }

    #[test]
    fn equal_counts_give_half() {
        assert_eq!(frequency_from_counts(&[7, 7, 7]), vec![0.5; 3]);
        assert_eq!(frequency_from_counts(&[3]), vec![0.5]);
        assert!(frequency_from_counts(&[]).is_empty());
        assert!(frequency_feature(&[1.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn order_survives_integer_scaling(counts in prop::collection::vec(0u64..1000, 2..30), k in 1u64..50) {
            let a = frequency_from_counts(&counts);
            let scaled: Vec<u64> = counts.iter().map(|c| c * k).collect();
            let b = frequency_from_counts(&scaled);
            for i in 0..counts.len() {
                prop_assert!((0.0..=1.0).contains(&a[i]));
                for j in 0..counts.len() {
                    prop_assert_eq!(a[i] < a[j], b[i] < b[j]);
                    prop_assert_eq!(counts[i] < counts[j], a[i] < a[j]);
                }
            }
        }
    }
}
