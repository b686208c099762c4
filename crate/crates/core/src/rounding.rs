//! Adaptive rounding of binary variables imputed on a continuous scale.

use crate::error::{Error, Result};
use crate::stochastic::norm_quantile;

/// Threshold `c = ω̄ − Φ⁻¹(ω̄)·√(ω̄(1 − ω̄))` for a completed-column mean `ω̄`.
pub fn adaptive_threshold(mean: f64) -> Result<f64> {
    if !(mean > 0.0 && mean < 1.0) {
        return Err(Error::DegenerateMean(mean));
    }
    Ok(mean - norm_quantile(mean) * (mean * (1.0 - mean)).sqrt())
}

/// Round the `imputed` cells of a completed binary column to 0/1, leaving the
/// others untouched. The threshold uses the mean over all cells.
pub fn adaptive_round(values: &[f64], imputed: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(values.len(), imputed.len());
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let c = adaptive_threshold(mean)?;
    Ok(values
        .iter()
        .zip(imputed)
        .map(|(&v, &imp)| if imp { f64::from(u8::from(v > c)) } else { v })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn symmetric_case() {
        assert!((adaptive_threshold(0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn seventy_percent() {
        // Independent quantile via bisection on the normal cdf.
        let n = Normal::new(0.0, 1.0).unwrap();
        let (mut lo, mut hi) = (-5.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if n.cdf(mid) < 0.7 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let expect = 0.7 - lo * (0.7f64 * 0.3).sqrt();
        let c = adaptive_threshold(0.7).unwrap();
        assert!((c - expect).abs() < 1e-9);
        assert!((c - 0.4597).abs() < 1e-4);
    }

    #[test]
    fn large_imputations_round_up() {
        let mut values = vec![0.0; 40];
        values.extend([5.0, 7.0, 9.0]);
        let imputed: Vec<bool> = (0..43).map(|i| i >= 40).collect();
        let out = adaptive_round(&values, &imputed).unwrap();
        assert_eq!(&out[40..], &[1.0, 1.0, 1.0]);
        assert!(out[..40].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_mean() {
        assert!(matches!(adaptive_round(&[2.0, 3.0], &[true, true]), Err(Error::DegenerateMean(_))));
        assert!(adaptive_threshold(0.0).is_err());
    }
}
