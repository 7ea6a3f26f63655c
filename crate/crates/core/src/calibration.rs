//! Detection thresholds from validation reconstruction errors.
//!
//! Validation samples whose error exceeds twice the feature count are dropped
//! first: a predictor guessing each normalized output from N(0, 1) already
//! averages that error, so such samples carry no signal about the profile.
//! The threshold is the mean plus the population standard deviation of the
//! remaining errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SparseAutoencoderModel;
use crate::stats::{mean, pop_std};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub n_validation: usize,
    pub n_outliers_removed: usize,
    pub re_mean: f64,
    pub re_std: f64,
    pub outlier_cutoff: f64,
}

/// Expected error of random N(0, 1) guessing against N(0, 1) inputs.
pub fn outlier_cutoff(input_size: usize) -> f64 {
    2.0 * input_size as f64
}

/// Computes the threshold from already-scored validation errors.
pub fn threshold_from_errors(errors: &[f64], input_size: usize) -> Result<ThresholdReport> {
    if errors.is_empty() {
        return Err(Error::param("validation set is empty"));
    }
    if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::param(
            "reconstruction errors must be finite and >= 0",
        ));
    }
    let cutoff = outlier_cutoff(input_size);
    let kept: Vec<f64> = errors.iter().copied().filter(|&e| e <= cutoff).collect();
    if kept.is_empty() {
        return Err(Error::Calibration(format!(
            "all {} validation samples exceed the cutoff {cutoff}; the model performs worse than random guessing",
            errors.len()
        )));
    }
    let re_mean = mean(&kept);
    let re_std = pop_std(&kept);
    Ok(ThresholdReport {
        threshold: re_mean + re_std,
        n_validation: errors.len(),
        n_outliers_removed: errors.len() - kept.len(),
        re_mean,
        re_std,
        outlier_cutoff: cutoff,
    })
}

/// Scores normalized validation samples, stores the threshold in the model and
/// returns the report.
pub fn calibrate<V: AsRef<[f64]>>(
    model: &mut SparseAutoencoderModel,
    validation: &[V],
) -> Result<ThresholdReport> {
    let errors = validation
        .iter()
        .map(|x| model.network.score(x.as_ref()))
        .collect::<Result<Vec<f64>>>()?;
    let report = threshold_from_errors(&errors, model.network.input_size)?;
    if report.threshold <= 0.0 {
        return Err(Error::Calibration(
            "threshold must be positive (validation set reconstructed perfectly)".into(),
        ));
    }
    model.threshold = Some(report.threshold);
    model.calibration = Some(report.clone());
    Ok(report)
}

/// True when the reconstruction error is strictly above the model's threshold.
pub fn is_anomalous(model: &SparseAutoencoderModel, x_normalized: &[f64]) -> Result<bool> {
    let threshold = model.require_threshold()?;
    Ok(model.network.score(x_normalized)? > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_example() {
        let r = threshold_from_errors(&[1.0, 2.0, 3.0, 100.0], 16).unwrap();
        assert_eq!(r.outlier_cutoff, 32.0);
        assert_eq!(r.n_outliers_removed, 1);
        assert_abs_diff_eq!(r.re_mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.re_std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.threshold, 2.816496580927726, epsilon = 1e-9);
    }

    #[test]
    fn identical_errors() {
        let r = threshold_from_errors(&[4.5; 10], 16).unwrap();
        assert_eq!(r.threshold, 4.5);
        assert_eq!(r.re_std, 0.0);
    }

    #[test]
    fn all_outliers_is_an_error() {
        assert!(matches!(
            threshold_from_errors(&[33.0, 50.0], 16),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn cutoff_value_itself_is_kept() {
        let r = threshold_from_errors(&[32.0, 1.0], 16).unwrap();
        assert_eq!(r.n_outliers_removed, 0);
    }

    #[test]
    fn duplication_and_outliers_do_not_move_threshold() {
        let base = [0.3, 1.7, 2.2, 0.9, 5.0];
        let r = threshold_from_errors(&base, 16).unwrap();
        let doubled: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
        let r2 = threshold_from_errors(&doubled, 16).unwrap();
        assert_abs_diff_eq!(r.threshold, r2.threshold, epsilon = 1e-12);
        let mut with_outlier = base.to_vec();
        with_outlier.push(1e6);
        let r3 = threshold_from_errors(&with_outlier, 16).unwrap();
        assert_eq!(r.threshold, r3.threshold);
    }
}
