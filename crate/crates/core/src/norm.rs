//! Per-channel feature normalization.
//!
//! The denoiser trains and samples in z-scored feature space so every channel
//! carries comparable weight in the reconstruction objective; the stats are
//! computed from the training corpus and stored in the checkpoint. Guidance
//! chain-rules through the de-normalization (a diagonal affine map).

use ndarray::{Array1, Array2, Axis};

use crate::motion::FEATURE_DIM;

/// Minimum per-channel standard deviation. Channels that are constant in the
/// corpus get this floor so normalization stays invertible.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl FeatureStats {
    /// Identity transform: normalize/denormalize become no-ops.
    pub fn identity() -> Self {
        FeatureStats {
            mean: Array1::zeros(FEATURE_DIM),
            std: Array1::ones(FEATURE_DIM),
        }
    }

    /// Per-channel mean and (floored) standard deviation over all frames of
    /// all samples.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let mut count = 0usize;
        let mut sum = Array1::<f64>::zeros(FEATURE_DIM);
        let mut sum_sq = Array1::<f64>::zeros(FEATURE_DIM);
        for s in samples {
            for row in s.axis_iter(Axis(0)) {
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
                count += 1;
            }
        }
        assert!(count > 0, "need at least one frame to compute stats");
        let n = count as f64;
        let mean = sum / n;
        let var = sum_sq / n - &mean * &mean;
        let std = var.mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
        FeatureStats { mean, std }
    }

    pub fn normalize(&self, raw: &Array2<f64>) -> Array2<f64> {
        (raw - &self.mean) / &self.std
    }

    pub fn denormalize(&self, scaled: &Array2<f64>) -> Array2<f64> {
        scaled * &self.std + &self.mean
    }

    /// Pull a gradient taken in raw space back to normalized space
    /// (multiply each channel by its std).
    pub fn grad_to_normalized(&self, grad_raw: &Array2<f64>) -> Array2<f64> {
        grad_raw * &self.std
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_round_trip() {
        let mut a = Array2::zeros((5, FEATURE_DIM));
        for (i, v) in a.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let stats = FeatureStats::from_samples([&a]);
        let b = stats.denormalize(&stats.normalize(&a));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_gets_floor() {
        let a = Array2::from_elem((8, FEATURE_DIM), 0.9);
        let stats = FeatureStats::from_samples([&a]);
        for c in 0..FEATURE_DIM {
            assert_eq!(stats.std[c], STD_FLOOR);
            assert!((stats.mean[c] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_is_noop() {
        let mut a = Array2::zeros((3, FEATURE_DIM));
        a[[1, 4]] = 2.5;
        let id = FeatureStats::identity();
        assert_eq!(id.normalize(&a), a);
        assert_eq!(id.denormalize(&a), a);
    }
}
