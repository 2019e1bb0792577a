use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Per-step 2D Gaussian with diagonal covariance.
///
/// `variances[j]` holds `(σx², σy²)` for step `j`. The horizon is usually
/// [`crate::PRED_LEN`] but reduced horizons are allowed for testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTrajectory {
    pub means: Vec<Vec2>,
    pub variances: Vec<Vec2>,
}

impl GaussianTrajectory {
    pub fn new(means: Vec<Vec2>, variances: Vec<Vec2>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::Dimension {
                context: "gaussian trajectory variances",
                expected: means.len(),
                actual: variances.len(),
            });
        }
        if let Some(j) = variances
            .iter()
            .position(|v| !(v.x > 0.0 && v.y > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "variance at step {j} is not strictly positive: {:?}",
                variances[j]
            )));
        }
        Ok(GaussianTrajectory { means, variances })
    }

    /// Builds a trajectory with the same variance at every step.
    pub fn with_constant_variance(means: Vec<Vec2>, var: f64) -> Self {
        let variances = vec![Vec2::new(var, var); means.len()];
        GaussianTrajectory { means, variances }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Rigid transform `p ↦ R(θ)·p + t` of the means.
    ///
    /// The diagonal of the rotated covariance is kept as the new variance;
    /// off-diagonal terms are dropped. For isotropic variances this is exact.
    pub fn transformed(&self, theta: f64, translation: Vec2) -> GaussianTrajectory {
        let (s, c) = theta.sin_cos();
        GaussianTrajectory {
            means: self
                .means
                .iter()
                .map(|&m| m.rotate(theta) + translation)
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| rotate_diag_variance(*v, c, s))
                .collect(),
        }
    }
}

/// Diagonal of `R diag(v) Rᵀ` for the rotation with cosine `c` and sine `s`.
pub fn rotate_diag_variance(v: Vec2, c: f64, s: f64) -> Vec2 {
    Vec2::new(c * c * v.x + s * s * v.y, s * s * v.x + c * c * v.y)
}

/// A set of trajectory hypotheses with mode probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalPrediction {
    pub modes: Vec<GaussianTrajectory>,
    pub probabilities: Vec<f64>,
}

impl MultiModalPrediction {
    /// Modes with uniform probabilities.
    pub fn uniform(modes: Vec<GaussianTrajectory>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidInput("a prediction needs at least one mode".into()));
        }
        let p = 1.0 / modes.len() as f64;
        let probabilities = vec![p; modes.len()];
        Ok(MultiModalPrediction {
            modes,
            probabilities,
        })
    }

    pub fn single(mode: GaussianTrajectory) -> Self {
        MultiModalPrediction {
            modes: vec![mode],
            probabilities: vec![1.0],
        }
    }

    pub fn with_probabilities(modes: Vec<GaussianTrajectory>, probabilities: Vec<f64>) -> Result<Self> {
        if modes.is_empty() || modes.len() != probabilities.len() {
            return Err(Error::InvalidInput(format!(
                "{} modes with {} probabilities",
                modes.len(),
                probabilities.len()
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "mode probabilities must be non-negative and sum to 1, got {probabilities:?}"
            )));
        }
        Ok(MultiModalPrediction {
            modes,
            probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Index of the mode whose means are closest to `gt` in mean ℓ2 distance;
    /// ties go to the lowest index.
    pub fn closest_mode(&self, gt: &[Vec2]) -> usize {
        closest_mode(self.modes.iter().map(|m| m.means.as_slice()), gt)
    }
}

/// Mean per-step Euclidean distance between two point sequences.
pub fn mean_distance(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.distance(*q)).sum::<f64>() / a.len().max(1) as f64
}

pub fn closest_mode<'a>(modes: impl IntoIterator<Item = &'a [Vec2]>, gt: &[Vec2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (m, means) in modes.into_iter().enumerate() {
        let d = mean_distance(means, gt);
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}
