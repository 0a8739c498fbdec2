//! Weighted squared-error loss and its default per-axis weights.

use serde::{Deserialize, Serialize};

use super::{EstimatorError, ForceVector};

/// Per-axis weights `λ`, all strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LossWeights([f64; 3]);

impl LossWeights {
    pub fn new(lambda: [f64; 3]) -> Result<Self, EstimatorError> {
        if lambda.iter().all(|l| l.is_finite() && *l > 0.0) {
            Ok(Self(lambda))
        } else {
            Err(EstimatorError::InvalidLambda(lambda))
        }
    }

    pub fn ones() -> Self {
        Self([1.0; 3])
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self, EstimatorError> {
        Self::new(self.0.map(|l| l * c))
    }
}

impl TryFrom<[f64; 3]> for LossWeights {
    type Error = EstimatorError;
    fn try_from(v: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LossWeights> for [f64; 3] {
    fn from(l: LossWeights) -> Self {
        l.0
    }
}

/// `‖λ ⊙ (w − ŵ)‖²`.
pub fn weighted_mse(w: &ForceVector, w_hat: &ForceVector, lambda: &LossWeights) -> f64 {
    (0..3)
        .map(|k| {
            let e = lambda.0[k] * (w.0[k] - w_hat.0[k]);
            e * e
        })
        .sum()
}

/// Gradient of [`weighted_mse`] with respect to `w_hat`.
pub fn weighted_mse_grad(w: &ForceVector, w_hat: &ForceVector, lambda: &LossWeights) -> [f64; 3] {
    std::array::from_fn(|k| 2.0 * lambda.0[k] * lambda.0[k] * (w_hat.0[k] - w.0[k]))
}

/// `λ_k = clamp(σ_z / σ_k, 1, 10)`; a constant axis gets the upper clamp.
pub fn default_lambda(labels: &[ForceVector]) -> Result<LossWeights, EstimatorError> {
    if labels.len() < 10 {
        return Err(EstimatorError::TooFewSamples { need: 10, got: labels.len() });
    }
    let n = labels.len() as f64;
    let sigma: [f64; 3] = std::array::from_fn(|k| {
        let mean = labels.iter().map(|w| w.0[k]).sum::<f64>() / n;
        (labels.iter().map(|w| (w.0[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
    });
    let lam = std::array::from_fn(|k| {
        if k == 2 {
            1.0
        } else if sigma[k] == 0.0 {
            10.0
        } else {
            (sigma[2] / sigma[k]).clamp(1.0, 10.0)
        }
    });
    LossWeights::new(lam)
}
