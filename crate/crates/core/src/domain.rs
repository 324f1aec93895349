//! Core value types and the bounded/unbounded condition-space transform.
//!
//! Inspection ratings live on a bounded scale (25 = poor, 100 = perfect). The
//! state-space model works on the real line, so every observation passes
//! through a logit-shaped bijection
//!
//! ```text
//! phi(y) = s * ln(p / (1 - p)),   p = (y - lower) / (upper - lower),   s = (upper - lower) / n
//! ```
//!
//! With `n = 4` on `[25, 100]` the slope at the midpoint is exactly one, so
//! transformed units read like condition units in the middle of the scale.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inspectors::InspectorModel;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the logit.
pub const P_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionScale {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ConditionScale {
    fn default() -> Self {
        Self { lower: 25.0, upper: 100.0 }
    }
}

impl ConditionScale {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidInput(format!("condition scale requires lower < upper, got [{lower}, {upper}]")));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn clamp(&self, y: f64) -> f64 {
        y.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lower && y <= self.upper
    }
}

/// Steepness `n` of the space transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParam(f64);

impl Default for TransformParam {
    fn default() -> Self {
        Self(4.0)
    }
}

impl TransformParam {
    pub fn new(n: f64) -> Result<Self> {
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidInput(format!("transform parameter must be > 0, got {n}")));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Scalar Gaussian, used for observations and one-dimensional priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
            return Err(Error::InvalidInput(format!(
                "Gaussian1D requires finite mean and variance >= 0, got N({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let r = x - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + r * r / self.variance)
    }
}

/// Deterioration state (condition, speed, acceleration) in transformed space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub time: f64,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl GaussianState {
    pub fn new(time: f64, mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Self { time, mean, covariance }
    }

    pub fn condition(&self) -> Gaussian1D {
        Gaussian1D { mean: self.mean[0], variance: self.covariance[(0, 0)].max(0.0) }
    }

    pub fn speed(&self) -> Gaussian1D {
        Gaussian1D { mean: self.mean[1], variance: self.covariance[(1, 1)].max(0.0) }
    }

    pub fn acceleration(&self) -> Gaussian1D {
        Gaussian1D { mean: self.mean[2], variance: self.covariance[(2, 2)].max(0.0) }
    }

    /// Symmetric and PSD up to an eigenvalue floor of `-1e-9 * trace`.
    pub fn is_valid(&self) -> bool {
        if !self.time.is_finite()
            || self.mean.iter().any(|v| !v.is_finite())
            || self.covariance.iter().any(|v| !v.is_finite())
        {
            return false;
        }
        let c = &self.covariance;
        let scale = c.abs().max().max(1e-300);
        if (c - c.transpose()).abs().max() > 1e-9 * scale {
            return false;
        }
        let floor = -1e-9 * c.trace().abs().max(1e-300);
        SymmetricEigen::new(*c).eigenvalues.iter().all(|&l| l >= floor)
    }

    pub(crate) fn symmetrize(&mut self) {
        self.covariance = 0.5 * (self.covariance + self.covariance.transpose());
    }
}

fn clamped_probability(y: f64, scale: ConditionScale) -> (f64, bool) {
    let p = (y - scale.lower) / scale.width();
    let c = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    (c, c != p)
}

/// Maps a condition rating onto the real line.
pub fn to_unbounded(y: f64, scale: ConditionScale, n: TransformParam) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite condition {y}")));
    }
    let (p, _) = clamped_probability(y, scale);
    Ok(scale.width() / n.get() * (p / (1.0 - p)).ln())
}

/// Inverse of [`to_unbounded`].
pub fn to_bounded(x: f64, scale: ConditionScale, n: TransformParam) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite transformed value {x}")));
    }
    let s = scale.width() / n.get();
    let z = x / s;
    // logistic, written to avoid overflow on either tail
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    Ok(scale.lower + p * scale.width())
}

/// `d phi / d y`, evaluated at the clamped probability.
pub fn transform_derivative(y: f64, scale: ConditionScale, n: TransformParam) -> f64 {
    let (p, _) = clamped_probability(y, scale);
    1.0 / (n.get() * p * (1.0 - p))
}

/// A transformed observation plus whether the rating had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedObservation {
    pub gaussian: Gaussian1D,
    pub clamped: bool,
}

/// Debiases a rating by the inspector's `mu_v` and maps it, with first-order
/// propagation of `sigma_v` through the transform.
pub fn observation_to_transformed(
    y: f64,
    inspector: &InspectorModel,
    scale: ConditionScale,
    n: TransformParam,
) -> Result<TransformedObservation> {
    if inspector.sigma_v < 0.0 || !inspector.sigma_v.is_finite() {
        return Err(Error::InvalidInput(format!(
            "inspector {} has invalid sigma_v {}",
            inspector.id, inspector.sigma_v
        )));
    }
    let corrected = y - inspector.mu_v;
    if !corrected.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite condition {y}")));
    }
    let (_, clamped) = clamped_probability(corrected, scale);
    let mean = to_unbounded(corrected, scale, n)?;
    let slope = transform_derivative(corrected, scale, n);
    let sd = inspector.sigma_v * slope;
    Ok(TransformedObservation { gaussian: Gaussian1D { mean, variance: sd * sd }, clamped })
}
