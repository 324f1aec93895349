//! Moments of a normal distribution truncated from above.

use statrs::function::erf::erfc;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const CF_TERMS: usize = 200;
/// Below this standardized bound the direct `pdf / cdf` ratio loses precision.
const TAIL_SWITCH: f64 = -5.0;

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Mean and variance of `N(mean, variance)` conditioned on `X <= bound`.
///
/// Requires `variance > 0`.
pub fn truncated_upper_moments(mean: f64, variance: f64, bound: f64) -> (f64, f64) {
    debug_assert!(variance > 0.0);
    let sd = variance.sqrt();
    let beta = (bound - mean) / sd;
    if beta >= TAIL_SWITCH {
        let lambda = std_normal_pdf(beta) / std_normal_cdf(beta);
        let m = mean - sd * lambda;
        let factor = (1.0 - beta * lambda - lambda * lambda).max(0.0);
        (m, variance * factor)
    } else {
        // Continued fraction of the Mills ratio at x = -beta:
        //   R(x) = 1 / (x + 1 / (x + 2 / (x + 3 / ...)))
        // with c = 1/(x + d), d = 2/(x + ...). Then
        //   E[X] = bound - sd * c,  Var[X] = variance * c * (d - c)
        // which stays accurate when the bound is many sd below the mean.
        let x = -beta;
        let mut tail = 0.0;
        for k in (2..=CF_TERMS).rev() {
            tail = k as f64 / (x + tail);
        }
        let d = tail;
        let c = 1.0 / (x + d);
        let m = bound - sd * c;
        let factor = (c * (d - c)).max(0.0);
        (m, variance * factor)
    }
}

/// Probability mass of `N(mean, variance)` above `bound`.
pub fn upper_tail_mass(mean: f64, variance: f64, bound: f64) -> f64 {
    if variance <= 0.0 {
        return if mean > bound { 1.0 } else { 0.0 };
    }
    1.0 - std_normal_cdf((bound - mean) / variance.sqrt())
}
