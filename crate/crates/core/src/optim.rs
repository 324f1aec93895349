//! Bounded Newton-Raphson maximization with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOUND_EPS: f64 = 1e-12;

pub fn fd_step(theta: f64) -> f64 {
    1e-4 * theta.abs().max(1.0)
}

fn at(theta: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut t = theta.to_vec();
    for &(i, d) in moves {
        t[i] += d;
    }
    t
}

/// Central-difference gradient with step `1e-4 * max(|theta_i|, 1)`.
pub fn fd_gradient<F>(f: &F, theta: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let h = fd_step(t);
            Ok((f(&at(theta, &[(i, h)]))? - f(&at(theta, &[(i, -h)]))?) / (2.0 * h))
        })
        .collect()
}

/// Gradient and Hessian from the same central-difference stencil.
pub fn fd_gradient_hessian<F>(f: &F, theta: &[f64], f0: f64) -> Result<(Vec<f64>, DMatrix<f64>)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = theta.len();
    let h: Vec<f64> = theta.iter().map(|&t| fd_step(t)).collect();
    let mut g = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = f(&at(theta, &[(i, h[i])]))?;
        let fm = f(&at(theta, &[(i, -h[i])]))?;
        g[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let fpp = f(&at(theta, &[(i, h[i]), (j, h[j])]))?;
            let fpm = f(&at(theta, &[(i, h[i]), (j, -h[j])]))?;
            let fmp = f(&at(theta, &[(i, -h[i]), (j, h[j])]))?;
            let fmm = f(&at(theta, &[(i, -h[i]), (j, -h[j])]))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((g, hess))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Newton,
    /// Hessian not negative definite on the free coordinates.
    GradientFallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub max_halvings: usize,
    /// Largest move of any coordinate in one step.
    pub max_step: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { max_halvings: 10, max_step: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub theta: Vec<f64>,
    pub value: f64,
    pub accepted: bool,
    pub kind: StepKind,
    pub halvings: usize,
}

fn project(theta: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((t, &l), &h) in theta.iter_mut().zip(lo).zip(hi) {
        *t = t.clamp(l, h);
    }
}

/// One projected Newton step with step halving.
///
/// Coordinates sitting on a bound whose gradient points outward are held
/// fixed. The step is accepted only if the objective does not decrease.
pub fn newton_step<F>(
    f: &F,
    theta: &[f64],
    f0: f64,
    lo: &[f64],
    hi: &[f64],
    settings: &NewtonSettings,
) -> Result<StepOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = theta.len();
    if lo.len() != n || hi.len() != n {
        return Err(Error::InvalidInput("bounds do not match parameter count".into()));
    }
    let (g, hess) = fd_gradient_hessian(f, theta, f0)?;
    let free: Vec<usize> = (0..n)
        .filter(|&i| {
            let at_lo = theta[i] <= lo[i] + BOUND_EPS && g[i] < 0.0;
            let at_hi = theta[i] >= hi[i] - BOUND_EPS && g[i] > 0.0;
            !(at_lo || at_hi)
        })
        .collect();
    let mut direction = vec![0.0; n];
    let mut kind = StepKind::Newton;
    if !free.is_empty() {
        let m = free.len();
        let neg_h = DMatrix::from_fn(m, m, |a, b| -hess[(free[a], free[b])]);
        let gf = DVector::from_iterator(m, free.iter().map(|&i| g[i]));
        let solved = if neg_h.iter().all(|v| v.is_finite()) { neg_h.cholesky().map(|ch| ch.solve(&gf)) } else { None };
        let d = match solved {
            Some(d) => d,
            None => {
                kind = StepKind::GradientFallback;
                let norm = gf.norm();
                if norm > 0.0 {
                    gf / norm.max(1.0)
                } else {
                    gf
                }
            }
        };
        for (a, &i) in free.iter().enumerate() {
            direction[i] = d[a];
        }
    }
    let largest = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if largest > settings.max_step {
        for d in &mut direction {
            *d *= settings.max_step / largest;
        }
    }

    let mut t = 1.0;
    for halvings in 0..=settings.max_halvings {
        let mut cand: Vec<f64> = theta.iter().zip(&direction).map(|(x, d)| x + t * d).collect();
        project(&mut cand, lo, hi);
        if let Ok(v) = f(&cand) {
            if v.is_finite() && v >= f0 {
                return Ok(StepOutcome { theta: cand, value: v, accepted: true, kind, halvings });
            }
        }
        t *= 0.5;
    }
    Ok(StepOutcome { theta: theta.to_vec(), value: f0, accepted: false, kind, halvings: settings.max_halvings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonRun {
    pub theta: Vec<f64>,
    pub value: f64,
    /// Objective after each iteration, starting with the initial value.
    pub trace: Vec<f64>,
    pub steps: Vec<StepOutcome>,
    pub converged: bool,
}

/// Repeated [`newton_step`] until the relative improvement drops below `tol`.
pub fn newton_maximize<F>(f: &F, theta0: &[f64], lo: &[f64], hi: &[f64], max_iter: usize, tol: f64) -> Result<NewtonRun>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut theta = theta0.to_vec();
    project(&mut theta, lo, hi);
    let mut value = f(&theta)?;
    let mut run = NewtonRun { theta: theta.clone(), value, trace: vec![value], steps: Vec::new(), converged: false };
    for _ in 0..max_iter {
        let step = newton_step(f, &theta, value, lo, hi, &NewtonSettings::default())?;
        let improvement = step.value - value;
        theta = step.theta.clone();
        value = step.value;
        run.trace.push(value);
        let stop = !step.accepted || improvement <= tol * value.abs().max(1e-300);
        run.steps.push(step);
        if stop {
            run.converged = true;
            break;
        }
    }
    run.theta = theta;
    run.value = value;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(t: &[f64]) -> Result<f64> {
        // concave quadratic with optimum (1, -2) and a cross term
        let (x, y) = (t[0] - 1.0, t[1] + 2.0);
        Ok(-(3.0 * x * x + 2.0 * x * y + 2.0 * y * y) + 5.0)
    }

    #[test]
    fn newton_hits_quadratic_optimum_in_one_step() {
        let lo = [-10.0, -10.0];
        let hi = [10.0, 10.0];
        let step =
            newton_step(&quad, &[4.0, 3.0], quad(&[4.0, 3.0]).unwrap(), &lo, &hi, &NewtonSettings::default()).unwrap();
        assert!(step.accepted && step.kind == StepKind::Newton && step.halvings == 0);
        assert!((step.theta[0] - 1.0).abs() < 1e-6 && (step.theta[1] + 2.0).abs() < 1e-6);
        let run = newton_maximize(&quad, &[4.0, 3.0], &lo, &hi, 50, 1e-10).unwrap();
        assert!(run.converged);
        assert!((run.value - 5.0).abs() < 1e-9);
        // the second iteration only confirms convergence
        assert!((run.trace[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn bound_is_respected() {
        let lo = [2.0, -10.0];
        let hi = [10.0, 10.0];
        let run = newton_maximize(&quad, &[4.0, 3.0], &lo, &hi, 50, 1e-12).unwrap();
        assert!((run.theta[0] - 2.0).abs() < 1e-12);
        // y optimum given x = 2: d/dy = -(2x' + 4y') = 0 with x' = 1
        assert!((run.theta[1] - (-2.5)).abs() < 1e-5);
    }

    #[test]
    fn non_concave_falls_back_to_gradient() {
        let f = |t: &[f64]| -> Result<f64> { Ok(t[0] * t[0] + t[0]) };
        let step = newton_step(&f, &[0.5], f(&[0.5]).unwrap(), &[-5.0], &[5.0], &NewtonSettings::default()).unwrap();
        assert_eq!(step.kind, StepKind::GradientFallback);
        assert!(step.accepted && step.value >= f(&[0.5]).unwrap());
    }

    #[test]
    fn never_decreases() {
        let f = |t: &[f64]| -> Result<f64> { Ok(-(t[0].powi(4)) - (t[1] - 0.3).powi(2) * (1.0 + t[0].cos())) };
        let run = newton_maximize(&f, &[1.7, -2.0], &[-5.0, -5.0], &[5.0, 5.0], 30, 0.0).unwrap();
        for w in run.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }
}
