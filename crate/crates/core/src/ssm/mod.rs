//! Kinematic deterioration model: predict, update, speed constraint, RTS
//! smoothing and forecasting.
//!
//! The state is `(condition, speed, acceleration)` in transformed units and
//! evolves under a white-noise-jerk model. Monotone deterioration is enforced
//! by truncating the speed marginal to `(-inf, 0]` after every update and every
//! forecast step, and pushing the moment change onto the other components by
//! linear-Gaussian conditioning.

mod truncation;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::domain::{to_bounded, ConditionScale, Gaussian1D, GaussianState, TransformParam};
use crate::error::{Error, Result};

pub use truncation::{truncated_upper_moments, upper_tail_mass};

/// Chi-square(1) quantile at 0.999.
pub const DEFAULT_GATE: f64 = 10.83;

const SPEED: usize = 1;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub sigma_w: f64,
    pub dt_unit: f64,
}

impl ProcessModel {
    pub fn new(sigma_w: f64) -> Self {
        Self { sigma_w, dt_unit: 1.0 }
    }
}

pub fn transition_matrix(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

pub fn process_noise(dt: f64, sigma_w: f64) -> Matrix3<f64> {
    let (d2, d3) = (dt * dt, dt * dt * dt);
    let (d4, d5) = (d3 * dt, d3 * d2);
    sigma_w
        * sigma_w
        * Matrix3::new(d5 / 20.0, d4 / 8.0, d3 / 6.0, d4 / 8.0, d3 / 3.0, d2 / 2.0, d3 / 6.0, d2 / 2.0, dt)
}

pub fn predict(state: &GaussianState, dt: f64, pm: &ProcessModel) -> GaussianState {
    let a = transition_matrix(dt);
    let mut out = GaussianState::new(
        state.time + dt,
        a * state.mean,
        a * state.covariance * a.transpose() + process_noise(dt, pm.sigma_w),
    );
    out.symmetrize();
    out
}

/// Scalar innovation of an update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Innovation {
    pub value: f64,
    pub variance: f64,
}

impl Innovation {
    pub fn normalized_squared(&self) -> f64 {
        self.value * self.value / self.variance
    }

    pub fn standardized(&self) -> f64 {
        self.value / self.variance.sqrt()
    }

    pub fn log_likelihood(&self) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + self.normalized_squared())
    }
}

pub fn innovation(prior: &GaussianState, obs: &Gaussian1D) -> Result<Innovation> {
    let variance = prior.covariance[(0, 0)] + obs.variance;
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Degenerate(format!("innovation variance {variance} at t={}", prior.time)));
    }
    Ok(Innovation { value: obs.mean - prior.mean[0], variance })
}

/// Conditions the state on a direct observation of the condition component.
pub fn update(prior: &GaussianState, obs: &Gaussian1D) -> Result<(GaussianState, f64)> {
    let inn = innovation(prior, obs)?;
    Ok((apply_update(prior, &inn), inn.log_likelihood()))
}

fn apply_update(prior: &GaussianState, inn: &Innovation) -> GaussianState {
    let pc: Vector3<f64> = prior.covariance.column(0).into_owned();
    let gain = pc / inn.variance;
    let mut out =
        GaussianState::new(prior.time, prior.mean + gain * inn.value, prior.covariance - gain * pc.transpose());
    out.symmetrize();
    out
}

/// Truncates the speed marginal to `(-inf, 0]`.
pub fn constrain_speed(state: &GaussianState) -> Result<GaussianState> {
    let s = &state.covariance;
    let var = s[(SPEED, SPEED)];
    let mu = state.mean[SPEED];
    if var <= 0.0 {
        if mu > 0.0 {
            return Err(Error::ConstraintInfeasible(mu));
        }
        return Ok(state.clone());
    }
    let (mu_tr, var_tr) = truncated_upper_moments(mu, var, 0.0);
    let col: Vector3<f64> = s.column(SPEED).into_owned();
    let mean = state.mean + col * ((mu_tr - mu) / var);
    let cov = s + col * col.transpose() * ((var_tr - var) / (var * var));
    let mut out = GaussianState::new(state.time, mean, cov);
    out.symmetrize();
    Ok(out)
}

/// Priors for the initial state, one independent Gaussian per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialPrior {
    pub condition: Gaussian1D,
    pub speed: Gaussian1D,
    pub acceleration: Gaussian1D,
}

impl InitialPrior {
    pub fn validate(&self) -> Result<()> {
        if self.condition.variance <= 0.0 || self.speed.variance <= 0.0 || self.acceleration.variance <= 0.0 {
            return Err(Error::InvalidInput("initial prior variances must be > 0".into()));
        }
        if self.speed.mean > 0.0 {
            return Err(Error::InvalidInput(format!("initial speed mean must be <= 0, got {}", self.speed.mean)));
        }
        Ok(())
    }

    pub fn state_at(&self, time: f64) -> GaussianState {
        GaussianState::new(
            time,
            Vector3::new(self.condition.mean, self.speed.mean, self.acceleration.mean),
            Matrix3::from_diagonal(&Vector3::new(
                self.condition.variance,
                self.speed.variance,
                self.acceleration.variance,
            )),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedObservation {
    pub time: f64,
    pub obs: Gaussian1D,
}

/// Additive state jump (intervention) at a known time.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOptions {
    /// Normalized innovation squared above which an observation is an outlier.
    pub gate: f64,
    /// Insert predict-only states at every whole year after the start.
    pub yearly_grid: bool,
    /// Last time covered by the grid; defaults to the last observation.
    pub end: Option<f64>,
    pub jumps: Vec<Jump>,
    /// Skip the speed constraint from the first jump on, so the jump
    /// posterior is the linear-Gaussian one. Truncating a diffuse jump prior
    /// moves its speed mean far below zero and biases the estimated jump.
    pub free_after_jump: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { gate: DEFAULT_GATE, yearly_grid: true, end: None, jumps: Vec::new(), free_after_jump: false }
    }
}

impl FilterOptions {
    pub fn with_gate(gate: f64) -> Self {
        Self { gate, ..Self::default() }
    }

    pub fn observations_only(gate: f64) -> Self {
        Self { gate, yearly_grid: false, ..Self::default() }
    }
}

/// How the filter moved from one recorded state to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub matrix: Matrix3<f64>,
    pub predicted: GaussianState,
    pub is_jump: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesResult {
    pub filtered: Vec<GaussianState>,
    /// `transitions[k]` leads from `filtered[k]` to `filtered[k + 1]`.
    pub transitions: Vec<Transition>,
    pub smoothed: Vec<GaussianState>,
    /// `smoothed_cross[k]` = Cov(x_{k+1}, x_k | all data).
    pub smoothed_cross: Vec<Matrix3<f64>>,
    pub forecast: Vec<GaussianState>,
    pub log_likelihood: f64,
    /// One flag per input observation.
    pub outlier_flags: Vec<bool>,
    /// Innovation of each input observation (also for gated ones).
    pub innovations: Vec<Option<Innovation>>,
    /// Index into `filtered` of the state holding each observation.
    pub observation_states: Vec<usize>,
}

impl SeriesResult {
    pub fn last_filtered(&self) -> &GaussianState {
        self.filtered.last().expect("filter output is never empty")
    }
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Plain,
    Jump(usize),
}

#[derive(Debug, Clone)]
struct Node {
    time: f64,
    kind: NodeKind,
    obs: Vec<usize>,
}

fn build_grid(observations: &[TimedObservation], start: f64, opts: &FilterOptions) -> Result<Vec<Node>> {
    let mut times: Vec<f64> = vec![start];
    let mut last = start;
    for w in observations.windows(2) {
        if w[1].time < w[0].time {
            return Err(Error::InvalidInput("observation times must be increasing".into()));
        }
    }
    for o in observations {
        if !o.time.is_finite() || o.time < start - TIME_EPS {
            return Err(Error::InvalidInput(format!("observation at t={} precedes series start {start}", o.time)));
        }
        times.push(o.time);
        last = last.max(o.time);
    }
    for j in &opts.jumps {
        times.push(j.time);
        last = last.max(j.time);
    }
    let end = opts.end.unwrap_or(last).max(last);
    if opts.yearly_grid {
        let mut k = 1.0;
        while start + k <= end + TIME_EPS {
            times.push(start + k);
            k += 1.0;
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);

    let mut nodes = Vec::with_capacity(times.len() + opts.jumps.len());
    let mut oi = 0;
    for &t in &times {
        let jump = opts.jumps.iter().position(|j| (j.time - t).abs() <= TIME_EPS);
        let mut obs = Vec::new();
        while oi < observations.len() && (observations[oi].time - t).abs() <= TIME_EPS {
            obs.push(oi);
            oi += 1;
        }
        match jump {
            Some(ji) => {
                nodes.push(Node { time: t, kind: NodeKind::Plain, obs: Vec::new() });
                nodes.push(Node { time: t, kind: NodeKind::Jump(ji), obs });
            }
            None => nodes.push(Node { time: t, kind: NodeKind::Plain, obs }),
        }
    }
    Ok(nodes)
}

/// Forward pass over a series.
///
/// Every observation goes predict, gate, update, constrain; repeated
/// inspections in the same year are applied sequentially. Grid points
/// without an observation are pure predict steps. Gated observations are
/// flagged and contribute neither an update nor a likelihood term.
pub fn filter_series(
    observations: &[TimedObservation],
    prior: &InitialPrior,
    start: f64,
    pm: &ProcessModel,
    opts: &FilterOptions,
) -> Result<SeriesResult> {
    filter_from_state(observations, prior.state_at(start), pm, opts)
}

pub fn filter_from_state(
    observations: &[TimedObservation],
    initial: GaussianState,
    pm: &ProcessModel,
    opts: &FilterOptions,
) -> Result<SeriesResult> {
    let nodes = build_grid(observations, initial.time, opts)?;
    let mut res = SeriesResult {
        outlier_flags: vec![false; observations.len()],
        innovations: vec![None; observations.len()],
        observation_states: vec![0; observations.len()],
        ..Default::default()
    };
    res.filtered.reserve(nodes.len());
    res.transitions.reserve(nodes.len());

    let mut state = initial;
    let mut free = false;
    for (k, node) in nodes.iter().enumerate() {
        if k > 0 {
            let (matrix, predicted, is_jump) = match node.kind {
                NodeKind::Plain => {
                    let dt = node.time - state.time;
                    (transition_matrix(dt), predict(&state, dt, pm), false)
                }
                NodeKind::Jump(ji) => {
                    let j = &opts.jumps[ji];
                    let mut p = GaussianState::new(node.time, state.mean + j.mean, state.covariance + j.cov);
                    p.symmetrize();
                    (Matrix3::identity(), p, true)
                }
            };
            res.transitions.push(Transition { matrix, predicted: predicted.clone(), is_jump });
            free |= is_jump && opts.free_after_jump;
            state = if is_jump && !free { constrain_speed(&predicted)? } else { predicted };
        }
        for &oi in &node.obs {
            res.observation_states[oi] = k;
            let inn = innovation(&state, &observations[oi].obs)?;
            res.innovations[oi] = Some(inn);
            if inn.normalized_squared() > opts.gate {
                res.outlier_flags[oi] = true;
            } else {
                res.log_likelihood += inn.log_likelihood();
                state = apply_update(&state, &inn);
            }
            if !free {
                state = constrain_speed(&state)?;
            }
        }
        res.filtered.push(state.clone());
    }
    Ok(res)
}

/// Log-likelihood only, skipping all bookkeeping. Matches
/// `filter_series(..).log_likelihood` on an observation-only grid.
pub fn series_log_likelihood(
    observations: &[TimedObservation],
    initial: GaussianState,
    pm: &ProcessModel,
    gate: f64,
) -> Result<f64> {
    let mut state = initial;
    let mut ll = 0.0;
    for o in observations {
        let dt = o.time - state.time;
        if dt < -TIME_EPS {
            return Err(Error::InvalidInput("observation times must be increasing".into()));
        }
        if dt > TIME_EPS {
            state = predict(&state, dt, pm);
        }
        let inn = innovation(&state, &o.obs)?;
        if inn.normalized_squared() <= gate {
            ll += inn.log_likelihood();
            state = apply_update(&state, &inn);
        }
        state = constrain_speed(&state)?;
    }
    Ok(ll)
}

fn robust_inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
    match m.cholesky() {
        Some(ch) => ch.inverse(),
        None => m.pseudo_inverse(1e-14).unwrap_or_else(|_| Matrix3::zeros()),
    }
}

/// Fixed-interval Rauch-Tung-Striebel pass over a filtered series.
pub fn smooth_series(filtered: &SeriesResult) -> Result<SeriesResult> {
    let n = filtered.filtered.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot smooth an empty series".into()));
    }
    let mut out = filtered.clone();
    out.smoothed = filtered.filtered.clone();
    out.smoothed_cross = vec![Matrix3::zeros(); n - 1];
    for k in (0..n - 1).rev() {
        let f = &filtered.filtered[k];
        let tr = &filtered.transitions[k];
        let gain = f.covariance * tr.matrix.transpose() * robust_inverse(&tr.predicted.covariance);
        let next = out.smoothed[k + 1].clone();
        let mean = f.mean + gain * (next.mean - tr.predicted.mean);
        let cov = f.covariance + gain * (next.covariance - tr.predicted.covariance) * gain.transpose();
        let mut s = GaussianState::new(f.time, mean, cov);
        s.symmetrize();
        out.smoothed[k] = s;
        out.smoothed_cross[k] = next.covariance * gain.transpose();
    }
    Ok(out)
}

/// Forecast state with its condition-unit summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPoint {
    pub state: GaussianState,
    pub condition_mean: f64,
    pub band_low: f64,
    pub band_high: f64,
}

/// `horizon` yearly predict + constrain steps, no updates.
pub fn forecast(
    last: &GaussianState,
    horizon: usize,
    pm: &ProcessModel,
    scale: ConditionScale,
    n: TransformParam,
) -> Result<Vec<ForecastPoint>> {
    let mut out = Vec::with_capacity(horizon);
    let mut state = last.clone();
    for _ in 0..horizon {
        state = constrain_speed(&predict(&state, pm.dt_unit, pm))?;
        out.push(condition_summary(&state, scale, n)?);
    }
    Ok(out)
}

/// Back-transforms the condition mean and its +-2 sd band.
pub fn condition_summary(state: &GaussianState, scale: ConditionScale, n: TransformParam) -> Result<ForecastPoint> {
    let c = state.condition();
    let sd = c.std();
    Ok(ForecastPoint {
        state: state.clone(),
        condition_mean: to_bounded(c.mean, scale, n)?,
        band_low: to_bounded(c.mean - 2.0 * sd, scale, n)?,
        band_high: to_bounded(c.mean + 2.0 * sd, scale, n)?,
    })
}
