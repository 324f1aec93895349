//! Interventions as state jumps: effect estimation and service life.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ElementSeries};
use crate::domain::{to_unbounded, ConditionScale, GaussianState, TransformParam};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::ssm::{constrain_speed, filter_from_state, predict, smooth_series, FilterOptions, Jump, ProcessModel};
use crate::train::{prepare_series, ModelParams};

/// Prior variance of every jump component while the effect is unknown.
pub const DIFFUSE_JUMP_VAR: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEffect {
    pub type_id: String,
    /// Condition, speed and acceleration gain in transformed units.
    pub delta_mean: [f64; 3],
    pub delta_cov: [[f64; 3]; 3],
}

impl InterventionEffect {
    pub fn zero(type_id: impl Into<String>) -> Self {
        Self { type_id: type_id.into(), delta_mean: [0.0; 3], delta_cov: [[0.0; 3]; 3] }
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::from(self.delta_mean)
    }

    pub fn cov(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.delta_cov[i][j])
    }

    pub fn as_jump(&self, time: f64) -> Jump {
        Jump { time, mean: self.mean(), cov: self.cov() }
    }
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub element_id: String,
    pub year: f64,
    pub type_id: String,
}

pub fn apply_intervention(state: &GaussianState, eff: &InterventionEffect) -> Result<GaussianState> {
    let mut s = GaussianState::new(state.time, state.mean + eff.mean(), state.covariance + eff.cov());
    s.symmetrize();
    constrain_speed(&s)
}

/// Posterior of one element's jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementJump {
    pub element_id: String,
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub effect: InterventionEffect,
    /// Condition gain before clamping to be non-negative.
    pub raw_condition: f64,
    /// Precision-pooled covariance alone, without the dispersion term.
    pub pooled_cov: [[f64; 3]; 3],
    pub elements: Vec<ElementJump>,
    pub skipped: Vec<String>,
}

impl EffectEstimate {
    pub fn pooled_std(&self) -> [f64; 3] {
        let c = &self.effect.delta_cov;
        [c[0][0].sqrt(), c[1][1].sqrt(), c[2][2].sqrt()]
    }
}

fn inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
    match m.cholesky() {
        Some(ch) => ch.inverse(),
        None => m.pseudo_inverse(1e-12).unwrap_or_else(|_| Matrix3::zeros()),
    }
}

/// Smoothed jump posterior of one element, `None` when it lacks ratings on
/// either side of `tau`.
pub fn element_jump(e: &ElementSeries, tau: f64, params: &ModelParams) -> Result<Option<ElementJump>> {
    let before = e.observed().any(|(i, _)| i.year < tau);
    let after = e.observed().any(|(i, _)| i.year >= tau);
    if !(before && after) {
        return Ok(None);
    }
    let Some(prep) = prepare_series(e, params)? else { return Ok(None) };
    // The initial speed comes from the element's own ratings: intervened
    // elements are a selected population, and a network speed prior pulls
    // their pre-intervention speed toward the network mean.
    let mut initial = prep.initial;
    initial.mean[1] = params.speed_prior(e)?.mean;
    initial.covariance[(1, 1)] = DIFFUSE_JUMP_VAR;
    let initial = constrain_speed(&initial)?;
    let jump = Jump { time: tau, mean: Vector3::zeros(), cov: Matrix3::identity() * DIFFUSE_JUMP_VAR };
    let opts =
        FilterOptions { gate: params.gate, yearly_grid: false, end: None, jumps: vec![jump], free_after_jump: true };
    let f = filter_from_state(&prep.observations, initial, &params.process_model(), &opts)?;
    let s = smooth_series(&f)?;
    let j = s
        .transitions
        .iter()
        .position(|t| t.is_jump)
        .ok_or_else(|| Error::Other("jump node missing from filter grid".into()))?;
    let (pre, post) = (&s.smoothed[j], &s.smoothed[j + 1]);
    let cross = s.smoothed_cross[j];
    let mean = post.mean - pre.mean;
    let cov = post.covariance + pre.covariance - cross - cross.transpose();
    Ok(Some(ElementJump {
        element_id: e.id.clone(),
        mean: mean.into(),
        cov: to_rows(&(0.5 * (cov + cov.transpose()))),
    }))
}

/// Pools per-element jump posteriors of one intervention type.
///
/// The mean is precision weighted. The covariance is the pooled posterior
/// covariance plus the between-element variance of each component.
pub fn estimate_effect(
    dataset: &Dataset,
    records: &[InterventionRecord],
    type_id: &str,
    params: &ModelParams,
) -> Result<EffectEstimate> {
    let mut tau: BTreeMap<&str, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.type_id == type_id) {
        tau.entry(r.element_id.as_str()).or_insert(r.year);
    }
    let results: Vec<(String, Option<ElementJump>)> = dataset
        .elements
        .par_iter()
        .filter_map(|e| tau.get(e.id.as_str()).map(|&t| (e, t)))
        .map(|(e, t)| Ok((e.id.clone(), element_jump(e, t, params)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut jumps = Vec::new();
    let mut skipped = Vec::new();
    for (id, j) in results {
        match j {
            Some(j) => jumps.push(j),
            None => skipped.push(id),
        }
    }
    pool(type_id, jumps, skipped)
}

/// Between-element variance of one component by the method of moments with
/// inverse-variance weights (DerSimonian-Laird); poorly identified elements
/// barely move it.
fn dispersion(jumps: &[ElementJump], c: usize) -> f64 {
    let k = jumps.len();
    if k < 2 {
        return 0.0;
    }
    let w: Vec<f64> = jumps.iter().map(|j| 1.0 / j.cov[c][c].max(f64::MIN_POSITIVE)).collect();
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|w| w * w).sum();
    let m = jumps.iter().zip(&w).map(|(j, w)| w * j.mean[c]).sum::<f64>() / s1;
    let q: f64 = jumps.iter().zip(&w).map(|(j, w)| w * (j.mean[c] - m).powi(2)).sum();
    ((q - (k - 1) as f64) / (s1 - s2 / s1)).max(0.0)
}

pub fn pool(type_id: &str, jumps: Vec<ElementJump>, skipped: Vec<String>) -> Result<EffectEstimate> {
    if jumps.is_empty() {
        return Err(Error::Unidentifiable(format!("no element with post-intervention data for type {type_id}")));
    }
    let mut info = Matrix3::zeros();
    let mut info_mean = Vector3::zeros();
    for j in &jumps {
        let p = inverse(&Matrix3::from_fn(|a, b| j.cov[a][b]));
        info += p;
        info_mean += p * Vector3::from(j.mean);
    }
    let pooled_cov = inverse(&info);
    let mean = pooled_cov * info_mean;
    let cov = pooled_cov + Matrix3::from_diagonal(&Vector3::from_fn(|c, _| dispersion(&jumps, c)));
    let raw_condition = mean[0];
    let mut delta_mean: [f64; 3] = mean.into();
    delta_mean[0] = delta_mean[0].max(0.0);
    Ok(EffectEstimate {
        effect: InterventionEffect {
            type_id: type_id.into(),
            delta_mean,
            delta_cov: to_rows(&(0.5 * (cov + cov.transpose()))),
        },
        raw_condition,
        pooled_cov: to_rows(&pooled_cov),
        elements: jumps,
        skipped,
    })
}

/// One estimate per intervention type found in `records`.
pub fn estimate_effects(
    dataset: &Dataset,
    records: &[InterventionRecord],
    params: &ModelParams,
) -> BTreeMap<String, Result<EffectEstimate>> {
    let types: std::collections::BTreeSet<&str> = records.iter().map(|r| r.type_id.as_str()).collect();
    types.into_iter().map(|t| (t.to_string(), estimate_effect(dataset, records, t, params))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ServiceLifeOptions {
    /// Fixed condition threshold instead of the pre-intervention level.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceLife {
    pub years: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub censored: bool,
}

/// Time within a year at which `c + v s + a s^2 / 2` falls to `target`.
fn crossing_in_year(c: f64, v: f64, a: f64, target: f64) -> Option<f64> {
    let d = c - target;
    if d <= 0.0 {
        return Some(0.0);
    }
    // smallest root in [0, 1] of a/2 s^2 + v s + d = 0
    let roots: Vec<f64> = if a.abs() < 1e-300 {
        if v < 0.0 {
            vec![-d / v]
        } else {
            vec![]
        }
    } else {
        let disc = v * v - 2.0 * a * d;
        if disc < 0.0 {
            vec![]
        } else {
            let q = -0.5 * (v + v.signum() * disc.sqrt());
            let mut r = vec![];
            if q != 0.0 {
                r.push(q / (0.5 * a));
                r.push(d / q);
            }
            r
        }
    };
    roots.into_iter().filter(|s| (0.0..=1.0).contains(s)).min_by(|a, b| a.total_cmp(b))
}

fn linear_crossing(prev: f64, next: f64, target: f64) -> Option<f64> {
    if next > target {
        None
    } else if prev <= target {
        Some(0.0)
    } else {
        Some((prev - target) / (prev - next))
    }
}

/// Years until the expected condition after the intervention returns to the
/// pre-intervention expected condition, or to a fixed threshold.
///
/// Within a year the mean trajectory follows the kinematic quadratic, so
/// zero-noise cases are exact. The band repeats the search on the mean
/// plus and minus two standard deviations, interpolated linearly.
pub fn service_life(
    pre_state: &GaussianState,
    eff: &InterventionEffect,
    pm: &ProcessModel,
    scale: ConditionScale,
    n: TransformParam,
    cap: usize,
    opts: ServiceLifeOptions,
) -> Result<ServiceLife> {
    if cap < 1 {
        return Err(Error::InvalidInput("service life horizon cap must be at least one year".into()));
    }
    if eff.delta_mean[0] <= 0.0 {
        return Ok(ServiceLife { years: 0.0, band_low: 0.0, band_high: 0.0, censored: false });
    }
    let target = match opts.threshold {
        Some(y) => to_unbounded(y, scale, n)?,
        None => pre_state.mean[0],
    };
    let mut state = apply_intervention(pre_state, eff)?;
    let band = |s: &GaussianState, k: f64| s.mean[0] + k * 2.0 * s.covariance[(0, 0)].max(0.0).sqrt();
    let mut years = None;
    let mut low = None;
    let mut high = None;
    for year in 0..cap {
        let next = constrain_speed(&predict(&state, pm.dt_unit, pm))?;
        let y = year as f64;
        if years.is_none() {
            let m = &state.mean;
            years = crossing_in_year(m[0], m[1], m[2], target).map(|s| y + s);
        }
        if low.is_none() {
            low = linear_crossing(band(&state, -1.0), band(&next, -1.0), target).map(|s| y + s);
        }
        if high.is_none() {
            high = linear_crossing(band(&state, 1.0), band(&next, 1.0), target).map(|s| y + s);
        }
        if years.is_some() && low.is_some() && high.is_some() {
            break;
        }
        state = next;
    }
    let capf = cap as f64;
    Ok(ServiceLife {
        years: years.unwrap_or(capf),
        band_low: low.unwrap_or(capf),
        band_high: high.unwrap_or(capf),
        censored: years.is_none(),
    })
}

pub const RECORD_CSV_HEADER: [&str; 3] = ["element_id", "year", "type_id"];
pub const EFFECT_CSV_HEADER: [&str; 7] =
    ["type_id", "d_cond", "d_speed", "d_accel", "var_cond", "var_speed", "var_accel"];

pub fn read_records_csv(path: &Path) -> Result<Vec<InterventionRecord>> {
    fsutil::read_csv_rows(path, &RECORD_CSV_HEADER)
}

pub fn write_records_csv(path: &Path, records: &[InterventionRecord]) -> Result<()> {
    fsutil::write_atomic(path, &fsutil::csv_bytes(path, records)?)
}

#[derive(Serialize, Deserialize)]
struct EffectRow {
    type_id: String,
    d_cond: f64,
    d_speed: f64,
    d_accel: f64,
    var_cond: f64,
    var_speed: f64,
    var_accel: f64,
}

pub fn effects_csv(path: &Path, effects: &[InterventionEffect]) -> Result<Vec<u8>> {
    fsutil::csv_bytes(
        path,
        effects.iter().map(|e| EffectRow {
            type_id: e.type_id.clone(),
            d_cond: e.delta_mean[0],
            d_speed: e.delta_mean[1],
            d_accel: e.delta_mean[2],
            var_cond: e.delta_cov[0][0],
            var_speed: e.delta_cov[1][1],
            var_accel: e.delta_cov[2][2],
        }),
    )
}

pub fn write_effects_csv(path: &Path, effects: &[InterventionEffect]) -> Result<()> {
    fsutil::write_atomic(path, &effects_csv(path, effects)?)
}
