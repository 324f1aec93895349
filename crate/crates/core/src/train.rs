//! Model parameters, dataset splitting, likelihood and maximum-likelihood fitting.
//!
//! The likelihood of a series is conditioned on its first inspection: the
//! condition prior at the first inspection year is centred on that rating,
//! so the arbitrary start of the record carries no information. A fixed
//! condition prior is available for callers that want the unconditional form.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::RunControl;
use crate::dataset::{Dataset, ElementSeries};
use crate::domain::{observation_to_transformed, ConditionScale, Gaussian1D, GaussianState, TransformParam};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::inspectors::{estimate_inspectors, InspectorBounds, InspectorModel, InspectorOptions, InspectorTable};
use crate::interventions::InterventionEffect;
use crate::kernel::{build_reference, kr_prior, KernelModel, BANDWIDTH_GRID};
use crate::numeric::pairwise_sum;
use crate::optim::{newton_step, NewtonSettings, StepKind};
use crate::ssm::{
    constrain_speed, filter_from_state, series_log_likelihood, smooth_series, FilterOptions, ProcessModel,
    SeriesResult, TimedObservation, DEFAULT_GATE,
};

pub const PARAMS_FORMAT: &str = "ipdm-model-params";
pub const PARAMS_VERSION: u32 = 1;

/// Global-parameter steps are capped at 2 on the log scale, a factor e^2.
const FIT_NEWTON: NewtonSettings = NewtonSettings { max_halvings: 10, max_step: 2.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    /// Added to the first inspection's own variance.
    pub condition_var: f64,
    /// Initial speed prior when no kernel model is in use.
    pub speed_mean: f64,
    pub speed_var: f64,
    pub accel_var: f64,
}

impl Default for PriorHyper {
    fn default() -> Self {
        Self { condition_var: 1.0, speed_mean: -0.5, speed_var: 0.5, accel_var: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub sigma_w: [f64; 2],
    /// Condition and speed prior variances.
    pub variance: [f64; 2],
    /// Acceleration prior variance. Its floor sits well below the others:
    /// the acceleration spread at a first inspection is of order
    /// `sigma_w^2 * t`, and a higher floor is absorbed by a smaller `sigma_w`.
    #[serde(default = "default_accel_variance")]
    pub accel_variance: [f64; 2],
    pub speed_mean: [f64; 2],
}

fn default_accel_variance() -> [f64; 2] {
    [1e-8, 1e4]
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            sigma_w: [1e-4, 1.0],
            variance: [1e-4, 1e4],
            accel_variance: default_accel_variance(),
            speed_mean: [-10.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConditionPrior {
    /// Centred on the first inspection, which is then consumed by the prior.
    #[default]
    FirstObservation,
    /// Fixed mean in transformed units at the first inspection year; every
    /// inspection contributes to the likelihood.
    Fixed { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub category: String,
    pub scale: ConditionScale,
    pub transform_n: TransformParam,
    pub sigma_w: f64,
    pub prior: PriorHyper,
    #[serde(default)]
    pub condition_prior: ConditionPrior,
    pub inspectors: InspectorTable,
    pub inspector_bounds: InspectorBounds,
    pub kernel: Option<KernelModel>,
    #[serde(default)]
    pub effects: Vec<InterventionEffect>,
    pub bounds: ParamBounds,
    /// Outlier gate for filtering and forecasting.
    pub gate: f64,
    /// Gate applied inside the training likelihood. `None` keeps every
    /// rating: a parameter-dependent gate lets the optimizer raise the
    /// likelihood by shrinking `sigma_v` until ratings drop out.
    #[serde(default)]
    pub likelihood_gate: Option<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            category: "default".into(),
            scale: ConditionScale::default(),
            transform_n: TransformParam::default(),
            sigma_w: 0.01,
            prior: PriorHyper::default(),
            condition_prior: ConditionPrior::default(),
            inspectors: InspectorTable::new(),
            inspector_bounds: InspectorBounds::default(),
            kernel: None,
            effects: Vec::new(),
            bounds: ParamBounds::default(),
            gate: DEFAULT_GATE,
            likelihood_gate: None,
        }
    }
}

impl ModelParams {
    pub fn process_model(&self) -> ProcessModel {
        ProcessModel::new(self.sigma_w)
    }

    /// Known inspectors by reference; anything else gets `sigma_max`.
    pub fn inspector(&self, id: &str) -> Cow<'_, InspectorModel> {
        match self.inspectors.get(id) {
            Some(m) => Cow::Borrowed(m),
            None => Cow::Owned(InspectorModel::new(id, 0.0, self.inspector_bounds.sigma_max)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let inside = |v: f64, r: [f64; 2]| v.is_finite() && v >= r[0] && v <= r[1];
        if [b.sigma_w, b.variance, b.accel_variance, b.speed_mean]
            .iter()
            .any(|r| !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]))
        {
            return Err(Error::InvalidInput("parameter bounds must be finite and ordered".into()));
        }
        for gp in GlobalParam::ALL {
            let v = gp.value(self);
            if !inside(v, gp.bounds(b)) {
                return Err(Error::InvalidInput(format!("{} = {v} outside its bounds", gp.name())));
            }
        }
        if !(self.gate > 0.0) || self.likelihood_gate.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::InvalidInput("outlier gate must be positive".into()));
        }
        Ok(())
    }

    /// Initial speed prior for an element.
    pub fn speed_prior(&self, e: &ElementSeries) -> Result<Gaussian1D> {
        match &self.kernel {
            Some(km) if e.attributes.len() == km.dim() => Ok(kr_prior(&e.attributes, km)?.gaussian),
            _ => Ok(Gaussian1D { mean: self.prior.speed_mean, variance: self.prior.speed_var }),
        }
    }

    pub fn effect(&self, type_id: &str) -> Option<&InterventionEffect> {
        self.effects.iter().find(|e| e.type_id == type_id)
    }
}

/// The continuous global parameters optimized by Newton-Raphson.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalParam {
    SigmaW,
    ConditionVar,
    SpeedMean,
    SpeedVar,
    AccelVar,
}

impl GlobalParam {
    pub const ALL: [GlobalParam; 5] =
        [Self::SigmaW, Self::ConditionVar, Self::SpeedMean, Self::SpeedVar, Self::AccelVar];

    pub fn name(self) -> &'static str {
        match self {
            Self::SigmaW => "sigma_w",
            Self::ConditionVar => "condition_var",
            Self::SpeedMean => "speed_mean",
            Self::SpeedVar => "speed_var",
            Self::AccelVar => "accel_var",
        }
    }

    /// Positive parameters are optimized on the log scale.
    pub fn is_log(self) -> bool {
        self != Self::SpeedMean
    }

    pub fn value(self, p: &ModelParams) -> f64 {
        match self {
            Self::SigmaW => p.sigma_w,
            Self::ConditionVar => p.prior.condition_var,
            Self::SpeedMean => p.prior.speed_mean,
            Self::SpeedVar => p.prior.speed_var,
            Self::AccelVar => p.prior.accel_var,
        }
    }

    pub fn set(self, p: &mut ModelParams, v: f64) {
        match self {
            Self::SigmaW => p.sigma_w = v,
            Self::ConditionVar => p.prior.condition_var = v,
            Self::SpeedMean => p.prior.speed_mean = v,
            Self::SpeedVar => p.prior.speed_var = v,
            Self::AccelVar => p.prior.accel_var = v,
        }
    }

    pub fn bounds(self, b: &ParamBounds) -> [f64; 2] {
        match self {
            Self::SigmaW => b.sigma_w,
            Self::SpeedMean => b.speed_mean,
            Self::AccelVar => b.accel_variance,
            _ => b.variance,
        }
    }

    pub fn to_theta(self, v: f64) -> f64 {
        if self.is_log() {
            v.ln()
        } else {
            v
        }
    }

    pub fn from_theta(self, t: f64) -> f64 {
        if self.is_log() {
            t.exp()
        } else {
            t
        }
    }
}

pub fn params_to_theta(p: &ModelParams, free: &[GlobalParam]) -> Vec<f64> {
    free.iter().map(|g| g.to_theta(g.value(p))).collect()
}

pub fn params_from_theta(p: &ModelParams, free: &[GlobalParam], theta: &[f64]) -> ModelParams {
    let mut out = p.clone();
    for (g, &t) in free.iter().zip(theta) {
        let [lo, hi] = g.bounds(&p.bounds);
        g.set(&mut out, g.from_theta(t).clamp(lo, hi));
    }
    out
}

pub fn theta_bounds(p: &ModelParams, free: &[GlobalParam]) -> (Vec<f64>, Vec<f64>) {
    free.iter()
        .map(|g| {
            let [lo, hi] = g.bounds(&p.bounds);
            (g.to_theta(lo), g.to_theta(hi))
        })
        .unzip()
}

/// A series ready for filtering: the state at the first inspection and the
/// inspections that remain to be assimilated.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSeries {
    pub initial: GaussianState,
    pub observations: Vec<TimedObservation>,
    /// Index into `ElementSeries::inspections` of every entry of `observations`.
    pub sources: Vec<usize>,
    /// Source index of the inspection consumed by the prior, if any.
    pub first: Option<usize>,
}

/// `None` when the element has no rated inspection.
pub fn prepare_series(e: &ElementSeries, params: &ModelParams) -> Result<Option<PreparedSeries>> {
    let mut rated = e.inspections.iter().enumerate().filter_map(|(k, i)| i.condition.map(|c| (k, i, c)));
    let Some((k1, i1, y1)) = rated.next() else { return Ok(None) };
    let transform = |insp: &crate::dataset::Inspection, y: f64| -> Result<Gaussian1D> {
        Ok(observation_to_transformed(y, &params.inspector(&insp.inspector), params.scale, params.transform_n)?
            .gaussian)
    };
    let speed = params.speed_prior(e)?;
    let hp = &params.prior;
    let mut observations = Vec::new();
    let mut sources = Vec::new();
    let (cond_mean, cond_var, first) = match params.condition_prior {
        ConditionPrior::FirstObservation => {
            let g = transform(i1, y1)?;
            (g.mean, g.variance + hp.condition_var, Some(k1))
        }
        ConditionPrior::Fixed { mean } => {
            observations.push(TimedObservation { time: i1.year, obs: transform(i1, y1)? });
            sources.push(k1);
            (mean, hp.condition_var, None)
        }
    };
    for (k, i, y) in rated {
        observations.push(TimedObservation { time: i.year, obs: transform(i, y)? });
        sources.push(k);
    }
    let state = GaussianState::new(
        i1.year,
        Vector3::new(cond_mean, speed.mean, 0.0),
        Matrix3::from_diagonal(&Vector3::new(cond_var, speed.variance, hp.accel_var)),
    );
    Ok(Some(PreparedSeries { initial: constrain_speed(&state)?, observations, sources, first }))
}

/// Log-likelihood of one element; zero for an element without ratings.
pub fn element_loglik(e: &ElementSeries, params: &ModelParams) -> Result<f64> {
    let Some(prep) = prepare_series(e, params)? else { return Ok(0.0) };
    let gate = params.likelihood_gate.unwrap_or(f64::INFINITY);
    let ll = series_log_likelihood(&prep.observations, prep.initial, &params.process_model(), gate)?;
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood(e.id.clone()));
    }
    Ok(ll)
}

/// Sum over elements, evaluated in parallel and reduced in a fixed tree
/// order so the value does not depend on the thread count.
pub fn total_loglik(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let terms = dataset.elements.par_iter().map(|e| element_loglik(e, params)).collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&terms))
}

/// Filters an element on its inspection grid and smooths it. `None` for an
/// element without ratings.
pub fn smooth_element(e: &ElementSeries, params: &ModelParams) -> Result<Option<SeriesResult>> {
    let Some(prep) = prepare_series(e, params)? else { return Ok(None) };
    let f = filter_from_state(
        &prep.observations,
        prep.initial,
        &params.process_model(),
        &FilterOptions::observations_only(params.gate),
    )?;
    Ok(Some(smooth_series(&f)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.7, validation: 0.15, test: 0.15, seed: 42 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split fractions must be non-negative and sum to 1, got {:?}", f)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Seeded element-level partition of `0..n`. Sizes use floor plus largest
/// remainder; each part lists indices in ascending order.
pub fn split(n: usize, cfg: &SplitConfig) -> Result<Split> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    let fr = [cfg.train, cfg.validation, cfg.test];
    let raw: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut left = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fr[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    let names = ["train", "validation", "test"];
    let warnings = (0..3)
        .filter(|&i| fr[i] > 0.0 && sizes[i] == 0)
        .map(|i| format!("{} fraction {} rounds to zero of {n} elements", names[i], fr[i]))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut at = 0;
    for i in 0..3 {
        parts[i] = perm[at..at + sizes[i]].to_vec();
        parts[i].sort_unstable();
        at += sizes[i];
    }
    let [train, validation, test] = parts;
    Ok(Split { train, validation, test, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Bandwidth group of every attribute dimension; `None` means one group
    /// per dimension.
    pub groups: Option<Vec<usize>>,
    pub grid: Vec<f64>,
    pub passes: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { groups: None, grid: BANDWIDTH_GRID.to_vec(), passes: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative train log-likelihood improvement below which fitting stops.
    pub tol: f64,
    pub split: SplitConfig,
    pub free: Vec<GlobalParam>,
    pub estimate_inspectors: bool,
    pub inspector: InspectorOptions,
    /// Kernel-regression speed prior; `None` fits the plain state-space model.
    pub kernel: Option<KernelOptions>,
    pub control: RunControl,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            split: SplitConfig::default(),
            free: GlobalParam::ALL.to_vec(),
            estimate_inspectors: true,
            inspector: InspectorOptions { max_sweeps: 1, ..InspectorOptions::default() },
            kernel: None,
            control: RunControl::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Train log-likelihood of the initial params and after each iteration.
    pub train_loglik: Vec<f64>,
    pub validation_loglik: Vec<f64>,
    pub best_validation_loglik: f64,
    /// Iteration whose params are returned; 0 is the initial point.
    pub best_iteration: usize,
    pub convergence: Convergence,
    /// Iterations that used a gradient step instead of Newton.
    pub gradient_fallbacks: Vec<usize>,
    pub split_sizes: [usize; 3],
    pub warnings: Vec<String>,
    pub params: ModelParams,
}

/// Maximum-likelihood fit with early stopping on the validation split.
///
/// Each outer iteration takes one projected Newton step on the global
/// parameters, one inspector sweep, then refits the kernel bandwidths when
/// enabled. Every stage is accepted only if the train log-likelihood does
/// not decrease.
pub fn fit(params0: &ModelParams, dataset: &Dataset, opts: &FitOptions) -> Result<FitReport> {
    params0.validate()?;
    let sp = split(dataset.len(), &opts.split)?;
    let mut warnings = sp.warnings.clone();
    let train = dataset.subset(&sp.train);
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let validation = if sp.validation.is_empty() {
        warnings.push("validation split is empty; early stopping uses the training split".into());
        train.clone()
    } else {
        dataset.subset(&sp.validation)
    };
    let control = &opts.control;
    control.add_total(opts.max_iter as u64);

    let free: Vec<GlobalParam> = opts
        .free
        .iter()
        .copied()
        .filter(|g| {
            let kernel_prior = params0.kernel.is_some() || opts.kernel.is_some();
            !(kernel_prior && matches!(g, GlobalParam::SpeedMean | GlobalParam::SpeedVar))
        })
        .collect();
    let (lo, hi) = theta_bounds(params0, &free);

    let mut params = params0.clone();
    let mut train_ll = total_loglik(&params, &train)?;
    let val0 = total_loglik(&params, &validation)?;
    let mut report = FitReport {
        iterations: 0,
        train_loglik: vec![train_ll],
        validation_loglik: vec![val0],
        best_validation_loglik: val0,
        best_iteration: 0,
        convergence: Convergence::IterationCap,
        gradient_fallbacks: Vec::new(),
        split_sizes: [sp.train.len(), sp.validation.len(), sp.test.len()],
        warnings,
        params: params0.clone(),
    };

    for it in 1..=opts.max_iter {
        control.check()?;
        let prev = train_ll;
        if !free.is_empty() {
            let base = params.clone();
            let f = |t: &[f64]| total_loglik(&params_from_theta(&base, &free, t), &train);
            let step = newton_step(&f, &params_to_theta(&params, &free), train_ll, &lo, &hi, &FIT_NEWTON)?;
            if step.kind == StepKind::GradientFallback {
                report.gradient_fallbacks.push(it);
            }
            if step.accepted {
                params = params_from_theta(&params, &free, &step.theta);
                train_ll = step.value;
            }
        }
        if opts.estimate_inspectors {
            let est = estimate_inspectors(&train, &params, &opts.inspector, control)?;
            if est.loglik() >= train_ll {
                train_ll = est.loglik();
                params.inspectors = est.table;
            }
        }
        if let Some(kopts) = &opts.kernel {
            match fit_kernel(&params, &train, &validation, kopts) {
                Ok(km) => {
                    let mut cand = params.clone();
                    cand.kernel = Some(km);
                    let ll = total_loglik(&cand, &train)?;
                    if ll >= train_ll {
                        params = cand;
                        train_ll = ll;
                    }
                }
                Err(e) => report.warnings.push(format!("iteration {it}: kernel fit skipped: {e}")),
            }
        }
        let val = total_loglik(&params, &validation)?;
        report.iterations = it;
        report.train_loglik.push(train_ll);
        report.validation_loglik.push(val);
        if val > report.best_validation_loglik {
            report.best_validation_loglik = val;
            report.best_iteration = it;
            report.params = params.clone();
        }
        control.advance(1);
        if (train_ll - prev) <= opts.tol * prev.abs().max(1e-300) {
            report.convergence = Convergence::Converged;
            break;
        }
    }
    Ok(report)
}

/// Bandwidth grid search on the validation log-likelihood.
///
/// Reference speeds are the smoothed speeds at the first inspection of the
/// training elements; `sigma_KR^2` is the mean squared residual of the
/// validation elements' smoothed speeds around the kernel mean.
pub fn fit_kernel(
    params: &ModelParams,
    train: &Dataset,
    validation: &Dataset,
    opts: &KernelOptions,
) -> Result<KernelModel> {
    let speeds = |ds: &Dataset| -> Result<Vec<(Vec<f64>, f64)>> {
        ds.elements
            .par_iter()
            .filter(|e| !e.attributes.is_empty())
            .map(|e| Ok(smooth_element(e, params)?.map(|s| (e.attributes.clone(), s.smoothed[0].mean[1]))))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    };
    let reference = speeds(train)?;
    let targets = speeds(validation)?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("no validation element carries attributes".into()));
    }
    let mut km = build_reference(&reference, opts.groups.as_deref(), 1.0)?;
    if let Some(prev) = &params.kernel {
        if prev.bandwidths.len() == km.bandwidths.len() {
            km.bandwidths = prev.bandwidths.clone();
        }
    }
    let score = |km: &KernelModel| -> Result<(f64, KernelModel)> {
        let mut km = km.clone();
        km.noise_var = 1.0;
        let mut sq = Vec::with_capacity(targets.len());
        for (z, v) in &targets {
            let m = kr_prior(z, &km)?.gaussian.mean;
            sq.push((v - m) * (v - m));
        }
        km.noise_var = (pairwise_sum(&sq) / sq.len() as f64).max(1e-6);
        let mut p = params.clone();
        p.kernel = Some(km.clone());
        Ok((total_loglik(&p, validation)?, km))
    };
    let (mut best, mut best_km) = score(&km)?;
    for _ in 0..opts.passes {
        for g in 0..km.n_groups() {
            if km.fixed[g] {
                continue;
            }
            for &l in &opts.grid {
                let mut cand = best_km.clone();
                cand.bandwidths[g] = l;
                let (s, ckm) = score(&cand)?;
                if s > best {
                    best = s;
                    best_km = ckm;
                }
            }
        }
    }
    km = best_km;
    Ok(km)
}

pub type CategoryResult = std::result::Result<FitReport, String>;

/// Independent fits per structural category, in parallel. The inspector
/// table is estimated once on the union of the training splits and then
/// held fixed. A failing category is reported without affecting the others.
pub fn fit_categories(
    datasets: &BTreeMap<String, Dataset>,
    params0: &ModelParams,
    opts: &FitOptions,
) -> Result<BTreeMap<String, CategoryResult>> {
    if datasets.len() == 1 {
        let (name, ds) = datasets.iter().next().expect("one category");
        let mut p = params0.clone();
        p.category = name.clone();
        return Ok(BTreeMap::from([(name.clone(), fit(&p, ds, opts).map_err(|e| e.to_string()))]));
    }
    let mut shared = params0.clone();
    if opts.estimate_inspectors {
        let mut union = Dataset::default();
        for ds in datasets.values() {
            if let Ok(sp) = split(ds.len(), &opts.split) {
                union.elements.extend(ds.subset(&sp.train).elements);
            }
        }
        let inspector_opts =
            InspectorOptions { max_sweeps: InspectorOptions::default().max_sweeps, ..opts.inspector.clone() };
        shared.inspectors = estimate_inspectors(&union, &shared, &inspector_opts, &opts.control)?.table;
    }
    let per = FitOptions { estimate_inspectors: false, ..opts.clone() };
    let results: Vec<(String, CategoryResult)> = datasets
        .par_iter()
        .map(|(name, ds)| {
            let mut p = shared.clone();
            p.category = name.clone();
            (name.clone(), fit(&p, ds, &per).map_err(|e| e.to_string()))
        })
        .collect();
    Ok(results.into_iter().collect())
}

#[derive(Serialize, Deserialize)]
struct ParamsArtifact {
    format: String,
    version: u32,
    params: ModelParams,
}

pub fn params_file_name(category: &str) -> String {
    format!("params_{}.ipdm", fsutil::escape_name(category))
}

pub fn params_to_json(params: &ModelParams) -> Result<String> {
    let a = ParamsArtifact { format: PARAMS_FORMAT.into(), version: PARAMS_VERSION, params: params.clone() };
    serde_json::to_string_pretty(&a)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Other(format!("serializing params: {e}")))
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    fsutil::write_atomic(path, params_to_json(params)?.as_bytes())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let text = fsutil::read_to_string(path)?;
    let a: ParamsArtifact =
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.line() as u64, e.to_string()))?;
    if a.format != PARAMS_FORMAT {
        return Err(Error::schema(path, 1, format!("unexpected format {:?}", a.format)));
    }
    if a.version != PARAMS_VERSION {
        return Err(Error::schema(path, 1, format!("unsupported version {}", a.version)));
    }
    Ok(a.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Inspection;

    fn element(id: &str, obs: &[(f64, f64, &str)]) -> ElementSeries {
        ElementSeries::new(
            id,
            "c",
            obs.iter().map(|&(y, c, i)| Inspection { year: y, condition: Some(c), inspector: i.into() }).collect(),
        )
    }

    #[test]
    fn split_examples() {
        let s = split(10, &SplitConfig { train: 0.6, validation: 0.2, test: 0.2, seed: 42 }).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split(10, &SplitConfig { train: 0.6, validation: 0.2, test: 0.2, seed: 42 }).unwrap());
        let all_train = split(7, &SplitConfig { train: 1.0, validation: 0.0, test: 0.0, seed: 1 }).unwrap();
        assert_eq!(all_train.train, (0..7).collect::<Vec<_>>());
        assert!(all_train.warnings.is_empty());
    }

    #[test]
    fn split_rounding_warns() {
        let s = split(3, &SplitConfig { train: 0.9, validation: 0.05, test: 0.05, seed: 0 }).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 3);
        assert!(!s.warnings.is_empty());
        assert!(split(0, &SplitConfig::default()).is_err());
        assert!(split(3, &SplitConfig { train: 0.5, validation: 0.2, test: 0.2, seed: 0 }).is_err());
    }

    #[test]
    fn single_observation_fixed_prior_density() {
        let mut p = ModelParams { condition_prior: ConditionPrior::Fixed { mean: 0.0 }, ..Default::default() };
        p.prior.condition_var = 4.0;
        p.inspectors.insert("z".into(), InspectorModel::new("z", 0.0, 0.0));
        // rating at the midpoint maps to 0 in transformed space
        let ds = Dataset::new(vec![element("e", &[(2000.0, 62.5, "z")])]);
        let ll = total_loglik(&p, &ds).unwrap();
        assert!((ll - (1.0 / (8.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_and_duplicated() {
        let p = ModelParams::default();
        assert_eq!(total_loglik(&p, &Dataset::default()).unwrap(), 0.0);
        let e = element("a", &[(2000.0, 90.0, "i"), (2003.0, 85.0, "i"), (2007.0, 80.0, "j")]);
        let one = total_loglik(&p, &Dataset::new(vec![e.clone()])).unwrap();
        let two = total_loglik(&p, &Dataset::new(vec![e.clone(), e])).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let p = ModelParams::default();
        let ds = Dataset::new(
            (0..5).map(|k| element(&k.to_string(), &[(2000.0, 90.0, "i"), (2004.0, 84.0 - k as f64, "i")])).collect(),
        );
        let r = fit(&p, &ds, &FitOptions { max_iter: 0, ..Default::default() }).unwrap();
        assert_eq!(r.convergence, Convergence::IterationCap);
        assert_eq!(r.params, p);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(params_file_name("beams"));
        let mut p = ModelParams { category: "beams".into(), ..Default::default() };
        p.inspectors.insert("a".into(), InspectorModel::new("a", 0.5, 2.0));
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
        std::fs::write(&path, r#"{"format":"other","version":1}"#).unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn out_of_bounds_params_rejected() {
        let p = ModelParams { sigma_w: 2.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
