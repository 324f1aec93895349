//! Artifact-producing operations. The CLI verbs and the job API both call
//! these with the same job structs, so their outputs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ipdm_core::control::RunControl;
use ipdm_core::dataset::Dataset;
use ipdm_core::domain::{ConditionScale, TransformParam};
use ipdm_core::fsutil;
use ipdm_core::ingest::{self, ColumnMapping, NetworkStore};
use ipdm_core::interventions::{self, InterventionRecord};
use ipdm_core::ssm::{condition_summary, filter_from_state, forecast, smooth_series, FilterOptions};
use ipdm_core::synth::{self, SynthConfig, SyntheticDataset};
use ipdm_core::train::{self, FitOptions, KernelOptions, ModelParams, SplitConfig};
use ipdm_core::verify;
use ipdm_core::{Error, Result};

use crate::plot;

pub fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| Error::Other(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fsutil::write_atomic(path, &json_bytes(v)?)
}

/// Inspection data behind a directory: a synthetic export or a persisted
/// store.
pub enum DataSource {
    Synthetic(Box<SyntheticDataset>),
    Store(NetworkStore),
}

impl DataSource {
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(synth::OBSERVED_FILE).is_file() {
            Ok(Self::Synthetic(Box::new(synth::import(dir)?)))
        } else if dir.join(ingest::INDEX_FILE).is_file() {
            Ok(Self::Store(ingest::load_store(dir)?))
        } else {
            Err(Error::InvalidInput(format!(
                "{} holds neither a synthetic dataset ({}) nor a store ({})",
                dir.display(),
                synth::OBSERVED_FILE,
                ingest::INDEX_FILE
            )))
        }
    }

    pub fn dataset(&self) -> Dataset {
        match self {
            Self::Synthetic(s) => s.dataset.clone(),
            Self::Store(s) => s.to_dataset(),
        }
    }

    pub fn scale(&self) -> ConditionScale {
        match self {
            Self::Synthetic(s) => s.config.scale,
            Self::Store(s) => s.scale,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateJob {
    pub config: SynthConfig,
}

pub fn generate(job: &GenerateJob, out: &Path, control: &RunControl) -> Result<Vec<String>> {
    let ds = synth::generate(&job.config, control)?;
    control.check()?;
    synth::export(&ds, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub data: PathBuf,
    pub max_iter: usize,
    pub tol: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub transform_n: f64,
    pub sigma_w: f64,
    pub estimate_inspectors: bool,
    pub kernel: bool,
}

impl Default for TrainJob {
    fn default() -> Self {
        let s = SplitConfig::default();
        Self {
            data: PathBuf::new(),
            max_iter: 50,
            tol: 1e-6,
            split: [s.train, s.validation, s.test],
            seed: s.seed,
            transform_n: 4.0,
            sigma_w: ModelParams::default().sigma_w,
            estimate_inspectors: true,
            kernel: false,
        }
    }
}

#[derive(Serialize)]
struct FitSummary<'a> {
    category: &'a str,
    iterations: usize,
    convergence: train::Convergence,
    best_iteration: usize,
    best_validation_loglik: f64,
    train_loglik: &'a [f64],
    validation_loglik: &'a [f64],
    gradient_fallbacks: &'a [usize],
    split_sizes: [usize; 3],
    warnings: &'a [String],
}

/// `params_<category>.ipdm` and `fit_<category>.json` per category; failed
/// categories are listed in `fit_errors.json`.
pub fn train(job: &TrainJob, out: &Path, control: &RunControl) -> Result<Vec<String>> {
    let src = DataSource::load(&job.data)?;
    let ds = src.dataset();
    if ds.is_empty() {
        return Err(Error::InvalidInput("dataset has no elements".into()));
    }
    let split = SplitConfig { train: job.split[0], validation: job.split[1], test: job.split[2], seed: job.seed };
    split.validate()?;
    let params0 = ModelParams {
        scale: src.scale(),
        transform_n: TransformParam::new(job.transform_n)?,
        sigma_w: job.sigma_w,
        ..ModelParams::default()
    };
    let opts = FitOptions {
        max_iter: job.max_iter,
        tol: job.tol,
        split,
        estimate_inspectors: job.estimate_inspectors,
        kernel: job.kernel.then(KernelOptions::default),
        control: control.clone(),
        ..FitOptions::default()
    };
    let results = train::fit_categories(&ds.by_category(), &params0, &opts)?;
    control.check()?;
    fsutil::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut errors = BTreeMap::new();
    for (cat, r) in &results {
        match r {
            Ok(rep) => {
                let name = train::params_file_name(cat);
                train::save_params(&out.join(&name), &rep.params)?;
                files.push(name);
                let summary = FitSummary {
                    category: cat,
                    iterations: rep.iterations,
                    convergence: rep.convergence,
                    best_iteration: rep.best_iteration,
                    best_validation_loglik: rep.best_validation_loglik,
                    train_loglik: &rep.train_loglik,
                    validation_loglik: &rep.validation_loglik,
                    gradient_fallbacks: &rep.gradient_fallbacks,
                    split_sizes: rep.split_sizes,
                    warnings: &rep.warnings,
                };
                let name = format!("fit_{}.json", fsutil::escape_name(cat));
                write_json(&out.join(&name), &summary)?;
                files.push(name);
            }
            Err(e) => {
                errors.insert(cat.clone(), e.clone());
            }
        }
    }
    if !errors.is_empty() {
        write_json(&out.join("fit_errors.json"), &errors)?;
        files.push("fit_errors.json".into());
    }
    if errors.len() == results.len() {
        return Err(Error::Other(format!("every category failed: {errors:?}")));
    }
    Ok(files)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionsJob {
    pub data: PathBuf,
    /// Defaults to the dataset's own `interventions.csv`.
    pub records: Option<PathBuf>,
    pub params: PathBuf,
}

#[derive(Serialize)]
struct EffectSummary {
    type_id: String,
    effect: Option<interventions::InterventionEffect>,
    raw_condition: Option<f64>,
    pooled_std: Option<[f64; 3]>,
    n_elements: usize,
    skipped: Vec<String>,
    error: Option<String>,
}

/// `effects.csv`, `effects.json` and the params file with the effects set.
pub fn train_interventions(job: &InterventionsJob, out: &Path, control: &RunControl) -> Result<Vec<String>> {
    let ds = DataSource::load(&job.data)?.dataset();
    let records_path = job.records.clone().unwrap_or_else(|| job.data.join(synth::INTERVENTIONS_FILE));
    let records: Vec<InterventionRecord> = interventions::read_records_csv(&records_path)?;
    let mut params = train::load_params(&job.params)?;
    control.check()?;
    let estimates = interventions::estimate_effects(&ds, &records, &params);
    let mut summaries = Vec::new();
    let mut effects = Vec::new();
    for (type_id, r) in estimates {
        match r {
            Ok(est) => {
                summaries.push(EffectSummary {
                    type_id,
                    effect: Some(est.effect.clone()),
                    raw_condition: Some(est.raw_condition),
                    pooled_std: Some(est.pooled_std()),
                    n_elements: est.elements.len(),
                    skipped: est.skipped.clone(),
                    error: None,
                });
                effects.push(est.effect);
            }
            Err(e) => summaries.push(EffectSummary {
                type_id,
                effect: None,
                raw_condition: None,
                pooled_std: None,
                n_elements: 0,
                skipped: Vec::new(),
                error: Some(e.to_string()),
            }),
        }
    }
    if effects.is_empty() {
        return Err(Error::Unidentifiable("no intervention type has elements with data on both sides".into()));
    }
    fsutil::create_dir_all(out)?;
    interventions::write_effects_csv(&out.join("effects.csv"), &effects)?;
    write_json(&out.join("effects.json"), &summaries)?;
    params.effects = effects;
    let name = train::params_file_name(&params.category);
    train::save_params(&out.join(&name), &params)?;
    Ok(vec!["effects.csv".into(), "effects.json".into(), name])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyJob {
    pub data: PathBuf,
    pub params: PathBuf,
    pub horizon: usize,
    pub elements: usize,
    pub seed: u64,
    /// Inspectors with fewer observations are left out of the recovery table.
    pub min_obs: usize,
}

impl Default for VerifyJob {
    fn default() -> Self {
        Self { data: PathBuf::new(), params: PathBuf::new(), horizon: 10, elements: 200, seed: 1, min_obs: 50 }
    }
}

#[derive(Serialize)]
struct ElementErrorRow<'a> {
    element_id: &'a str,
    cut_year: f64,
    horizon_year: usize,
    condition: f64,
    speed: f64,
    acceleration: f64,
    condition_units: f64,
}

#[derive(Serialize)]
struct VerifyMeta<'a> {
    horizon: usize,
    elements_requested: usize,
    elements_used: usize,
    seed: u64,
    band_semantics: &'a str,
    warnings: &'a [String],
    inspector_spearman: Option<f64>,
    inspector_rmse: Option<f64>,
    inspectors_compared: usize,
}

/// Forecast-error reports (`signed/`, `absolute/`), the condition-unit view,
/// raw per-element errors, and parameter recovery tables.
pub fn verify(job: &VerifyJob, out: &Path, control: &RunControl) -> Result<Vec<String>> {
    let sds = synth::import(&job.data)?;
    let params = train::load_params(&job.params)?;
    let rep = verify::forecast_error_report(&sds, &params, job.horizon, job.elements, job.seed, control)?;
    fsutil::create_dir_all(out)?;
    let mut files = Vec::new();
    for (sub, r) in [("signed", &rep.signed), ("absolute", &rep.absolute)] {
        for f in verify::render_report(r, &out.join(sub))? {
            files.push(format!("{sub}/{f}"));
        }
    }
    let p = out.join("condition_units.csv");
    fsutil::write_atomic(&p, &verify::report_csv(&p, &rep.condition_units)?)?;
    files.push("condition_units.csv".into());
    let rows = rep.elements.iter().flat_map(|e| {
        e.errors.iter().zip(&e.condition_units).enumerate().map(|(j, (x, cu))| ElementErrorRow {
            element_id: &e.element_id,
            cut_year: e.cut_year,
            horizon_year: j + 1,
            condition: x[0],
            speed: x[1],
            acceleration: x[2],
            condition_units: *cu,
        })
    });
    let p = out.join("element_errors.csv");
    fsutil::write_atomic(&p, &fsutil::csv_bytes(&p, rows)?)?;
    files.push("element_errors.csv".into());

    let rec = verify::recovery_report(&params, &sds, job.min_obs);
    let p = out.join("recovery.csv");
    fsutil::write_atomic(&p, &verify::recovery_csv(&p, &rec)?)?;
    files.push("recovery.csv".into());
    if let Some(ir) = &rec.inspectors {
        let p = out.join("inspector_recovery.csv");
        fsutil::write_atomic(&p, &fsutil::csv_bytes(&p, &ir.rows)?)?;
        files.push("inspector_recovery.csv".into());
    }
    let meta = VerifyMeta {
        horizon: job.horizon,
        elements_requested: job.elements,
        elements_used: rep.elements.len(),
        seed: job.seed,
        band_semantics: &rep.band_semantics,
        warnings: &rep.warnings,
        inspector_spearman: rec.inspectors.as_ref().and_then(|r| r.spearman),
        inspector_rmse: rec.inspectors.as_ref().map(|r| r.rmse),
        inspectors_compared: rec.inspectors.as_ref().map_or(0, |r| r.n_compared),
    };
    write_json(&out.join("verify_meta.json"), &meta)?;
    files.push("verify_meta.json".into());
    Ok(files)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateJob {
    pub old: PathBuf,
    pub new: PathBuf,
    pub params: PathBuf,
}

#[derive(Serialize)]
struct ValidationSummary {
    n_new: usize,
    mean_standardized: f64,
    std_standardized: f64,
    standard_error: f64,
    total_loglik: f64,
    skipped: usize,
}

/// `validation.json` plus one row per new inspection in `innovations.csv`.
pub fn validate(job: &ValidateJob, out: &Path, control: &RunControl) -> Result<Vec<String>> {
    let old = DataSource::load(&job.old)?.dataset();
    let new = DataSource::load(&job.new)?.dataset();
    let params = train::load_params(&job.params)?;
    control.check()?;
    let r = verify::validate_holdout(&old, &new, &params)?;
    fsutil::create_dir_all(out)?;
    write_json(
        &out.join("validation.json"),
        &ValidationSummary {
            n_new: r.n_new,
            mean_standardized: r.mean_standardized,
            std_standardized: r.std_standardized,
            standard_error: r.standard_error,
            total_loglik: r.total_loglik,
            skipped: r.skipped,
        },
    )?;
    let p = out.join("innovations.csv");
    fsutil::write_atomic(&p, &fsutil::csv_bytes(&p, &r.innovations)?)?;
    Ok(vec!["validation.json".into(), "innovations.csv".into()])
}

/// Reads a CSV export through a mapping and persists the store.
pub fn ingest(
    csv: &Path,
    mapping: &Path,
    scale: ConditionScale,
    out: &Path,
) -> Result<(Vec<String>, ingest::IngestSummary)> {
    let m = ColumnMapping::load(mapping)?;
    let (store, summary) = ingest::read_csv(csv, &m, scale)?;
    let mut files = ingest::preprocess(&store, out)?;
    write_json(&out.join("ingest_summary.json"), &summary)?;
    files.push("ingest_summary.json".into());
    Ok((files, summary))
}

/// Re-persists a loaded store.
pub fn preprocess(store: &Path, out: &Path) -> Result<Vec<String>> {
    ingest::preprocess(&ingest::load_store(store)?, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationView {
    pub year: f64,
    pub condition: Option<f64>,
    pub inspector: String,
    /// Inspector error sd in condition units (error bars are +-2 sd).
    pub sigma_v: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub year: f64,
    /// `smoothed` or `forecast`.
    pub kind: String,
    pub condition_mean: f64,
    pub condition_low: f64,
    pub condition_high: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
    pub acceleration_mean: f64,
    pub acceleration_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeteriorationAnalysis {
    pub element: String,
    pub horizon: usize,
    pub scale: ConditionScale,
    pub observations: Vec<ObservationView>,
    pub states: Vec<StateView>,
}

/// Smoothed states on a yearly grid plus a `horizon`-year forecast, in
/// condition units for the condition and transformed units otherwise.
pub fn analyze(
    series: &ipdm_core::dataset::ElementSeries,
    horizon: usize,
    params: &ModelParams,
) -> Result<DeteriorationAnalysis> {
    let prep = train::prepare_series(series, params)?
        .ok_or_else(|| Error::InvalidInput(format!("element {} has no rated inspection", series.id)))?;
    let pm = params.process_model();
    let f = filter_from_state(&prep.observations, prep.initial, &pm, &FilterOptions::with_gate(params.gate))?;
    let s = smooth_series(&f)?;
    let mut outlier = vec![false; series.inspections.len()];
    for (k, &src) in prep.sources.iter().enumerate() {
        outlier[src] = f.outlier_flags[k];
    }
    let observations = series
        .inspections
        .iter()
        .zip(outlier)
        .map(|(i, o)| ObservationView {
            year: i.year,
            condition: i.condition,
            inspector: i.inspector.clone(),
            sigma_v: params.inspector(&i.inspector).sigma_v,
            outlier: o,
        })
        .collect();
    let view = |kind: &str, p: ipdm_core::ssm::ForecastPoint| StateView {
        year: p.state.time,
        kind: kind.into(),
        condition_mean: p.condition_mean,
        condition_low: p.band_low,
        condition_high: p.band_high,
        speed_mean: p.state.mean[1],
        speed_sd: p.state.speed().std(),
        acceleration_mean: p.state.mean[2],
        acceleration_sd: p.state.acceleration().std(),
    };
    let mut states = Vec::new();
    for st in &s.smoothed {
        states.push(view("smoothed", condition_summary(st, params.scale, params.transform_n)?));
    }
    for p in forecast(f.last_filtered(), horizon, &pm, params.scale, params.transform_n)? {
        states.push(view("forecast", p));
    }
    Ok(DeteriorationAnalysis { element: series.id.clone(), horizon, scale: params.scale, observations, states })
}

/// `analysis.json`, `analysis.csv` (one row per state) and `analysis.png`.
pub fn write_analysis(a: &DeteriorationAnalysis, out: &Path) -> Result<Vec<String>> {
    fsutil::create_dir_all(out)?;
    write_json(&out.join("analysis.json"), a)?;
    let p = out.join("analysis.csv");
    fsutil::write_atomic(&p, &fsutil::csv_bytes(&p, &a.states)?)?;
    fsutil::write_atomic(&out.join("analysis.png"), &plot::analysis_png(a)?)?;
    Ok(vec!["analysis.json".into(), "analysis.csv".into(), "analysis.png".into()])
}

/// Parameters for analyses when none are given: defaults on the store's
/// scale, every inspector at `sigma_max`.
pub fn default_params(scale: ConditionScale) -> ModelParams {
    ModelParams { scale, ..ModelParams::default() }
}
