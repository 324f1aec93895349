//! Synthetic inspection datasets with known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::RunControl;
use crate::dataset::{Dataset, ElementSeries, Inspection};
use crate::domain::{to_bounded, to_unbounded, ConditionScale, TransformParam};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::inspectors::{InspectorModel, InspectorTable};
use crate::interventions::{read_records_csv, write_records_csv, InterventionRecord};
use crate::ssm::{process_noise, transition_matrix};

pub const SYNTH_CATEGORY: &str = "synthetic";
const PROBE_SIZE: usize = 1000;
const PROBE_STREAM: u64 = 1 << 62;
const MAX_ATTEMPTS: u64 = 1_000_000;

pub const OBSERVED_FILE: &str = "observed.csv";
pub const TRUE_STATES_FILE: &str = "true_states.csv";
pub const TRUE_INSPECTORS_FILE: &str = "true_inspectors.csv";
pub const INSPECTOR_IDS_FILE: &str = "inspector_ids.csv";
pub const META_FILE: &str = "generated_meta.csv";
pub const INTERVENTIONS_FILE: &str = "interventions.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";

/// Known state jumps injected into a share of the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpInjection {
    pub type_id: String,
    pub delta: [f64; 3],
    /// Share of series receiving a jump.
    pub fraction: f64,
    /// Inclusive range of jump years.
    pub years: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub time_span: usize,
    pub n_series: usize,
    pub n_inspectors: usize,
    pub sigma_v: [f64; 2],
    pub mu_v: [f64; 2],
    pub transform_n: f64,
    pub sigma_w: f64,
    /// Condition units.
    pub initial_condition: [f64; 2],
    /// Transformed units per year.
    pub initial_speed: [f64; 2],
    /// Inclusive range of years between inspections.
    pub interval: [usize; 2],
    /// Inclusive range of the first inspection year.
    pub offset: [usize; 2],
    /// Largest tolerated yearly condition increase, transformed units.
    pub monotone_tol: f64,
    pub scale: ConditionScale,
    pub seed: u64,
    /// Noise of a single attribute correlated with the initial speed; no
    /// attribute when `None`.
    pub attribute_noise: Option<f64>,
    pub jumps: Option<JumpInjection>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            time_span: 60,
            n_series: 20000,
            n_inspectors: 223,
            sigma_v: [1.0, 6.0],
            mu_v: [0.0, 0.0],
            transform_n: 4.0,
            sigma_w: 0.002,
            initial_condition: [75.0, 100.0],
            initial_speed: [-1.5, -0.1],
            interval: [1, 5],
            offset: [0, 3],
            monotone_tol: 0.1,
            scale: ConditionScale::default(),
            seed: 1,
            attribute_noise: None,
            jumps: None,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::InvalidInput(format!("{name} range must be ordered, got [{}, {}]", r[0], r[1])));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_span < 1 || self.n_series < 1 || self.n_inspectors < 1 {
            return Err(Error::InvalidInput("time span, series and inspector counts must be at least 1".into()));
        }
        ordered("sigma_v", self.sigma_v)?;
        ordered("mu_v", self.mu_v)?;
        ordered("initial_condition", self.initial_condition)?;
        ordered("initial_speed", self.initial_speed)?;
        if self.sigma_v[0] < 0.0 || !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) || !(self.monotone_tol >= 0.0) {
            return Err(Error::InvalidInput("sigma_v, sigma_w and the monotone tolerance must be non-negative".into()));
        }
        if self.interval[0] < 1 || self.interval[0] > self.interval[1] || self.offset[0] > self.offset[1] {
            return Err(Error::InvalidInput("inspection interval must be >= 1 and ranges ordered".into()));
        }
        if !self.initial_condition.iter().all(|&c| self.scale.contains(c)) {
            return Err(Error::InvalidInput("initial condition range must lie within the scale".into()));
        }
        TransformParam::new(self.transform_n)?;
        if let Some(j) = &self.jumps {
            if !(0.0..=1.0).contains(&j.fraction) || j.years[0] > j.years[1] || j.years[1] >= self.time_span {
                return Err(Error::InvalidInput(
                    "jump fraction must be in [0,1] and years within the time span".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn transform(&self) -> TransformParam {
        TransformParam::new(self.transform_n).expect("validated")
    }

    /// `key,value` pairs; floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("time_span".into(), self.time_span.to_string()),
            ("n_series".into(), self.n_series.to_string()),
            ("n_inspectors".into(), self.n_inspectors.to_string()),
            ("sigma_v_min".into(), self.sigma_v[0].to_string()),
            ("sigma_v_max".into(), self.sigma_v[1].to_string()),
            ("mu_v_min".into(), self.mu_v[0].to_string()),
            ("mu_v_max".into(), self.mu_v[1].to_string()),
            ("transform_n".into(), self.transform_n.to_string()),
            ("sigma_w".into(), self.sigma_w.to_string()),
            ("initial_condition_min".into(), self.initial_condition[0].to_string()),
            ("initial_condition_max".into(), self.initial_condition[1].to_string()),
            ("initial_speed_min".into(), self.initial_speed[0].to_string()),
            ("initial_speed_max".into(), self.initial_speed[1].to_string()),
            ("interval_min".into(), self.interval[0].to_string()),
            ("interval_max".into(), self.interval[1].to_string()),
            ("offset_min".into(), self.offset[0].to_string()),
            ("offset_max".into(), self.offset[1].to_string()),
            ("monotone_tol".into(), self.monotone_tol.to_string()),
            ("scale_lower".into(), self.scale.lower.to_string()),
            ("scale_upper".into(), self.scale.upper.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        if let Some(a) = self.attribute_noise {
            v.push(("attribute_noise".into(), a.to_string()));
        }
        if let Some(j) = &self.jumps {
            v.push(("jump_type".into(), j.type_id.clone()));
            v.push(("jump_d_cond".into(), j.delta[0].to_string()));
            v.push(("jump_d_speed".into(), j.delta[1].to_string()));
            v.push(("jump_d_accel".into(), j.delta[2].to_string()));
            v.push(("jump_fraction".into(), j.fraction.to_string()));
            v.push(("jump_year_min".into(), j.years[0].to_string()));
            v.push(("jump_year_max".into(), j.years[1].to_string()));
        }
        v
    }

    /// Builds a config from `key=value` lines (or pairs); unspecified keys
    /// keep their defaults and unknown keys are rejected.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = SynthConfig::default();
        let mut jump: BTreeMap<&str, &str> = BTreeMap::new();
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::InvalidInput(format!("invalid value {v:?} for {k}")))
        }
        for (k, v) in pairs {
            let k = k.trim();
            match k {
                "time_span" => c.time_span = num(k, v)?,
                "n_series" => c.n_series = num(k, v)?,
                "n_inspectors" => c.n_inspectors = num(k, v)?,
                "sigma_v_min" => c.sigma_v[0] = num(k, v)?,
                "sigma_v_max" => c.sigma_v[1] = num(k, v)?,
                "mu_v_min" => c.mu_v[0] = num(k, v)?,
                "mu_v_max" => c.mu_v[1] = num(k, v)?,
                "transform_n" => c.transform_n = num(k, v)?,
                "sigma_w" => c.sigma_w = num(k, v)?,
                "initial_condition_min" => c.initial_condition[0] = num(k, v)?,
                "initial_condition_max" => c.initial_condition[1] = num(k, v)?,
                "initial_speed_min" => c.initial_speed[0] = num(k, v)?,
                "initial_speed_max" => c.initial_speed[1] = num(k, v)?,
                "interval_min" => c.interval[0] = num(k, v)?,
                "interval_max" => c.interval[1] = num(k, v)?,
                "offset_min" => c.offset[0] = num(k, v)?,
                "offset_max" => c.offset[1] = num(k, v)?,
                "monotone_tol" => c.monotone_tol = num(k, v)?,
                "scale_lower" => c.scale.lower = num(k, v)?,
                "scale_upper" => c.scale.upper = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "attribute_noise" => c.attribute_noise = Some(num(k, v)?),
                k if k.starts_with("jump_") => {
                    jump.insert(k, v.trim());
                }
                _ => return Err(Error::InvalidInput(format!("unknown synthetic config key {k:?}"))),
            }
        }
        if !jump.is_empty() {
            let get = |k: &str| jump.get(k).copied().ok_or_else(|| Error::InvalidInput(format!("missing {k}")));
            c.jumps = Some(JumpInjection {
                type_id: get("jump_type")?.to_string(),
                delta: [
                    num("jump_d_cond", get("jump_d_cond")?)?,
                    num("jump_d_speed", get("jump_d_speed")?)?,
                    num("jump_d_accel", get("jump_d_accel")?)?,
                ],
                fraction: num("jump_fraction", get("jump_fraction")?)?,
                years: [num("jump_year_min", get("jump_year_min")?)?, num("jump_year_max", get("jump_year_max")?)?],
            });
        }
        c.validate()?;
        Ok(c)
    }

    /// Parses `key=value` text; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("line {}: expected key=value", i + 1)))?;
            pairs.push((k, v));
        }
        Self::from_pairs(pairs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    /// True inspector parameters with observation counts.
    pub inspectors: InspectorTable,
    pub dataset: Dataset,
    /// Yearly true states per element, aligned with `dataset.elements`;
    /// `None` after an import without the true-states artifact.
    pub true_states: Option<Vec<Vec<[f64; 3]>>>,
    pub interventions: Vec<InterventionRecord>,
    pub rejections: u64,
    pub probe_rejection_rate: f64,
}

impl SyntheticDataset {
    pub fn element_index(&self) -> BTreeMap<&str, usize> {
        self.dataset.elements.iter().enumerate().map(|(k, e)| (e.id.as_str(), k)).collect()
    }
}

pub fn inspector_id(k: usize, n: usize) -> String {
    format!("I{:0w$}", k + 1, w = n.to_string().len())
}

pub fn element_id(k: usize, n: usize) -> String {
    format!("E{:0w$}", k + 1, w = n.to_string().len())
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + (r[1] - r[0]) * u
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Simulator {
    a: Matrix3<f64>,
    chol: Option<Matrix3<f64>>,
    x_max: f64,
    scale: ConditionScale,
    n: TransformParam,
}

impl Simulator {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        let n = cfg.transform();
        let chol = if cfg.sigma_w > 0.0 {
            let q = process_noise(1.0, cfg.sigma_w);
            Some(q.cholesky().ok_or_else(|| Error::Degenerate("process noise not positive definite".into()))?.l())
        } else {
            None
        };
        Ok(Self {
            a: transition_matrix(1.0),
            chol,
            x_max: to_unbounded(cfg.scale.upper, cfg.scale, n)?,
            scale: cfg.scale,
            n,
        })
    }

    /// One trajectory attempt; `None` when rejected.
    fn attempt(
        &self,
        cfg: &SynthConfig,
        rng: &mut ChaCha8Rng,
        jump: Option<(usize, [f64; 3])>,
    ) -> Result<Option<Vec<[f64; 3]>>> {
        let c0 = to_unbounded(uniform(rng, cfg.initial_condition), self.scale, self.n)?;
        let mut x = Vector3::new(c0, uniform(rng, cfg.initial_speed), 0.0);
        let mut out = Vec::with_capacity(cfg.time_span);
        let mut ok = x[0].abs() < self.x_max;
        out.push(x.into());
        for t in 1..cfg.time_span {
            let prev = x[0];
            x = self.a * x;
            if let Some(l) = &self.chol {
                let e =
                    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                x += l * e;
            }
            let jumped = match jump {
                Some((year, d)) if year == t => {
                    x += Vector3::from(d);
                    true
                }
                _ => false,
            };
            if (!jumped && x[0] - prev > cfg.monotone_tol) || x[0].abs() >= self.x_max {
                ok = false;
            }
            out.push(x.into());
        }
        Ok(ok.then_some(out))
    }
}

struct SeriesDraw {
    element: ElementSeries,
    states: Vec<[f64; 3]>,
    rejections: u64,
    intervention: Option<InterventionRecord>,
}

fn draw_series(cfg: &SynthConfig, sim: &Simulator, inspectors: &[InspectorModel], k: usize) -> Result<SeriesDraw> {
    let mut rng = stream_rng(cfg.seed, k as u64 + 1);
    let id = element_id(k, cfg.n_series);
    let jump = match &cfg.jumps {
        Some(j) if rng.random::<f64>() < j.fraction => Some((rng.random_range(j.years[0]..=j.years[1]), j.delta)),
        _ => None,
    };
    let mut rejections = 0;
    let states = loop {
        if let Some(s) = sim.attempt(cfg, &mut rng, jump)? {
            break s;
        }
        rejections += 1;
        if rejections >= MAX_ATTEMPTS {
            return Err(Error::IncompatibleConfig(1.0));
        }
    };
    let mut inspections = Vec::new();
    let mut year = rng.random_range(cfg.offset[0]..=cfg.offset[1]);
    while year < cfg.time_span {
        let insp = &inspectors[rng.random_range(0..inspectors.len())];
        let eps: f64 = rng.sample(StandardNormal);
        let truth = to_bounded(states[year][0], sim.scale, sim.n)?;
        let y = sim.scale.clamp(truth + insp.mu_v + insp.sigma_v * eps);
        inspections.push(Inspection { year: year as f64, condition: Some(y), inspector: insp.id.clone() });
        year += rng.random_range(cfg.interval[0]..=cfg.interval[1]);
    }
    let mut element = ElementSeries::new(id.clone(), SYNTH_CATEGORY, inspections);
    if let Some(noise) = cfg.attribute_noise {
        let eps: f64 = rng.sample(StandardNormal);
        element.attributes = vec![states[0][1] + noise * eps];
    }
    let intervention = jump.map(|(year, _)| InterventionRecord {
        element_id: id,
        year: year as f64,
        type_id: cfg.jumps.as_ref().expect("jump drawn").type_id.clone(),
    });
    Ok(SeriesDraw { element, states, rejections, intervention })
}

fn count_observations(table: &mut InspectorTable, ds: &Dataset) {
    let counts = ds.inspector_counts();
    for (id, m) in table.iter_mut() {
        m.n_obs = counts.get(id).copied().unwrap_or(0);
    }
}

/// Generates a dataset. Each series draws from its own random stream keyed
/// by `(seed, index)`, so the output does not depend on the thread count.
pub fn generate(cfg: &SynthConfig, control: &RunControl) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let sim = Simulator::new(cfg)?;

    let probe_rejections: u64 = (0..PROBE_SIZE)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, PROBE_STREAM + k as u64);
            Ok(u64::from(sim.attempt(cfg, &mut rng, None)?.is_none()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let probe_rate = probe_rejections as f64 / PROBE_SIZE as f64;
    if probe_rate > 0.99 {
        return Err(Error::IncompatibleConfig(probe_rate));
    }

    let mut irng = stream_rng(cfg.seed, 0);
    let inspectors: Vec<InspectorModel> = (0..cfg.n_inspectors)
        .map(|k| {
            let sigma = uniform(&mut irng, cfg.sigma_v);
            let mu = uniform(&mut irng, cfg.mu_v);
            InspectorModel::new(inspector_id(k, cfg.n_inspectors), mu, sigma)
        })
        .collect();

    control.add_total(cfg.n_series as u64);
    let draws = (0..cfg.n_series)
        .into_par_iter()
        .map(|k| {
            control.check()?;
            let d = draw_series(cfg, &sim, &inspectors, k);
            control.advance(1);
            d
        })
        .collect::<Result<Vec<_>>>()?;

    let mut elements = Vec::with_capacity(draws.len());
    let mut states = Vec::with_capacity(draws.len());
    let mut interventions = Vec::new();
    let mut rejections = 0;
    for d in draws {
        elements.push(d.element);
        states.push(d.states);
        rejections += d.rejections;
        interventions.extend(d.intervention);
    }
    let dataset = Dataset::new(elements);
    let mut table: InspectorTable = inspectors.into_iter().map(|m| (m.id.clone(), m)).collect();
    count_observations(&mut table, &dataset);
    Ok(SyntheticDataset {
        config: cfg.clone(),
        inspectors: table,
        dataset,
        true_states: Some(states),
        interventions,
        rejections,
        probe_rejection_rate: probe_rate,
    })
}

#[derive(Serialize, Deserialize)]
struct ObservedRow {
    element_id: String,
    year: f64,
    condition: Option<f64>,
    inspector_id: String,
}

#[derive(Serialize, Deserialize)]
struct StateRow {
    element_id: String,
    year: usize,
    cond_t: f64,
    speed_t: f64,
    accel_t: f64,
}

#[derive(Serialize, Deserialize)]
struct TrueInspectorRow {
    inspector_id: String,
    mu_v: f64,
    sigma_v: f64,
}

#[derive(Serialize, Deserialize)]
struct IdRow {
    inspector_id: String,
}

#[derive(Serialize, Deserialize)]
struct MetaRow {
    key: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct AttributeRow {
    element_id: String,
    attribute: f64,
}

const OBSERVED_HEADER: [&str; 4] = ["element_id", "year", "condition", "inspector_id"];
const STATES_HEADER: [&str; 5] = ["element_id", "year", "cond_t", "speed_t", "accel_t"];
const TRUE_INSPECTORS_HEADER: [&str; 3] = ["inspector_id", "mu_v", "sigma_v"];
const IDS_HEADER: [&str; 1] = ["inspector_id"];
const META_HEADER: [&str; 2] = ["key", "value"];
const ATTRIBUTES_HEADER: [&str; 2] = ["element_id", "attribute"];
pub const SYNTH_FORMAT_VERSION: u32 = 1;

/// Artifact file name and bytes, in a fixed order.
pub fn export_bytes(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let p = |f: &str| dir.join(f);
    let mut meta: Vec<MetaRow> =
        vec![MetaRow { key: "format_version".into(), value: SYNTH_FORMAT_VERSION.to_string() }];
    meta.extend(ds.config.to_pairs().into_iter().map(|(key, value)| MetaRow { key, value }));
    meta.push(MetaRow { key: "rejections".into(), value: ds.rejections.to_string() });
    meta.push(MetaRow { key: "probe_rejection_rate".into(), value: ds.probe_rejection_rate.to_string() });
    meta.push(MetaRow { key: "n_observations".into(), value: ds.dataset.n_observations().to_string() });

    let observed = ds.dataset.elements.iter().flat_map(|e| {
        e.inspections.iter().map(move |i| ObservedRow {
            element_id: e.id.clone(),
            year: i.year,
            condition: i.condition,
            inspector_id: i.inspector.clone(),
        })
    });
    let mut out = vec![
        (META_FILE.to_string(), fsutil::csv_bytes(&p(META_FILE), meta)?),
        (OBSERVED_FILE.to_string(), fsutil::csv_bytes(&p(OBSERVED_FILE), observed)?),
        (
            TRUE_INSPECTORS_FILE.to_string(),
            fsutil::csv_bytes(
                &p(TRUE_INSPECTORS_FILE),
                ds.inspectors.values().map(|m| TrueInspectorRow {
                    inspector_id: m.id.clone(),
                    mu_v: m.mu_v,
                    sigma_v: m.sigma_v,
                }),
            )?,
        ),
        (
            INSPECTOR_IDS_FILE.to_string(),
            fsutil::csv_bytes(&p(INSPECTOR_IDS_FILE), ds.inspectors.keys().map(|k| IdRow { inspector_id: k.clone() }))?,
        ),
    ];
    if let Some(states) = &ds.true_states {
        let rows = ds.dataset.elements.iter().zip(states).flat_map(|(e, s)| {
            s.iter().enumerate().map(move |(year, x)| StateRow {
                element_id: e.id.clone(),
                year,
                cond_t: x[0],
                speed_t: x[1],
                accel_t: x[2],
            })
        });
        out.push((TRUE_STATES_FILE.to_string(), fsutil::csv_bytes(&p(TRUE_STATES_FILE), rows)?));
    }
    if !ds.interventions.is_empty() {
        out.push((INTERVENTIONS_FILE.to_string(), fsutil::csv_bytes(&p(INTERVENTIONS_FILE), &ds.interventions)?));
    }
    if ds.config.attribute_noise.is_some() {
        let rows = ds.dataset.elements.iter().map(|e| AttributeRow {
            element_id: e.id.clone(),
            attribute: e.attributes.first().copied().unwrap_or(f64::NAN),
        });
        out.push((ATTRIBUTES_FILE.to_string(), fsutil::csv_bytes(&p(ATTRIBUTES_FILE), rows)?));
    }
    Ok(out)
}

pub fn export(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<String>> {
    fsutil::create_dir_all(dir)?;
    let files = export_bytes(ds, dir)?;
    let mut names = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        fsutil::write_atomic(&dir.join(&name), &bytes)?;
        names.push(name);
    }
    Ok(names)
}

/// Inverse of [`export`]. Without `true_states.csv` the result is usable
/// for training only and `true_states` is `None`.
pub fn import(dir: &Path) -> Result<SyntheticDataset> {
    let meta_path = dir.join(META_FILE);
    let meta: Vec<MetaRow> = fsutil::read_csv_rows(&meta_path, &META_HEADER)?;
    let mut extra: BTreeMap<String, String> = BTreeMap::new();
    let mut pairs = Vec::new();
    for m in &meta {
        match m.key.as_str() {
            "format_version" | "rejections" | "probe_rejection_rate" | "n_observations" => {
                extra.insert(m.key.clone(), m.value.clone());
            }
            _ => pairs.push((m.key.as_str(), m.value.as_str())),
        }
    }
    let config = SynthConfig::from_pairs(pairs).map_err(|e| Error::schema(&meta_path, 0, e.to_string()))?;
    let version = extra.get("format_version").map(String::as_str).unwrap_or("");
    if version != SYNTH_FORMAT_VERSION.to_string() {
        return Err(Error::schema(&meta_path, 0, format!("unsupported format_version {version:?}")));
    }
    let get_num = |k: &str| -> Result<String> {
        extra.get(k).cloned().ok_or_else(|| Error::schema(&meta_path, 0, format!("missing key {k}")))
    };
    let rejections: u64 = get_num("rejections")?.parse().map_err(|_| Error::schema(&meta_path, 0, "bad rejections"))?;
    let probe_rejection_rate: f64 = get_num("probe_rejection_rate")?
        .parse()
        .map_err(|_| Error::schema(&meta_path, 0, "bad probe_rejection_rate"))?;

    let ids_path = dir.join(INSPECTOR_IDS_FILE);
    let ids: Vec<IdRow> = fsutil::read_csv_rows(&ids_path, &IDS_HEADER)?;
    let ti_path = dir.join(TRUE_INSPECTORS_FILE);
    let tis: Vec<TrueInspectorRow> = fsutil::read_csv_rows(&ti_path, &TRUE_INSPECTORS_HEADER)?;
    let mut inspectors: InspectorTable = tis
        .into_iter()
        .map(|r| (r.inspector_id.clone(), InspectorModel::new(r.inspector_id, r.mu_v, r.sigma_v)))
        .collect();
    if ids.len() != inspectors.len() || ids.iter().any(|r| !inspectors.contains_key(&r.inspector_id)) {
        return Err(Error::schema(&ids_path, 0, "inspector ids do not match true_inspectors.csv"));
    }

    let n = config.n_series;
    let index: BTreeMap<String, usize> = (0..n).map(|k| (element_id(k, n), k)).collect();
    let mut per: Vec<Vec<Inspection>> = vec![Vec::new(); n];
    let obs_path = dir.join(OBSERVED_FILE);
    let rows: Vec<ObservedRow> = fsutil::read_csv_rows(&obs_path, &OBSERVED_HEADER)?;
    for (line, r) in rows.into_iter().enumerate() {
        let k = *index
            .get(&r.element_id)
            .ok_or_else(|| Error::schema(&obs_path, line as u64 + 2, format!("unknown element {}", r.element_id)))?;
        if !inspectors.contains_key(&r.inspector_id) {
            return Err(Error::schema(&obs_path, line as u64 + 2, format!("unknown inspector {}", r.inspector_id)));
        }
        per[k].push(Inspection { year: r.year, condition: r.condition, inspector: r.inspector_id });
    }
    let mut elements: Vec<ElementSeries> =
        per.into_iter().enumerate().map(|(k, ins)| ElementSeries::new(element_id(k, n), SYNTH_CATEGORY, ins)).collect();

    let attr_path = dir.join(ATTRIBUTES_FILE);
    if config.attribute_noise.is_some() && attr_path.exists() {
        let rows: Vec<AttributeRow> = fsutil::read_csv_rows(&attr_path, &ATTRIBUTES_HEADER)?;
        for (line, r) in rows.into_iter().enumerate() {
            let k = *index.get(&r.element_id).ok_or_else(|| {
                Error::schema(&attr_path, line as u64 + 2, format!("unknown element {}", r.element_id))
            })?;
            elements[k].attributes = vec![r.attribute];
        }
    }

    let states_path = dir.join(TRUE_STATES_FILE);
    let true_states = if states_path.exists() {
        let rows: Vec<StateRow> = fsutil::read_csv_rows(&states_path, &STATES_HEADER)?;
        let mut states = vec![Vec::with_capacity(config.time_span); n];
        for (line, r) in rows.into_iter().enumerate() {
            let k = *index.get(&r.element_id).ok_or_else(|| {
                Error::schema(&states_path, line as u64 + 2, format!("unknown element {}", r.element_id))
            })?;
            if r.year != states[k].len() {
                return Err(Error::schema(&states_path, line as u64 + 2, "true states must be consecutive years"));
            }
            states[k].push([r.cond_t, r.speed_t, r.accel_t]);
        }
        if states.iter().any(|s| s.len() != config.time_span) {
            return Err(Error::schema(&states_path, 0, "every element needs one true state per year"));
        }
        Some(states)
    } else {
        None
    };

    let int_path = dir.join(INTERVENTIONS_FILE);
    let interventions = if int_path.exists() { read_records_csv(&int_path)? } else { Vec::new() };

    let dataset = Dataset::new(elements);
    count_observations(&mut inspectors, &dataset);
    Ok(SyntheticDataset { config, inspectors, dataset, true_states, interventions, rejections, probe_rejection_rate })
}

/// Writes only the intervention records next to an exported dataset.
pub fn write_interventions(dir: &Path, records: &[InterventionRecord]) -> Result<()> {
    write_records_csv(&dir.join(INTERVENTIONS_FILE), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { time_span: 30, n_series: 40, n_inspectors: 5, seed, ..Default::default() }
    }

    #[test]
    fn shapes_and_reproducibility() {
        let cfg = small(7);
        let a = generate(&cfg, &RunControl::new()).unwrap();
        let b = generate(&cfg, &RunControl::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.len(), 40);
        assert_eq!(a.inspectors.len(), 5);
        let states = a.true_states.as_ref().unwrap();
        for (e, s) in a.dataset.elements.iter().zip(states) {
            assert_eq!(s.len(), 30);
            for w in s.windows(2) {
                assert!(w[1][0] - w[0][0] <= 0.1);
            }
            for i in &e.inspections {
                assert!(a.inspectors.contains_key(&i.inspector));
                assert!((25.0..=100.0).contains(&i.condition.unwrap()));
                assert!((i.year as usize) < 30);
            }
        }
        assert_ne!(generate(&small(8), &RunControl::new()).unwrap().dataset, a.dataset);
    }

    #[test]
    fn noiseless_inspectors_report_truth() {
        let cfg = SynthConfig { sigma_v: [0.0, 0.0], ..small(3) };
        let ds = generate(&cfg, &RunControl::new()).unwrap();
        let n = cfg.transform();
        for (e, s) in ds.dataset.elements.iter().zip(ds.true_states.as_ref().unwrap()) {
            for i in &e.inspections {
                let truth = cfg.scale.clamp(to_bounded(s[i.year as usize][0], cfg.scale, n).unwrap());
                assert_eq!(i.condition.unwrap(), truth);
            }
        }
    }

    #[test]
    fn incompatible_config_aborts() {
        let cfg = SynthConfig { sigma_w: 1.0, monotone_tol: 0.0, time_span: 60, ..small(1) };
        assert!(matches!(generate(&cfg, &RunControl::new()), Err(Error::IncompatibleConfig(r)) if r > 0.99));
        let ok = generate(&small(1), &RunControl::new()).unwrap();
        assert!(ok.probe_rejection_rate <= 0.99);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(11);
        cfg.attribute_noise = Some(0.1);
        cfg.jumps =
            Some(JumpInjection { type_id: "deck".into(), delta: [10.0, 1.0, 0.0], fraction: 0.5, years: [10, 20] });
        let ds = generate(&cfg, &RunControl::new()).unwrap();
        assert!(!ds.interventions.is_empty());
        let files = export(&ds, dir.path()).unwrap();
        assert!(files.contains(&OBSERVED_FILE.to_string()));
        let back = import(dir.path()).unwrap();
        assert_eq!(back, ds);
        let text = std::fs::read_to_string(dir.path().join(OBSERVED_FILE)).unwrap();
        assert_eq!(text.lines().count() - 1, ds.dataset.inspections_total());
        let ti = std::fs::read_to_string(dir.path().join(TRUE_INSPECTORS_FILE)).unwrap();
        assert_eq!(ti.lines().count() - 1, 5);

        std::fs::remove_file(dir.path().join(TRUE_STATES_FILE)).unwrap();
        let partial = import(dir.path()).unwrap();
        assert!(partial.true_states.is_none());
        assert_eq!(partial.dataset, ds.dataset);

        std::fs::write(dir.path().join(OBSERVED_FILE), "element,year\nE01,1\n").unwrap();
        let err = import(dir.path()).unwrap_err().to_string();
        assert!(err.contains(OBSERVED_FILE), "{err}");
    }

    #[test]
    fn config_text() {
        let c =
            SynthConfig::parse("# scaled\ntime_span=60\nn_series = 2000\nn_inspectors=30\nsigma_w=0.002\n").unwrap();
        assert_eq!((c.time_span, c.n_series, c.n_inspectors), (60, 2000, 30));
        assert!(SynthConfig::parse("bogus=1").is_err());
        let pairs = c.to_pairs();
        let back = SynthConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }
}
