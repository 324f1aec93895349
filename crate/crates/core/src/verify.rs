//! Verification against synthetic ground truth and validation on holdout
//! inspections.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::RunControl;
use crate::dataset::{Dataset, ElementSeries, Inspection};
use crate::domain::{observation_to_transformed, to_bounded, GaussianState};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::inspectors::{inspector_report, InspectorReport};
use crate::numeric::{pairwise_sum, std_dev};
use crate::ssm::{constrain_speed, filter_from_state, forecast, innovation, predict, FilterOptions};
use crate::synth::SyntheticDataset;
use crate::train::{prepare_series, ModelParams};

pub const COMPONENTS: [&str; 3] = ["condition", "speed", "acceleration"];
pub const REPORT_CSV_HEADER: [&str; 7] =
    ["component", "horizon_year", "mean_error", "mae", "band_low", "band_high", "n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    pub component: String,
    pub horizon_year: usize,
    pub mean_error: f64,
    pub mae: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Signed,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: ErrorKind,
    pub horizon: usize,
    /// Ordered by component, then horizon year.
    pub cells: Vec<ErrorCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementErrors {
    pub element_id: String,
    pub cut_year: f64,
    /// Estimated minus true state, transformed units, one entry per horizon year.
    pub errors: Vec<[f64; 3]>,
    /// Estimated minus true condition in condition units.
    pub condition_units: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastErrorReports {
    pub signed: ErrorReport,
    pub absolute: ErrorReport,
    /// Signed condition error in condition units.
    pub condition_units: ErrorReport,
    pub elements: Vec<ElementErrors>,
    pub warnings: Vec<String>,
    /// Bands are +-2 sd of the per-element error population, not of the mean.
    pub band_semantics: String,
}

/// Filtered state at `year` from the inspections at or before it.
fn state_at(e: &ElementSeries, year: f64, params: &ModelParams) -> Result<Option<GaussianState>> {
    let Some(prep) = prepare_series(&e.truncated(year), params)? else { return Ok(None) };
    let pm = params.process_model();
    let f = filter_from_state(&prep.observations, prep.initial, &pm, &FilterOptions::observations_only(params.gate))?;
    let last = f.last_filtered().clone();
    let dt = year - last.time;
    Ok(Some(if dt > 0.0 { constrain_speed(&predict(&last, dt, &pm))? } else { last }))
}

fn cell(component: &str, h: usize, errs: &[f64]) -> ErrorCell {
    let n = errs.len();
    let mean = pairwise_sum(errs) / n as f64;
    let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
    let mae = pairwise_sum(&abs) / n as f64;
    let sd = std_dev(errs);
    ErrorCell {
        component: component.into(),
        horizon_year: h,
        mean_error: mean,
        mae,
        band_low: mean - 2.0 * sd,
        band_high: mean + 2.0 * sd,
        n,
    }
}

/// Forecast errors against the true states.
///
/// Each sampled element is filtered up to its cut year (last inspection
/// minus `horizon`) and forecast `horizon` years. Errors are estimated
/// minus true state in transformed space.
pub fn forecast_error_report(
    sds: &SyntheticDataset,
    params: &ModelParams,
    horizon: usize,
    n_elements: usize,
    seed: u64,
    control: &RunControl,
) -> Result<ForecastErrorReports> {
    if horizon < 1 {
        return Err(Error::InvalidInput("forecast horizon must be at least one year".into()));
    }
    let truth = sds
        .true_states
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("verification needs the true states artifact".into()))?;
    let h = horizon as f64;
    let mut eligible: Vec<usize> = sds
        .dataset
        .elements
        .iter()
        .enumerate()
        .filter(|(k, e)| match e.last_observed_year() {
            Some(last) => {
                let cut = last - h;
                e.first_observed_year().is_some_and(|f| f <= cut)
                    && cut >= 0.0
                    && (cut as usize + horizon) < truth[*k].len()
            }
            None => false,
        })
        .map(|(k, _)| k)
        .collect();
    let mut warnings = Vec::new();
    if n_elements > eligible.len() {
        warnings.push(format!("requested {n_elements} elements but only {} are eligible; using all", eligible.len()));
    }
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    eligible.truncate(n_elements);
    eligible.sort_unstable();
    if eligible.is_empty() {
        return Err(Error::InvalidInput("no element is eligible for the forecast error report".into()));
    }
    control.add_total(eligible.len() as u64);
    let pm = params.process_model();
    let elements: Vec<ElementErrors> = eligible
        .par_iter()
        .map(|&k| {
            control.check()?;
            let e = &sds.dataset.elements[k];
            let cut = e.last_observed_year().expect("eligible") - h;
            let start = state_at(e, cut, params)?.expect("eligible elements have ratings");
            let fc = forecast(&start, horizon, &pm, params.scale, params.transform_n)?;
            let mut errors = Vec::with_capacity(horizon);
            let mut cu = Vec::with_capacity(horizon);
            for (j, p) in fc.iter().enumerate() {
                let t = &truth[k][cut as usize + j + 1];
                let m = &p.state.mean;
                errors.push([m[0] - t[0], m[1] - t[1], m[2] - t[2]]);
                cu.push(p.condition_mean - to_bounded(t[0], params.scale, params.transform_n)?);
            }
            control.advance(1);
            Ok(ElementErrors { element_id: e.id.clone(), cut_year: cut, errors, condition_units: cu })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut signed = Vec::new();
    let mut absolute = Vec::new();
    let mut units = Vec::new();
    for (c, name) in COMPONENTS.iter().enumerate() {
        for j in 0..horizon {
            let errs: Vec<f64> = elements.iter().map(|e| e.errors[j][c]).collect();
            signed.push(cell(name, j + 1, &errs));
            let abs: Vec<f64> = errs.iter().map(|x| x.abs()).collect();
            absolute.push(cell(name, j + 1, &abs));
        }
    }
    for j in 0..horizon {
        let errs: Vec<f64> = elements.iter().map(|e| e.condition_units[j]).collect();
        units.push(cell("condition_units", j + 1, &errs));
    }
    Ok(ForecastErrorReports {
        signed: ErrorReport { kind: ErrorKind::Signed, horizon, cells: signed },
        absolute: ErrorReport { kind: ErrorKind::Absolute, horizon, cells: absolute },
        condition_units: ErrorReport { kind: ErrorKind::Signed, horizon, cells: units },
        elements,
        warnings,
        band_semantics:
            "population: mean +- 2 sd of per-element errors; the band of the mean would be narrower by sqrt(n)".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub parameter: String,
    pub true_value: Option<f64>,
    pub estimated: f64,
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    pub inspectors: Option<InspectorReport>,
}

fn rel(est: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        est.abs()
    } else {
        (est - truth) / truth.abs()
    }
}

/// Fitted parameters against the generating truth; entries without a
/// known truth carry `None`.
pub fn recovery_report(fitted: &ModelParams, truth: &SyntheticDataset, min_obs: usize) -> RecoveryReport {
    let cfg = &truth.config;
    let known = [
        ("sigma_w", Some(cfg.sigma_w), fitted.sigma_w),
        ("transform_n", Some(cfg.transform_n), fitted.transform_n.get()),
    ];
    let unknown = [
        ("condition_var", fitted.prior.condition_var),
        ("speed_mean", fitted.prior.speed_mean),
        ("speed_var", fitted.prior.speed_var),
        ("accel_var", fitted.prior.accel_var),
    ];
    let mut rows: Vec<RecoveryRow> = known
        .iter()
        .map(|&(p, t, e)| RecoveryRow {
            parameter: p.into(),
            true_value: t,
            estimated: e,
            relative_error: t.map(|t| rel(e, t)),
        })
        .collect();
    rows.extend(unknown.iter().map(|&(p, e)| RecoveryRow {
        parameter: p.into(),
        true_value: None,
        estimated: e,
        relative_error: None,
    }));
    RecoveryReport { rows, inspectors: inspector_report(&fitted.inspectors, &truth.inspectors, min_obs).ok() }
}

pub fn recovery_csv(path: &Path, r: &RecoveryReport) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row<'a> {
        parameter: &'a str,
        #[serde(rename = "true")]
        true_value: String,
        estimated: f64,
        relative_error: String,
    }
    let na = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into());
    fsutil::csv_bytes(
        path,
        r.rows.iter().map(|x| Row {
            parameter: &x.parameter,
            true_value: na(x.true_value),
            estimated: x.estimated,
            relative_error: na(x.relative_error),
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutInnovation {
    pub element_id: String,
    pub year: f64,
    pub standardized: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_new: usize,
    pub mean_standardized: f64,
    pub std_standardized: f64,
    /// Standard error of `mean_standardized`.
    pub standard_error: f64,
    pub total_loglik: f64,
    /// New inspections that could not be forecast: no old rating for the
    /// element, or dated before its last old rating.
    pub skipped: usize,
    pub innovations: Vec<HoldoutInnovation>,
}

fn same(a: &Inspection, b: &Inspection) -> bool {
    a.year == b.year && a.inspector == b.inspector && a.condition.map(f64::to_bits) == b.condition.map(f64::to_bits)
}

/// Inspections of `new` not present in `old`, rated only.
fn additional<'a>(old: Option<&ElementSeries>, new: &'a ElementSeries) -> Vec<&'a Inspection> {
    let mut used = vec![false; old.map_or(0, |o| o.inspections.len())];
    new.inspections
        .iter()
        .filter(|i| {
            if let Some(o) = old {
                if let Some(k) = o.inspections.iter().enumerate().position(|(k, x)| !used[k] && same(x, i)) {
                    used[k] = true;
                    return false;
                }
            }
            i.condition.is_some()
        })
        .collect()
}

/// Standardized one-shot forecast innovations of the inspections that
/// `new` adds to `old`, each forecast from the old inspections alone.
pub fn validate_holdout(old: &Dataset, new: &Dataset, params: &ModelParams) -> Result<ValidationReport> {
    let old_by_id: BTreeMap<&str, &ElementSeries> = old.elements.iter().map(|e| (e.id.as_str(), e)).collect();
    let pm = params.process_model();
    let per: Vec<(Vec<HoldoutInnovation>, usize)> = new
        .elements
        .par_iter()
        .map(|e| {
            let o = old_by_id.get(e.id.as_str()).copied();
            let extra = additional(o, e);
            if extra.is_empty() {
                return Ok((Vec::new(), 0));
            }
            let Some(last) = o.and_then(|o| o.last_observed_year()).map(|y| (y, o.expect("present"))) else {
                return Ok((Vec::new(), extra.len()));
            };
            let base = state_at(last.1, last.0, params)?.expect("rated");
            let mut out = Vec::new();
            let mut skipped = 0;
            for i in extra {
                let dt = i.year - base.time;
                if dt < 0.0 {
                    skipped += 1;
                    continue;
                }
                let pred = if dt > 0.0 { constrain_speed(&predict(&base, dt, &pm))? } else { base.clone() };
                let y = i.condition.expect("rated");
                let obs =
                    observation_to_transformed(y, &params.inspector(&i.inspector), params.scale, params.transform_n)?;
                let inn = innovation(&pred, &obs.gaussian)?;
                out.push(HoldoutInnovation {
                    element_id: e.id.clone(),
                    year: i.year,
                    standardized: inn.standardized(),
                    log_likelihood: inn.log_likelihood(),
                });
            }
            Ok((out, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut innovations = Vec::new();
    let mut skipped = 0;
    for (v, s) in per {
        innovations.extend(v);
        skipped += s;
    }
    if innovations.is_empty() {
        return Err(Error::InvalidInput("no additional data in the new database".into()));
    }
    let z: Vec<f64> = innovations.iter().map(|i| i.standardized).collect();
    let ll: Vec<f64> = innovations.iter().map(|i| i.log_likelihood).collect();
    let n = z.len();
    let mean = pairwise_sum(&z) / n as f64;
    let sd = std_dev(&z);
    Ok(ValidationReport {
        n_new: n,
        mean_standardized: mean,
        std_standardized: sd,
        standard_error: sd / (n as f64).sqrt(),
        total_loglik: pairwise_sum(&ll),
        skipped,
        innovations,
    })
}

pub fn report_csv(path: &Path, report: &ErrorReport) -> Result<Vec<u8>> {
    fsutil::csv_bytes(path, &report.cells)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ErrorCell>> {
    fsutil::read_csv_rows(path, &REPORT_CSV_HEADER)
}

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: f64 = 40.0;

fn plot_png(cells: &[&ErrorCell]) -> Result<Vec<u8>> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN, W as f64 - 10.0);
    let (y0, y1) = (10.0, H as f64 - MARGIN);
    let hmax = cells.iter().map(|c| c.horizon_year).max().unwrap_or(1).max(1) as f64;
    let mut lo = cells.iter().map(|c| c.band_low).fold(0.0f64, f64::min);
    let mut hi = cells.iter().map(|c| c.band_high).fold(0.0f64, f64::max);
    if !(hi - lo > 1e-12) || !lo.is_finite() || !hi.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |h: f64| x0 + (x1 - x0) * if hmax > 1.0 { (h - 1.0) / (hmax - 1.0) } else { 0.5 };
    let py = |v: f64| y1 - (y1 - y0) * (v - lo) / (hi - lo);
    let put = |img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>| {
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    // linear interpolation of a cell field at a pixel column
    let interp = |x: f64, f: &dyn Fn(&ErrorCell) -> f64| -> Option<f64> {
        if cells.len() == 1 {
            return Some(f(cells[0]));
        }
        cells.windows(2).find_map(|w| {
            let (a, b) = (px(w[0].horizon_year as f64), px(w[1].horizon_year as f64));
            (x >= a && x <= b).then(|| {
                let t = if b > a { (x - a) / (b - a) } else { 0.0 };
                f(w[0]) + t * (f(w[1]) - f(w[0]))
            })
        })
    };
    for xi in x0 as u32..=x1 as u32 {
        let x = xi as f64;
        if let (Some(l), Some(h), Some(m)) =
            (interp(x, &|c| c.band_low), interp(x, &|c| c.band_high), interp(x, &|c| c.mean_error))
        {
            let (top, bottom) = (py(h), py(l));
            let mut y = top;
            while y <= bottom {
                put(&mut img, x, y, Rgb([190, 210, 240]));
                y += 1.0;
            }
            for d in [-1.0, 0.0, 1.0] {
                put(&mut img, x, py(m) + d, Rgb([20, 60, 160]));
            }
        }
    }
    for xi in x0 as u32..=x1 as u32 {
        put(&mut img, xi as f64, py(0.0), Rgb([120, 120, 120]));
        put(&mut img, xi as f64, y1, Rgb([0, 0, 0]));
    }
    for yi in y0 as u32..=y1 as u32 {
        put(&mut img, x0, yi as f64, Rgb([0, 0, 0]));
    }
    for c in cells {
        let x = px(c.horizon_year as f64);
        for d in 0..6 {
            put(&mut img, x, y1 + d as f64, Rgb([0, 0, 0]));
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Other(format!("encoding plot: {e}")))?;
    Ok(bytes)
}

/// `report.csv` plus `verify_<component>.png` per component, in order.
pub fn render_bytes(report: &ErrorReport, dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = vec![("report.csv".to_string(), report_csv(&dir.join("report.csv"), report)?)];
    let mut comps: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !comps.contains(&c.component.as_str()) {
            comps.push(&c.component);
        }
    }
    for comp in comps {
        let cells: Vec<&ErrorCell> = report.cells.iter().filter(|c| c.component == comp).collect();
        out.push((format!("verify_{comp}.png"), plot_png(&cells)?));
    }
    Ok(out)
}

pub fn render_report(report: &ErrorReport, dir: &Path) -> Result<Vec<String>> {
    fsutil::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, bytes) in render_bytes(report, dir)? {
        fsutil::write_atomic(&dir.join(&name), &bytes)?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(h: usize) -> ErrorReport {
        let mut cells = Vec::new();
        for c in COMPONENTS {
            for j in 1..=h {
                cells.push(cell(c, j, &[0.1 * j as f64, -0.05, 0.2]));
            }
        }
        ErrorReport { kind: ErrorKind::Signed, horizon: h, cells }
    }

    #[test]
    fn cells_are_consistent() {
        let c = cell("condition", 1, &[1.0, -3.0, 2.0]);
        assert_eq!(c.mean_error, 0.0);
        assert!((c.mae - 2.0).abs() < 1e-15);
        assert!(c.mae >= c.mean_error.abs());
        assert!((c.band_high - c.mean_error - (c.mean_error - c.band_low)).abs() < 1e-12);
    }

    #[test]
    fn render_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(10);
        let names = render_report(&r, dir.path()).unwrap();
        assert_eq!(names, vec!["report.csv", "verify_condition.png", "verify_speed.png", "verify_acceleration.png"]);
        let first = std::fs::read(dir.path().join("report.csv")).unwrap();
        render_report(&r, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("report.csv")).unwrap(), first);
        assert_eq!(read_report_csv(&dir.path().join("report.csv")).unwrap().len(), 30);
        for n in &names[1..] {
            let png = std::fs::read(dir.path().join(n)).unwrap();
            assert!(png.len() > 100 && png.starts_with(b"\x89PNG"));
        }
    }

    #[test]
    fn additional_inspections_are_the_set_difference() {
        let i = |y: f64, c: f64| Inspection { year: y, condition: Some(c), inspector: "a".into() };
        let old = ElementSeries::new("e", "c", vec![i(1.0, 90.0), i(3.0, 85.0)]);
        let new = ElementSeries::new("e", "c", vec![i(1.0, 90.0), i(3.0, 85.0), i(5.0, 80.0)]);
        let extra = additional(Some(&old), &new);
        assert_eq!(extra.len(), 1);
        assert_eq!(extra[0].year, 5.0);
        assert!(additional(Some(&old), &old).is_empty());
    }
}
