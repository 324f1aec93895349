//! Inspector error models and their estimation by coordinate ascent.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::RunControl;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numeric::{pairwise_sum, spearman};
use crate::optim::newton_maximize;
use crate::train::{element_loglik, ModelParams};

/// Identifier assigned to inspections without an inspector. It is never
/// estimated and always carries `sigma_max`.
pub const UNKNOWN_INSPECTOR: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectorModel {
    pub id: String,
    /// Bias in condition units.
    pub mu_v: f64,
    /// Standard deviation in condition units.
    pub sigma_v: f64,
    pub n_obs: usize,
    #[serde(default)]
    pub insufficient_data: bool,
}

impl InspectorModel {
    pub fn new(id: impl Into<String>, mu_v: f64, sigma_v: f64) -> Self {
        Self { id: id.into(), mu_v, sigma_v, n_obs: 0, insufficient_data: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InspectorBounds {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for InspectorBounds {
    fn default() -> Self {
        Self { sigma_min: 0.5, sigma_max: 10.0 }
    }
}

impl InspectorBounds {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid inspector bounds [{sigma_min}, {sigma_max}]")));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.sigma_min + self.sigma_max)
    }
}

pub type InspectorTable = BTreeMap<String, InspectorModel>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectorOptions {
    pub max_sweeps: usize,
    /// Relative change of the total log-likelihood that ends the sweeps.
    pub tol: f64,
    /// Also fit `mu_v`; off by default since bias is weakly identified.
    pub estimate_bias: bool,
    pub bias_bound: f64,
    pub newton_iters: usize,
}

impl Default for InspectorOptions {
    fn default() -> Self {
        Self { max_sweeps: 20, tol: 1e-4, estimate_bias: false, bias_bound: 10.0, newton_iters: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectorEstimate {
    pub table: InspectorTable,
    /// Total log-likelihood before the first sweep and after each sweep.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl InspectorEstimate {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().expect("trace starts with the initial value")
    }
}

/// Coordinate-ascent maximum likelihood for every inspector's `sigma_v`.
///
/// Inspectors are visited in sorted order. Each visit is a bounded 1-D Newton
/// maximization of the log-likelihood of the series the inspector appears in,
/// all other parameters fixed. Inspectors with fewer than two observations
/// keep the bounds midpoint and are flagged.
pub fn estimate_inspectors(
    dataset: &Dataset,
    params: &ModelParams,
    opts: &InspectorOptions,
    control: &RunControl,
) -> Result<InspectorEstimate> {
    estimate_inspectors_ordered(dataset, params, opts, control, None)
}

/// As [`estimate_inspectors`] with an explicit visiting order.
pub fn estimate_inspectors_ordered(
    dataset: &Dataset,
    params: &ModelParams,
    opts: &InspectorOptions,
    control: &RunControl,
    order: Option<&[String]>,
) -> Result<InspectorEstimate> {
    let bounds = params.inspector_bounds;
    let counts = dataset.inspector_counts();
    let mut work = params.clone();
    for (id, &n) in &counts {
        let m = work
            .inspectors
            .entry(id.clone())
            .or_insert_with(|| InspectorModel::new(id.clone(), 0.0, bounds.midpoint()));
        m.n_obs = n;
    }
    for (id, m) in work.inspectors.iter_mut() {
        m.n_obs = counts.get(id).copied().unwrap_or(0);
        m.insufficient_data = m.n_obs < 2;
        if id == UNKNOWN_INSPECTOR {
            m.sigma_v = bounds.sigma_max;
        } else if m.insufficient_data {
            m.sigma_v = bounds.midpoint();
        } else {
            m.sigma_v = m.sigma_v.clamp(bounds.sigma_min, bounds.sigma_max);
        }
    }

    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, e) in dataset.elements.iter().enumerate() {
        let mut ids: Vec<&str> = e.observed().map(|(i, _)| i.inspector.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            members.entry(id).or_default().push(k);
        }
    }
    let active: Vec<String> = match order {
        Some(o) => o.to_vec(),
        None => work.inspectors.keys().cloned().collect(),
    }
    .into_iter()
    .filter(|id| id != UNKNOWN_INSPECTOR && work.inspectors.get(id).is_some_and(|m| !m.insufficient_data))
    .collect();

    let mut cache: Vec<f64> =
        dataset.elements.par_iter().map(|e| element_loglik(e, &work)).collect::<Result<Vec<_>>>()?;
    let mut trace = vec![pairwise_sum(&cache)];
    let mut converged = false;
    let mut sweeps = 0;

    for _ in 0..opts.max_sweeps {
        for id in &active {
            control.check()?;
            let Some(idx) = members.get(id.as_str()) else { continue };
            let restricted = |p: &ModelParams| -> Result<f64> {
                let terms =
                    idx.par_iter().map(|&k| element_loglik(&dataset.elements[k], p)).collect::<Result<Vec<_>>>()?;
                Ok(pairwise_sum(&terms))
            };
            let sigma_obj = |t: &[f64]| -> Result<f64> {
                let mut p = work.clone();
                p.inspectors.get_mut(id).expect("active inspector").sigma_v = t[0];
                restricted(&p)
            };
            let s0 = work.inspectors[id].sigma_v;
            let run =
                newton_maximize(&sigma_obj, &[s0], &[bounds.sigma_min], &[bounds.sigma_max], opts.newton_iters, 1e-12)?;
            work.inspectors.get_mut(id).expect("active inspector").sigma_v = run.theta[0];
            if opts.estimate_bias {
                let mu_obj = |t: &[f64]| -> Result<f64> {
                    let mut p = work.clone();
                    p.inspectors.get_mut(id).expect("active inspector").mu_v = t[0];
                    restricted(&p)
                };
                let m0 = work.inspectors[id].mu_v;
                let b = opts.bias_bound;
                let run = newton_maximize(&mu_obj, &[m0], &[-b], &[b], opts.newton_iters, 1e-12)?;
                work.inspectors.get_mut(id).expect("active inspector").mu_v = run.theta[0];
            }
            for &k in idx {
                cache[k] = element_loglik(&dataset.elements[k], &work)?;
            }
        }
        sweeps += 1;
        let total = pairwise_sum(&cache);
        let prev = *trace.last().expect("non-empty");
        trace.push(total);
        if (total - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    Ok(InspectorEstimate { table: work.inspectors, trace, sweeps, converged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectorRow {
    pub id: String,
    pub n_obs: usize,
    pub true_sigma: f64,
    pub estimated_sigma: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectorReport {
    pub min_obs: usize,
    /// Over inspectors with at least `min_obs` observations.
    pub rmse: f64,
    pub spearman: Option<f64>,
    pub n_compared: usize,
    /// All common inspectors, most observed first.
    pub rows: Vec<InspectorRow>,
}

/// Recovery metrics of estimated `sigma_v` against a known truth.
pub fn inspector_report(estimated: &InspectorTable, truth: &InspectorTable, min_obs: usize) -> Result<InspectorReport> {
    let mut rows: Vec<InspectorRow> = estimated
        .values()
        .filter_map(|e| {
            truth.get(&e.id).map(|t| InspectorRow {
                id: e.id.clone(),
                n_obs: e.n_obs,
                true_sigma: t.sigma_v,
                estimated_sigma: e.sigma_v,
                error: e.sigma_v - t.sigma_v,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("no inspector in common between estimate and truth".into()));
    }
    rows.sort_by(|a, b| b.n_obs.cmp(&a.n_obs).then_with(|| a.id.cmp(&b.id)));
    let used: Vec<&InspectorRow> = rows.iter().filter(|r| r.n_obs >= min_obs).collect();
    let sq: Vec<f64> = used.iter().map(|r| r.error * r.error).collect();
    let rmse = if used.is_empty() { f64::NAN } else { (pairwise_sum(&sq) / used.len() as f64).sqrt() };
    let t: Vec<f64> = used.iter().map(|r| r.true_sigma).collect();
    let e: Vec<f64> = used.iter().map(|r| r.estimated_sigma).collect();
    Ok(InspectorReport { min_obs, rmse, spearman: spearman(&t, &e), n_compared: used.len(), rows })
}

pub const INSPECTOR_CSV_HEADER: [&str; 4] = ["inspector_id", "mu_v", "sigma_v", "n_obs"];

#[derive(Serialize, Deserialize)]
struct CsvRow {
    inspector_id: String,
    mu_v: f64,
    sigma_v: f64,
    n_obs: usize,
}

pub fn inspectors_csv(path: &Path, table: &InspectorTable) -> Result<Vec<u8>> {
    fsutil::csv_bytes(
        path,
        table.values().map(|m| CsvRow { inspector_id: m.id.clone(), mu_v: m.mu_v, sigma_v: m.sigma_v, n_obs: m.n_obs }),
    )
}

pub fn write_inspectors_csv(path: &Path, table: &InspectorTable) -> Result<()> {
    fsutil::write_atomic(path, &inspectors_csv(path, table)?)
}

pub fn read_inspectors_csv(path: &Path) -> Result<InspectorTable> {
    let rows: Vec<CsvRow> = fsutil::read_csv_rows(path, &INSPECTOR_CSV_HEADER)?;
    let mut out = InspectorTable::new();
    for (i, r) in rows.into_iter().enumerate() {
        if !(r.sigma_v >= 0.0 && r.sigma_v.is_finite() && r.mu_v.is_finite()) {
            return Err(Error::schema(
                path,
                i as u64 + 2,
                format!("invalid inspector parameters for {}", r.inspector_id),
            ));
        }
        let mut m = InspectorModel::new(r.inspector_id.clone(), r.mu_v, r.sigma_v);
        m.n_obs = r.n_obs;
        m.insufficient_data = r.n_obs < 2;
        out.insert(r.inspector_id, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pairs: &[(&str, f64, usize)]) -> InspectorTable {
        pairs
            .iter()
            .map(|&(id, s, n)| {
                let mut m = InspectorModel::new(id, 0.0, s);
                m.n_obs = n;
                (id.to_string(), m)
            })
            .collect()
    }

    #[test]
    fn report_identity() {
        let t = table(&[("a", 1.0, 10), ("b", 2.0, 20), ("c", 3.0, 30)]);
        let r = inspector_report(&t, &t, 0).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.spearman, Some(1.0));
        assert_eq!(r.rows[0].id, "c");
    }

    #[test]
    fn report_single_inspector() {
        let est = table(&[("a", 2.5, 10)]);
        let truth = table(&[("a", 3.0, 0)]);
        let r = inspector_report(&est, &truth, 0).unwrap();
        assert!((r.rmse - 0.5).abs() < 1e-15);
        assert_eq!(r.spearman, None);
    }

    #[test]
    fn report_needs_overlap() {
        assert!(inspector_report(&table(&[("a", 1.0, 1)]), &table(&[("b", 1.0, 1)]), 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("insp.csv");
        let t = table(&[("a", 1.25, 10), ("b x", 2.0, 1)]);
        write_inspectors_csv(&p, &t).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("inspector_id,mu_v,sigma_v,n_obs\n"));
        let back = read_inspectors_csv(&p).unwrap();
        assert_eq!(back["a"].sigma_v, 1.25);
        assert!(back["b x"].insufficient_data);
    }

    #[test]
    fn csv_bad_header_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "id,sigma\n1,2\n").unwrap();
        let e = read_inspectors_csv(&p).unwrap_err();
        assert!(e.to_string().contains("bad.csv:1"));
    }
}
