//! Nadaraya-Watson regression of initial speeds on structural attributes.

use serde::{Deserialize, Serialize};

use crate::domain::Gaussian1D;
use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, std_dev};

pub const BANDWIDTH_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    /// Standardized attributes.
    pub z: Vec<f64>,
    /// Smoothed initial speed, transformed units per year.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    /// One bandwidth per group.
    pub bandwidths: Vec<f64>,
    /// Group index of every attribute dimension; one-hot columns of a
    /// categorical attribute share a group.
    pub groups: Vec<usize>,
    /// Groups whose columns are all constant; their bandwidth stays 1.
    pub fixed: Vec<bool>,
    pub attr_mean: Vec<f64>,
    pub attr_std: Vec<f64>,
    pub points: Vec<ReferencePoint>,
    /// sigma_KR^2.
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrPrior {
    pub gaussian: Gaussian1D,
    /// All weights underflowed and the global reference moments were used.
    pub fallback: bool,
}

impl KernelModel {
    pub fn dim(&self) -> usize {
        self.groups.len()
    }

    pub fn n_groups(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.attr_mean.iter().zip(&self.attr_std))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("kernel model has no reference points".into()));
        }
        if self.bandwidths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("kernel bandwidths must be positive".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidInput("kernel noise variance must be positive".into()));
        }
        Ok(())
    }
}

/// Prior for the initial speed of an element with raw attributes `raw`.
pub fn kr_prior(raw: &[f64], km: &KernelModel) -> Result<KrPrior> {
    km.validate()?;
    if raw.len() != km.dim() {
        return Err(Error::InvalidInput(format!(
            "attribute dimension {} does not match kernel model dimension {}",
            raw.len(),
            km.dim()
        )));
    }
    let z = km.standardize(raw);
    let weights: Vec<f64> = km
        .points
        .iter()
        .map(|p| {
            let q: f64 = z
                .iter()
                .zip(&p.z)
                .zip(&km.groups)
                .map(|((a, b), &g)| {
                    let l = km.bandwidths[g];
                    (a - b) * (a - b) / (2.0 * l * l)
                })
                .sum();
            (-q).exp()
        })
        .collect();
    let total = pairwise_sum(&weights);
    let speeds: Vec<f64> = km.points.iter().map(|p| p.speed).collect();
    let (m, v, fallback) = if total > 0.0 && total.is_finite() {
        let m = pairwise_sum(&weights.iter().zip(&speeds).map(|(w, v)| w * v).collect::<Vec<_>>()) / total;
        let v =
            pairwise_sum(&weights.iter().zip(&speeds).map(|(w, s)| w * (s - m) * (s - m)).collect::<Vec<_>>()) / total;
        (m, v, false)
    } else {
        let m = mean(&speeds);
        let s = std_dev(&speeds);
        (m, s * s, true)
    };
    Ok(KrPrior { gaussian: Gaussian1D { mean: m.min(0.0), variance: v + km.noise_var }, fallback })
}

/// Builds reference points from raw attributes and smoothed initial speeds.
///
/// Attributes are standardized with the statistics of these points. Constant
/// columns standardize to zero; a group made only of such columns is fixed.
pub fn build_reference(samples: &[(Vec<f64>, f64)], groups: Option<&[usize]>, noise_var: f64) -> Result<KernelModel> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidInput("cannot build a kernel model from an empty training set".into()));
    };
    let d = first.0.len();
    if samples.iter().any(|(z, v)| z.len() != d || !v.is_finite() || z.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidInput("reference attributes must be finite with a common dimension".into()));
    }
    let groups: Vec<usize> = match groups {
        Some(g) if g.len() == d => g.to_vec(),
        Some(g) => {
            return Err(Error::InvalidInput(format!("{} attribute groups for {d} attributes", g.len())));
        }
        None => (0..d).collect(),
    };
    let n_groups = groups.iter().map(|g| g + 1).max().unwrap_or(0);
    let mut attr_mean = Vec::with_capacity(d);
    let mut attr_std = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = samples.iter().map(|(z, _)| z[j]).collect();
        attr_mean.push(mean(&col));
        attr_std.push(std_dev(&col));
    }
    let mut fixed = vec![true; n_groups];
    for (j, &g) in groups.iter().enumerate() {
        if attr_std[j] > 0.0 {
            fixed[g] = false;
        }
    }
    let mut km = KernelModel {
        bandwidths: vec![1.0; n_groups],
        groups,
        fixed,
        attr_mean,
        attr_std,
        points: Vec::with_capacity(samples.len()),
        noise_var,
    };
    km.points = samples.iter().map(|(z, v)| ReferencePoint { z: km.standardize(z), speed: *v }).collect();
    Ok(km)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn km(points: &[(f64, f64)], l: f64) -> KernelModel {
        let samples: Vec<(Vec<f64>, f64)> = points.iter().map(|&(z, v)| (vec![z], v)).collect();
        let mut k = build_reference(&samples, None, 0.01).unwrap();
        k.bandwidths = vec![l];
        k
    }

    #[test]
    fn single_point() {
        let k = build_reference(&[(vec![3.0], -0.5)], None, 0.04).unwrap();
        let p = kr_prior(&[7.0], &k).unwrap();
        assert_eq!(p.gaussian.mean, -0.5);
        assert_eq!(p.gaussian.variance, 0.04);
        assert!(k.fixed[0]);
    }

    #[test]
    fn symmetric_pair() {
        let k = km(&[(0.0, -1.0), (2.0, -3.0)], 1.0);
        let p = kr_prior(&[1.0], &k).unwrap();
        assert!((p.gaussian.mean + 2.0).abs() < 1e-12);
        assert!((p.gaussian.variance - (1.0 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn narrow_bandwidth_picks_coincident_point() {
        let pts = [(0.0, -0.2), (1.0, -0.7), (2.0, -1.1), (3.0, -0.4), (4.0, -2.0)];
        let k = km(&pts, 1e-3);
        let p = kr_prior(&[2.0], &k).unwrap();
        assert!((p.gaussian.mean + 1.1).abs() < 1e-6);
        assert!(!p.fallback);
    }

    #[test]
    fn wide_bandwidth_gives_global_mean() {
        let pts = [(0.0, -0.2), (1.0, -0.7), (2.0, -1.1), (3.0, -0.4), (4.0, -2.0)];
        let k = km(&pts, 1e6);
        let p = kr_prior(&[0.3], &k).unwrap();
        assert!((p.gaussian.mean + 0.88).abs() < 1e-6);
    }

    #[test]
    fn underflow_falls_back() {
        let k = km(&[(0.0, -1.0), (1.0, -2.0)], 1e-3);
        let p = kr_prior(&[0.5], &k).unwrap();
        assert!(p.fallback);
        assert!((p.gaussian.mean + 1.5).abs() < 1e-12);
        assert!((p.gaussian.variance - (0.25 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn mean_clamped_and_convex() {
        let k = km(&[(0.0, 0.5), (1.0, 1.0)], 1.0);
        assert_eq!(kr_prior(&[0.2], &k).unwrap().gaussian.mean, 0.0);
        let k = km(&[(0.0, -0.5), (1.0, -1.5), (2.0, -1.0)], 0.5);
        for z in [-3.0, 0.0, 0.7, 1.4, 5.0] {
            let p = kr_prior(&[z], &k).unwrap();
            if !p.fallback {
                assert!(p.gaussian.mean <= -0.5 + 1e-12 && p.gaussian.mean >= -1.5 - 1e-12);
            }
            assert!(p.gaussian.variance >= k.noise_var);
        }
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let s = vec![(vec![1.0, 5.0], -1.0), (vec![2.0, 5.0], -2.0), (vec![3.0, 5.0], -3.0)];
        let k = build_reference(&s, None, 0.1).unwrap();
        assert_eq!(k.points.len(), 3);
        assert!(k.points.iter().all(|p| p.z[1] == 0.0));
        assert_eq!(k.fixed, vec![false, true]);
        assert_eq!(k.points.iter().map(|p| p.speed).collect::<Vec<_>>(), vec![-1.0, -2.0, -3.0]);
    }

    #[test]
    fn dimension_mismatch_and_empty() {
        let k = km(&[(0.0, -1.0)], 1.0);
        assert!(kr_prior(&[0.0, 1.0], &k).is_err());
        assert!(build_reference(&[], None, 0.1).is_err());
    }
}
