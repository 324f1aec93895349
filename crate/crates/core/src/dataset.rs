//! Element-level inspection series, the common currency between ingestion,
//! synthetic generation, training and verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub year: f64,
    /// `None` marks a missing rating; the year is kept as a predict-only step.
    pub condition: Option<f64>,
    pub inspector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSeries {
    pub id: String,
    pub category: String,
    /// Sorted by year.
    pub inspections: Vec<Inspection>,
    /// Standardization happens inside the kernel model, these are raw values.
    #[serde(default)]
    pub attributes: Vec<f64>,
}

impl ElementSeries {
    pub fn new(id: impl Into<String>, category: impl Into<String>, mut inspections: Vec<Inspection>) -> Self {
        inspections.sort_by(|a, b| a.year.total_cmp(&b.year));
        Self { id: id.into(), category: category.into(), inspections, attributes: Vec::new() }
    }

    pub fn observed(&self) -> impl Iterator<Item = (&Inspection, f64)> {
        self.inspections.iter().filter_map(|i| i.condition.map(|c| (i, c)))
    }

    pub fn n_observed(&self) -> usize {
        self.observed().count()
    }

    pub fn first_observed_year(&self) -> Option<f64> {
        self.observed().next().map(|(i, _)| i.year)
    }

    pub fn last_observed_year(&self) -> Option<f64> {
        self.observed().last().map(|(i, _)| i.year)
    }

    /// Copy restricted to inspections at or before `year`.
    pub fn truncated(&self, year: f64) -> Self {
        let mut out = self.clone();
        out.inspections.retain(|i| i.year <= year);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub elements: Vec<ElementSeries>,
}

impl Dataset {
    pub fn new(elements: Vec<ElementSeries>) -> Self {
        Self { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn n_observations(&self) -> usize {
        self.elements.iter().map(ElementSeries::n_observed).sum()
    }

    /// Inspections including unrated ones.
    pub fn inspections_total(&self) -> usize {
        self.elements.iter().map(|e| e.inspections.len()).sum()
    }

    /// Observation count per inspector.
    pub fn inspector_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.elements {
            for (i, _) in e.observed() {
                *out.entry(i.inspector.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn by_category(&self) -> BTreeMap<String, Dataset> {
        let mut out: BTreeMap<String, Dataset> = BTreeMap::new();
        for e in &self.elements {
            out.entry(e.category.clone()).or_default().elements.push(e.clone());
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { elements: idx.iter().map(|&i| self.elements[i].clone()).collect() }
    }
}
