//! Real inspection databases: CSV reading through an explicit column
//! mapping, the bridge -> category -> element store, and its per-bridge
//! persisted form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ElementSeries, Inspection};
use crate::domain::ConditionScale;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::inspectors::UNKNOWN_INSPECTOR;

pub const DEFAULT_CATEGORY: &str = "default";
pub const DEFAULT_ELEMENT: &str = "1";
pub const STORE_FORMAT: &str = "ipdm-store";
pub const BRIDGE_FORMAT: &str = "ipdm-bridge";
pub const STORE_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.txt";
pub const STORE_META_FILE: &str = "store.json";

/// Column names per role. Mandatory roles: condition, inspector, year,
/// structure.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub condition: String,
    pub inspector: String,
    pub year: String,
    pub structure: String,
    pub element: Option<String>,
    pub category: Option<String>,
    pub material: Option<String>,
    pub age: Option<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl ColumnMapping {
    /// `role=column` lines; `attributes` takes a comma-separated list.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("mapping line {}: expected role=column", k + 1)))?;
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        let take = |pairs: &mut BTreeMap<String, String>, key: &str| pairs.remove(key).filter(|v| !v.is_empty());
        let mut need = |key: &str| {
            take(&mut pairs, key).ok_or_else(|| Error::InvalidInput(format!("mapping lacks mandatory role '{key}'")))
        };
        let condition = need("condition")?;
        let inspector = need("inspector")?;
        let year = need("year")?;
        let structure = need("structure")?;
        let m = Self {
            condition,
            inspector,
            year,
            structure,
            element: take(&mut pairs, "element"),
            category: take(&mut pairs, "category"),
            material: take(&mut pairs, "material"),
            age: take(&mut pairs, "age"),
            attributes: take(&mut pairs, "attributes")
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default(),
        };
        if let Some(k) = pairs.keys().next() {
            return Err(Error::InvalidInput(format!("unknown mapping role '{k}'")));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInspection {
    pub year: i32,
    pub condition: Option<f64>,
    pub inspector: String,
    /// Rating outside the condition scale; kept, the filter gate decides.
    #[serde(default)]
    pub outlier_candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredElement {
    pub id: String,
    pub material: Option<String>,
    pub age: Option<f64>,
    /// Aligned with [`NetworkStore::attribute_names`].
    pub attributes: Vec<Option<f64>>,
    /// Sorted by year.
    pub inspections: Vec<StoredInspection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub elements: BTreeMap<String, StoredElement>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub id: String,
    pub categories: BTreeMap<String, Category>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkStore {
    pub scale: ConditionScale,
    pub attribute_names: Vec<String>,
    pub bridges: BTreeMap<String, Bridge>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub stored: usize,
    pub missing: usize,
    pub flagged: usize,
    pub unknown_inspector: usize,
    pub skipped: Vec<SkippedRow>,
}

impl NetworkStore {
    pub fn n_elements(&self) -> usize {
        self.bridges.values().flat_map(|b| b.categories.values()).map(|c| c.elements.len()).sum()
    }

    pub fn n_inspections(&self) -> usize {
        self.elements().map(|(_, _, e)| e.inspections.len()).sum()
    }

    pub fn inspector_ids(&self) -> BTreeSet<String> {
        self.elements().flat_map(|(_, _, e)| e.inspections.iter().map(|i| i.inspector.clone())).collect()
    }

    /// `(bridge, category, element)` in key order.
    pub fn elements(&self) -> impl Iterator<Item = (&str, &str, &StoredElement)> {
        self.bridges.iter().flat_map(|(b, br)| {
            br.categories
                .iter()
                .flat_map(move |(c, cat)| cat.elements.values().map(move |e| (b.as_str(), c.as_str(), e)))
        })
    }

    /// Model-ready series. Missing attribute values are imputed with the
    /// store mean of that attribute; the age, when mapped, is the first
    /// attribute.
    pub fn to_dataset(&self) -> Dataset {
        let has_age = self.elements().any(|(_, _, e)| e.age.is_some());
        let raw = |e: &StoredElement| -> Vec<Option<f64>> {
            let mut v = Vec::new();
            if has_age {
                v.push(e.age);
            }
            v.extend(e.attributes.iter().copied());
            v
        };
        let dim = usize::from(has_age) + self.attribute_names.len();
        let mut sums = vec![(0.0, 0usize); dim];
        for (_, _, e) in self.elements() {
            for (s, v) in sums.iter_mut().zip(raw(e)) {
                if let Some(v) = v {
                    s.0 += v;
                    s.1 += 1;
                }
            }
        }
        let means: Vec<f64> = sums.iter().map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
        Dataset::new(
            self.elements()
                .map(|(b, c, e)| {
                    let mut s = element_series(b, c, e);
                    s.attributes = raw(e).iter().zip(&means).map(|(v, m)| v.unwrap_or(*m)).collect();
                    s
                })
                .collect(),
        )
    }
}

/// `bridge/category/element`, the series id used by the models.
pub fn series_id(bridge: &str, category: &str, element: &str) -> String {
    format!("{bridge}/{category}/{element}")
}

pub fn element_series(bridge: &str, category: &str, e: &StoredElement) -> ElementSeries {
    ElementSeries::new(
        series_id(bridge, category, &e.id),
        category,
        e.inspections
            .iter()
            .map(|i| Inspection { year: f64::from(i.year), condition: i.condition, inspector: i.inspector.clone() })
            .collect(),
    )
}

fn parse_year(s: &str) -> Option<i32> {
    let s = s.trim();
    (s.len() == 4 && s.bytes().all(|b| b.is_ascii_digit())).then(|| s.parse().ok()).flatten()
}

fn parse_opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some).ok_or_else(|| format!("'{s}' is not a number"))
}

/// Reads one CSV export. Malformed rows are skipped and listed in the
/// summary with their line number.
pub fn read_csv(path: &Path, mapping: &ColumnMapping, scale: ConditionScale) -> Result<(NetworkStore, IngestSummary)> {
    let mut rdr =
        csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| Error::schema(path, 0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::schema(path, 1, e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::schema(path, 1, format!("mapped column '{name}' not in header")))
    };
    let c_cond = col(&mapping.condition)?;
    let c_insp = col(&mapping.inspector)?;
    let c_year = col(&mapping.year)?;
    let c_struct = col(&mapping.structure)?;
    let opt = |n: &Option<String>| n.as_deref().map(col).transpose();
    let c_elem = opt(&mapping.element)?;
    let c_cat = opt(&mapping.category)?;
    let c_mat = opt(&mapping.material)?;
    let c_age = opt(&mapping.age)?;
    let c_attr: Vec<usize> = mapping.attributes.iter().map(|a| col(a)).collect::<Result<_>>()?;

    let mut store = NetworkStore { scale, attribute_names: mapping.attributes.clone(), bridges: BTreeMap::new() };
    let mut summary = IngestSummary::default();
    for rec in rdr.records() {
        summary.rows += 1;
        let line = summary.rows as u64 + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                log::warn!("{}:{line}: skipped: {e}", path.display());
                summary.skipped.push(SkippedRow { line, reason: e.to_string() });
                continue;
            }
        };
        let line = rec.position().map_or(line, |p| p.line());
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let parsed = (|| -> std::result::Result<_, String> {
            let structure = field(c_struct);
            if structure.is_empty() {
                return Err("empty structure id".into());
            }
            let year = parse_year(field(c_year))
                .ok_or_else(|| format!("year '{}' is not a 4-digit integer", field(c_year)))?;
            let condition = parse_opt_f64(field(c_cond))?;
            let age = c_age.map(|k| parse_opt_f64(field(k))).transpose()?.flatten();
            let attrs = c_attr.iter().map(|&k| parse_opt_f64(field(k))).collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((structure.to_string(), year, condition, age, attrs))
        })();
        let (structure, year, condition, age, attrs) = match parsed {
            Ok(p) => p,
            Err(reason) => {
                log::warn!("{}:{line}: skipped: {reason}", path.display());
                summary.skipped.push(SkippedRow { line, reason });
                continue;
            }
        };
        let nonempty =
            |k: Option<usize>, default: &str| k.map(field).filter(|s| !s.is_empty()).unwrap_or(default).to_string();
        let category = nonempty(c_cat, DEFAULT_CATEGORY);
        let element = nonempty(c_elem, DEFAULT_ELEMENT);
        let material = c_mat.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        let mut inspector = field(c_insp).to_string();
        if inspector.is_empty() {
            inspector = UNKNOWN_INSPECTOR.into();
            summary.unknown_inspector += 1;
        }
        let outlier_candidate = condition.is_some_and(|c| !scale.contains(c));
        summary.missing += usize::from(condition.is_none());
        summary.flagged += usize::from(outlier_candidate);
        summary.stored += 1;

        let bridge =
            store.bridges.entry(structure.clone()).or_insert_with(|| Bridge { id: structure, ..Default::default() });
        let cat = bridge
            .categories
            .entry(category.clone())
            .or_insert_with(|| Category { id: category, ..Default::default() });
        let el = cat.elements.entry(element.clone()).or_insert_with(|| StoredElement {
            id: element,
            material: None,
            age: None,
            attributes: vec![None; attrs.len()],
            inspections: Vec::new(),
        });
        // element-level fields: first non-missing value wins
        el.material = el.material.take().or(material);
        el.age = el.age.or(age);
        for (slot, v) in el.attributes.iter_mut().zip(attrs) {
            *slot = slot.or(v);
        }
        el.inspections.push(StoredInspection { year, condition, inspector, outlier_candidate });
    }
    for e in store.bridges.values_mut().flat_map(|b| b.categories.values_mut()).flat_map(|c| c.elements.values_mut()) {
        // stable: same-year rows keep file order
        e.inspections.sort_by_key(|i| i.year);
    }
    Ok((store, summary))
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    format: String,
    version: u32,
    scale: ConditionScale,
    attribute_names: Vec<String>,
    n_bridges: usize,
}

#[derive(Serialize, Deserialize)]
struct BridgeArtifact {
    format: String,
    version: u32,
    bridge: Bridge,
}

/// File name for a bridge id, escaped with [`fsutil::escape_name`].
pub fn bridge_file_name(id: &str) -> String {
    format!("bridge_{}.json", fsutil::escape_name(id))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| Error::Other(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

/// Writes one artifact per bridge, `store.json` and `index.txt` (one line
/// per bridge: `id<TAB>file`). Returns the file names written.
pub fn preprocess(store: &NetworkStore, out_dir: &Path) -> Result<Vec<String>> {
    fsutil::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut index = String::new();
    for (id, b) in &store.bridges {
        if id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidInput(format!("bridge id {id:?} contains a tab or newline")));
        }
        let name = bridge_file_name(id);
        let art = BridgeArtifact { format: BRIDGE_FORMAT.into(), version: STORE_VERSION, bridge: b.clone() };
        fsutil::write_atomic(&out_dir.join(&name), &json_bytes(&art)?)?;
        index.push_str(&format!("{id}\t{name}\n"));
        written.push(name);
    }
    let meta = StoreMeta {
        format: STORE_FORMAT.into(),
        version: STORE_VERSION,
        scale: store.scale,
        attribute_names: store.attribute_names.clone(),
        n_bridges: store.bridges.len(),
    };
    fsutil::write_atomic(&out_dir.join(STORE_META_FILE), &json_bytes(&meta)?)?;
    fsutil::write_atomic(&out_dir.join(INDEX_FILE), index.as_bytes())?;
    written.push(STORE_META_FILE.into());
    written.push(INDEX_FILE.into());
    Ok(written)
}

/// Bridge ids and artifact names from the index.
pub fn read_index(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(INDEX_FILE);
    fsutil::read_to_string(&path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::schema(&path, k as u64 + 1, "expected id<TAB>file"))
        })
        .collect()
}

fn read_meta(dir: &Path) -> Result<StoreMeta> {
    let path = dir.join(STORE_META_FILE);
    let meta: StoreMeta = serde_json::from_str(&fsutil::read_to_string(&path)?)
        .map_err(|e| Error::schema(&path, e.line() as u64, e.to_string()))?;
    if meta.format != STORE_FORMAT || meta.version != STORE_VERSION {
        return Err(Error::schema(&path, 1, format!("unsupported store {} v{}", meta.format, meta.version)));
    }
    Ok(meta)
}

fn read_bridge_file(path: &Path) -> Result<Bridge> {
    let art: BridgeArtifact = serde_json::from_str(&fsutil::read_to_string(path)?)
        .map_err(|e| Error::schema(path, e.line() as u64, e.to_string()))?;
    if art.format != BRIDGE_FORMAT || art.version != STORE_VERSION {
        return Err(Error::schema(path, 1, format!("unsupported artifact {} v{}", art.format, art.version)));
    }
    Ok(art.bridge)
}

/// Reads a single bridge artifact, touching no other bridge.
pub fn load_bridge(dir: &Path, id: &str) -> Result<Bridge> {
    let (_, file) = read_index(dir)?
        .into_iter()
        .find(|(b, _)| b == id)
        .ok_or_else(|| Error::NotFound { level: "bridge", id: id.into() })?;
    read_bridge_file(&dir.join(file))
}

pub fn load_store(dir: &Path) -> Result<NetworkStore> {
    let meta = read_meta(dir)?;
    let mut bridges = BTreeMap::new();
    for (id, file) in read_index(dir)? {
        let b = read_bridge_file(&dir.join(file))?;
        bridges.insert(id, b);
    }
    Ok(NetworkStore { scale: meta.scale, attribute_names: meta.attribute_names, bridges })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementListing {
    pub id: String,
    pub n_inspections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", content = "items", rename_all = "snake_case")]
pub enum Listing {
    Bridges(Vec<String>),
    Categories(Vec<String>),
    Elements(Vec<ElementListing>),
    Series(ElementSeries),
}

pub fn find_bridge<'a>(store: &'a NetworkStore, b: &str) -> Result<&'a Bridge> {
    store.bridges.get(b).ok_or_else(|| Error::NotFound { level: "bridge", id: b.into() })
}

pub fn find_category<'a>(store: &'a NetworkStore, b: &str, c: &str) -> Result<&'a Category> {
    find_bridge(store, b)?.categories.get(c).ok_or_else(|| Error::NotFound { level: "category", id: c.into() })
}

pub fn find_element<'a>(store: &'a NetworkStore, b: &str, c: &str, e: &str) -> Result<&'a StoredElement> {
    find_category(store, b, c)?.elements.get(e).ok_or_else(|| Error::NotFound { level: "element", id: e.into() })
}

/// Elements of a bridge with the given id, across its categories.
pub fn find_in_bridge<'a>(store: &'a NetworkStore, b: &str, e: &str) -> Result<Vec<(&'a str, &'a StoredElement)>> {
    let hits: Vec<_> = find_bridge(store, b)?
        .categories
        .iter()
        .filter_map(|(c, cat)| cat.elements.get(e).map(|el| (c.as_str(), el)))
        .collect();
    if hits.is_empty() {
        return Err(Error::NotFound { level: "element", id: e.into() });
    }
    Ok(hits)
}

/// Children of `path` (`[]`, `[bridge]`, `[bridge, category]`), or the
/// element series for a full path.
pub fn navigate(store: &NetworkStore, path: &[&str]) -> Result<Listing> {
    match path {
        [] => Ok(Listing::Bridges(store.bridges.keys().cloned().collect())),
        [b] => Ok(Listing::Categories(find_bridge(store, b)?.categories.keys().cloned().collect())),
        [b, c] => Ok(Listing::Elements(
            find_category(store, b, c)?
                .elements
                .values()
                .map(|e| ElementListing { id: e.id.clone(), n_inspections: e.inspections.len() })
                .collect(),
        )),
        [b, c, e] => Ok(Listing::Series(element_series(b, c, find_element(store, b, c, e)?))),
        _ => Err(Error::InvalidInput(format!("path has {} components, at most 3 allowed", path.len()))),
    }
}
