//! Named instance subsets: selection descriptors, set algebra, provenance and persistence.
//!
//! Membership is stored as a sorted id list. The provenance expression that
//! produced it is kept alongside and can be replayed to check for drift.
//!
//! `subsets.json` layout (pretty-printed, fields in this order):
//!
//! ```text
//! { "version": 1, "bundle_fingerprint": <u32>, "revision": <u64>, "next_id": <u64>,
//!   "subsets": [ { "id", "name", "members": ["test/3", ...], "provenance": {...},
//!                  "created_at": <unix ms>, "bundle_fingerprint": <u32> }, ... ] }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::difficulty::{Analysis, Pattern};
use crate::flow::flow_for;
use crate::ids::InstanceId;
use crate::projection::{project_2d, ProjectionSource};
use crate::summary::{heatmap_cell, heatmap_dims, PerspectivePair};

pub const STORE_VERSION: u32 = 1;
pub const STORE_FILE: &str = "subsets.json";

#[derive(Debug, thiserror::Error)]
pub enum SubsetError {
    #[error("unknown subset `{0}`")]
    UnknownSubset(String),
    #[error("instance {0} has no profile")]
    UnknownInstance(InstanceId),
    #[error("invalid selection at `{field}`: {message}")]
    InvalidSelection { field: String, message: String },
    #[error("subsets belong to different bundles ({0:08x} vs {1:08x})")]
    CrossBundle(u32, u32),
    #[error("subset store version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed subset store: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn invalid(field: &str, message: impl Into<String>) -> SubsetError {
    SubsetError::InvalidSelection { field: field.to_string(), message: message.into() }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Where a subset's members came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    All,
    Ids {
        ids: Vec<InstanceId>,
    },
    /// Box over difficulty values; an unset axis is unconstrained. A human
    /// range never matches instances without annotations.
    Brush {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<Range>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<Range>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        human: Option<Range>,
    },
    HeatmapCells {
        pair: String,
        bins: usize,
        /// `[x, y]` cell indices.
        cells: Vec<[usize; 2]>,
    },
    /// `[actual, predicted]` class pairs.
    ConfusionCells {
        cells: Vec<[u32; 2]>,
    },
    ProjectionRect {
        source: ProjectionSource,
        x: Range,
        y: Range,
    },
    ProjectionLasso {
        source: ProjectionSource,
        polygon: Vec<[f64; 2]>,
    },
    /// A flow element, within the flow built over `scope` (all profiled instances when absent).
    FlowElement {
        element: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scope: Option<Vec<InstanceId>>,
    },
    Patterns {
        codes: Vec<Pattern>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOp {
    Union,
    Intersection,
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Selection { selection: Selection },
    Combine { op: SetOp, left: Box<Provenance>, right: Box<Provenance> },
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(x: f64, y: f64, polygon: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let [xi, yi] = polygon[i];
        let [xj, yj] = polygon[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn normalize(mut ids: Vec<InstanceId>) -> Vec<InstanceId> {
    ids.sort_unstable();
    ids.dedup();
    ids
}

impl Selection {
    /// Members among the analysis' profiled instances, sorted.
    pub fn evaluate(&self, analysis: &Analysis) -> Result<Vec<InstanceId>, SubsetError> {
        let profiles = analysis.profiles();
        let filter = |f: &dyn Fn(&crate::difficulty::DifficultyProfile) -> bool| {
            normalize(profiles.iter().filter(|p| f(p)).map(|p| p.instance).collect())
        };
        Ok(match self {
            Selection::All => filter(&|_| true),
            Selection::Ids { ids } => {
                if let Some(&bad) = ids.iter().find(|&&id| analysis.profile(id).is_none()) {
                    return Err(SubsetError::UnknownInstance(bad));
                }
                normalize(ids.clone())
            }
            Selection::Brush { data, model, human } => {
                for (name, r) in [("data", data), ("model", model), ("human", human)] {
                    if let Some(r) = r {
                        if !(r.lo.is_finite() && r.hi.is_finite()) {
                            return Err(invalid(name, "bounds must be finite"));
                        }
                    }
                }
                filter(&|p| {
                    data.is_none_or(|r| r.contains(p.data_kdn))
                        && model.is_none_or(|r| r.contains(p.model_difficulty))
                        && human.is_none_or(|r| p.human_difficulty.is_some_and(|h| r.contains(h)))
                })
            }
            Selection::HeatmapCells { pair, bins, cells } => {
                let pair: PerspectivePair = pair.parse().map_err(|e: crate::summary::SummaryError| invalid("pair", e.to_string()))?;
                if *bins == 0 {
                    return Err(invalid("bins", "must be at least 1"));
                }
                let l = analysis.bundle().num_layers();
                let (xb, yb) = heatmap_dims(pair, *bins, l);
                if let Some(c) = cells.iter().find(|[x, y]| *x >= xb || *y >= yb) {
                    return Err(invalid("cells", format!("cell {c:?} outside {xb}x{yb}")));
                }
                filter(&|p| heatmap_cell(p, pair, *bins, l).is_some_and(|(x, y)| cells.contains(&[x, y])))
            }
            Selection::ConfusionCells { cells } => {
                let c = analysis.bundle().num_classes() as u32;
                if let Some(cell) = cells.iter().find(|[a, b]| *a >= c || *b >= c) {
                    return Err(invalid("cells", format!("class pair {cell:?} outside {c} classes")));
                }
                filter(&|p| cells.contains(&[p.label, p.prediction]))
            }
            Selection::ProjectionRect { source, x, y } => {
                let proj = project_2d(analysis.bundle(), profiles, *source).map_err(|e| invalid("source", e.to_string()))?;
                normalize(proj.points.iter().filter(|p| x.contains(p.x) && y.contains(p.y)).map(|p| p.id).collect())
            }
            Selection::ProjectionLasso { source, polygon } => {
                if polygon.len() < 3 {
                    return Err(invalid("polygon", "needs at least 3 vertices"));
                }
                let proj = project_2d(analysis.bundle(), profiles, *source).map_err(|e| invalid("source", e.to_string()))?;
                normalize(proj.points.iter().filter(|p| point_in_polygon(p.x, p.y, polygon)).map(|p| p.id).collect())
            }
            Selection::FlowElement { element, scope } => {
                let scope = match scope {
                    Some(ids) => ids.clone(),
                    None => profiles.iter().map(|p| p.instance).collect(),
                };
                let graph = flow_for(analysis, &scope).map_err(|e| invalid("scope", e.to_string()))?;
                graph.select(element).map_err(|e| invalid("element", e.to_string()))?
            }
            Selection::Patterns { codes } => filter(&|p| codes.contains(&p.pattern)),
        })
    }
}

pub fn union(a: &[InstanceId], b: &[InstanceId]) -> Vec<InstanceId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

pub fn intersection(a: &[InstanceId], b: &[InstanceId]) -> Vec<InstanceId> {
    a.iter().copied().filter(|x| b.binary_search(x).is_ok()).collect()
}

pub fn difference(a: &[InstanceId], b: &[InstanceId]) -> Vec<InstanceId> {
    a.iter().copied().filter(|x| b.binary_search(x).is_err()).collect()
}

impl SetOp {
    /// Both inputs must be sorted and deduplicated; so is the output.
    pub fn apply(self, a: &[InstanceId], b: &[InstanceId]) -> Vec<InstanceId> {
        match self {
            SetOp::Union => union(a, b),
            SetOp::Intersection => intersection(a, b),
            SetOp::Difference => difference(a, b),
        }
    }
}

impl Provenance {
    pub fn evaluate(&self, analysis: &Analysis) -> Result<Vec<InstanceId>, SubsetError> {
        match self {
            Provenance::Selection { selection } => selection.evaluate(analysis),
            Provenance::Combine { op, left, right } => Ok(op.apply(&left.evaluate(analysis)?, &right.evaluate(analysis)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subset {
    pub id: String,
    pub name: String,
    pub members: Vec<InstanceId>,
    pub provenance: Provenance,
    /// Unix time in milliseconds.
    pub created_at: u64,
    pub bundle_fingerprint: u32,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One id per line under an `instance_id` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id\n");
        for id in &self.members {
            out.push_str(&format!("{id}\n"));
        }
        out
    }

    /// True when replaying the provenance reproduces the stored members.
    pub fn replays(&self, analysis: &Analysis) -> bool {
        self.bundle_fingerprint == analysis.bundle().fingerprint() && self.provenance.evaluate(analysis).is_ok_and(|m| m == self.members)
    }
}

/// Reads member ids from a subset CSV (header `instance_id`) or a bare id list.
pub fn parse_id_list(text: &str) -> Result<Vec<InstanceId>, SubsetError> {
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() || (n == 0 && field == "instance_id") {
            continue;
        }
        ids.push(field.parse().map_err(|e: String| SubsetError::Malformed(format!("line {}: {e}", n + 1)))?);
    }
    Ok(normalize(ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetStore {
    pub version: u32,
    pub bundle_fingerprint: u32,
    pub revision: u64,
    pub next_id: u64,
    pub subsets: Vec<Subset>,
}

impl SubsetStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("store serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SubsetError> {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| SubsetError::Malformed(e.to_string()))?;
        let found = v.get("version").and_then(|v| v.as_u64()).ok_or_else(|| SubsetError::Malformed("missing version".into()))?;
        if found != STORE_VERSION as u64 {
            return Err(SubsetError::Version { found: found as u32, expected: STORE_VERSION });
        }
        serde_json::from_value(v).map_err(|e| SubsetError::Malformed(e.to_string()))
    }
}

#[derive(Debug)]
pub struct LoadedStore {
    pub store: SubsetStore,
    /// Ids of subsets recorded against a different bundle.
    pub stale: Vec<String>,
}

pub fn load_store(path: &Path, fingerprint: u32) -> Result<LoadedStore, SubsetError> {
    let bytes = fs::read(path).map_err(|source| SubsetError::Io { path: path.to_path_buf(), source })?;
    let store = SubsetStore::from_bytes(&bytes)?;
    let stale: Vec<String> = store.subsets.iter().filter(|s| s.bundle_fingerprint != fingerprint).map(|s| s.id.clone()).collect();
    if !stale.is_empty() {
        log::warn!("{}: {} subset(s) were recorded against a different bundle; provenance may be stale", path.display(), stale.len());
    }
    Ok(LoadedStore { store, stale })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SubsetError> {
    let io_err = |source| SubsetError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug)]
struct State {
    revision: u64,
    next_id: u64,
    subsets: BTreeMap<u64, Subset>,
}

/// Thread-safe subset registry for one bundle. Every mutation bumps the revision.
#[derive(Debug)]
pub struct SubsetManager {
    fingerprint: u32,
    state: RwLock<State>,
    save_gate: Mutex<u64>,
}

fn numeric_id(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl SubsetManager {
    pub fn new(fingerprint: u32) -> Self {
        SubsetManager {
            fingerprint,
            state: RwLock::new(State { revision: 0, next_id: 1, subsets: BTreeMap::new() }),
            save_gate: Mutex::new(0),
        }
    }

    pub fn from_store(store: SubsetStore, fingerprint: u32) -> Result<Self, SubsetError> {
        let mut subsets = BTreeMap::new();
        for s in store.subsets {
            let n = numeric_id(&s.id).ok_or_else(|| SubsetError::Malformed(format!("bad subset id `{}`", s.id)))?;
            subsets.insert(n, s);
        }
        let next_id = store.next_id.max(subsets.keys().next_back().map_or(1, |k| k + 1));
        Ok(SubsetManager {
            fingerprint,
            state: RwLock::new(State { revision: store.revision, next_id, subsets }),
            save_gate: Mutex::new(store.revision),
        })
    }

    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    pub fn revision(&self) -> u64 {
        self.state.read().unwrap().revision
    }

    pub fn list(&self) -> Vec<Subset> {
        self.state.read().unwrap().subsets.values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<Subset, SubsetError> {
        let unknown = || SubsetError::UnknownSubset(id.to_string());
        let n = numeric_id(id).ok_or_else(unknown)?;
        self.state.read().unwrap().subsets.get(&n).cloned().ok_or_else(unknown)
    }

    /// Records a subset with the given members (normalized) and provenance.
    pub fn insert(&self, name: Option<String>, members: Vec<InstanceId>, provenance: Provenance) -> Subset {
        let mut st = self.state.write().unwrap();
        let n = st.next_id;
        st.next_id += 1;
        st.revision += 1;
        let subset = Subset {
            id: format!("s{n}"),
            name: name.unwrap_or_else(|| format!("subset {n}")),
            members: normalize(members),
            provenance,
            created_at: now_ms(),
            bundle_fingerprint: self.fingerprint,
        };
        st.subsets.insert(n, subset.clone());
        subset
    }

    pub fn create(&self, analysis: &Analysis, name: Option<String>, selection: Selection) -> Result<Subset, SubsetError> {
        let members = selection.evaluate(analysis)?;
        Ok(self.insert(name, members, Provenance::Selection { selection }))
    }

    pub fn combine(&self, a: &str, b: &str, op: SetOp, name: Option<String>) -> Result<Subset, SubsetError> {
        let (a, b) = (self.get(a)?, self.get(b)?);
        if a.bundle_fingerprint != b.bundle_fingerprint {
            return Err(SubsetError::CrossBundle(a.bundle_fingerprint, b.bundle_fingerprint));
        }
        let members = op.apply(&a.members, &b.members);
        let provenance = Provenance::Combine { op, left: Box::new(a.provenance), right: Box::new(b.provenance) };
        Ok(self.insert(name, members, provenance))
    }

    pub fn remove(&self, id: &str) -> Result<Subset, SubsetError> {
        let unknown = || SubsetError::UnknownSubset(id.to_string());
        let n = numeric_id(id).ok_or_else(unknown)?;
        let mut st = self.state.write().unwrap();
        let s = st.subsets.remove(&n).ok_or_else(unknown)?;
        st.revision += 1;
        Ok(s)
    }

    pub fn snapshot(&self) -> SubsetStore {
        let st = self.state.read().unwrap();
        SubsetStore {
            version: STORE_VERSION,
            bundle_fingerprint: self.fingerprint,
            revision: st.revision,
            next_id: st.next_id,
            subsets: st.subsets.values().cloned().collect(),
        }
    }

    /// Writes the current state atomically. Saves are serialized, so the file
    /// always holds the latest snapshot any save observed and its revision
    /// never goes backwards. Returns the saved revision.
    pub fn save(&self, path: &Path) -> Result<u64, SubsetError> {
        let mut last = self.save_gate.lock().unwrap();
        let snap = self.snapshot();
        write_atomic(path, &snap.to_bytes())?;
        *last = snap.revision;
        Ok(snap.revision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    use crate::dataset::{synth_bundle, SynthSpec};
    use crate::difficulty::DifficultyConfig;

    fn analysis() -> Analysis {
        let mut spec = SynthSpec::new(5, 3, 2, 90, 30);
        spec.annotators = 3;
        spec.mislabeled = 3;
        let (b, _) = synth_bundle(&spec).unwrap();
        Analysis::run(Arc::new(b), DifficultyConfig::default(), None, None).unwrap()
    }

    fn ids(xs: &[u32]) -> Vec<InstanceId> {
        normalize(xs.iter().map(|&i| InstanceId::test(i)).collect())
    }

    #[test]
    fn brush_matches_linear_scan() {
        let a = analysis();
        let r = Range { lo: 0.0, hi: 0.2 };
        let sel = Selection::Brush { data: Some(r), model: Some(r), human: Some(r) };
        let got = sel.evaluate(&a).unwrap();
        let mut want = Vec::new();
        for p in a.profiles() {
            if p.data_kdn <= 0.2 && p.model_difficulty <= 0.2 && p.human_difficulty.is_some_and(|h| h <= 0.2) {
                want.push(p.instance);
            }
        }
        assert_eq!(got, want);
        let empty = Selection::Brush { data: Some(Range { lo: 2.0, hi: 3.0 }), model: None, human: None };
        assert!(empty.evaluate(&a).unwrap().is_empty());
    }

    #[test]
    fn diagonal_confusion_cells_are_the_correct_set() {
        let a = analysis();
        let sel = Selection::ConfusionCells { cells: (0..3).map(|c| [c, c]).collect() };
        let want: Vec<_> = a.profiles().iter().filter(|p| p.correct).map(|p| p.instance).collect();
        assert_eq!(sel.evaluate(&a).unwrap(), want);
        assert!(Selection::ConfusionCells { cells: vec![[3, 0]] }.evaluate(&a).is_err());
    }

    #[test]
    fn heatmap_and_pattern_selections() {
        let a = analysis();
        let all = Selection::All.evaluate(&a).unwrap();
        let cells = (0..10).flat_map(|x| (0..3).map(move |y| [x, y])).collect();
        let sel = Selection::HeatmapCells { pair: "data-model".into(), bins: 10, cells };
        assert_eq!(sel.evaluate(&a).unwrap(), all);
        let bad = Selection::HeatmapCells { pair: "data-model".into(), bins: 10, cells: vec![[0, 3]] };
        assert!(matches!(bad.evaluate(&a), Err(SubsetError::InvalidSelection { field, .. }) if field == "cells"));
        let bad = Selection::HeatmapCells { pair: "data-time".into(), bins: 10, cells: vec![] };
        assert!(bad.evaluate(&a).is_err());
        let every = Selection::Patterns { codes: Pattern::ALL.to_vec() };
        assert_eq!(every.evaluate(&a).unwrap(), all);
    }

    #[test]
    fn projection_and_flow_selections() {
        let a = analysis();
        let all = Selection::All.evaluate(&a).unwrap();
        let big = Range { lo: -1e9, hi: 1e9 };
        let rect = Selection::ProjectionRect { source: ProjectionSource::DifficultyPattern, x: big, y: big };
        assert_eq!(rect.evaluate(&a).unwrap(), all);
        let square = vec![[-1e9, -1e9], [1e9, -1e9], [1e9, 1e9], [-1e9, 1e9]];
        let lasso = Selection::ProjectionLasso { source: ProjectionSource::LayerEmbedding(1), polygon: square };
        assert_eq!(lasso.evaluate(&a).unwrap(), all);
        let top = Selection::FlowElement { element: "c2:top".into(), scope: None };
        let want: Vec<_> = a.profiles().iter().filter(|p| p.correct && !p.never_aligned).map(|p| p.instance).collect();
        assert_eq!(top.evaluate(&a).unwrap(), want);
        assert!(Selection::FlowElement { element: "c9:top".into(), scope: None }.evaluate(&a).is_err());
    }

    #[test]
    fn polygon_test() {
        let tri = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        assert!(point_in_polygon(1.0, 1.0, &tri));
        assert!(!point_in_polygon(3.0, 3.0, &tri));
    }

    #[test]
    fn manager_roundtrip_and_replay() {
        let a = analysis();
        let m = SubsetManager::new(a.bundle().fingerprint());
        let s1 = m.create(&a, Some("easy".into()), Selection::Patterns { codes: vec![Pattern::P1a] }).unwrap();
        let s2 = m.create(&a, None, Selection::ConfusionCells { cells: vec![[0, 0], [1, 1]] }).unwrap();
        let s3 = m.combine(&s1.id, &s2.id, SetOp::Intersection, None).unwrap();
        assert_eq!(m.revision(), 3);
        assert!(s3.replays(&a));
        assert_eq!(m.get("s3").unwrap(), s3);
        assert!(m.get("s9").is_err());
        assert!(m.get("x").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(STORE_FILE);
        m.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_store(&path, a.bundle().fingerprint()).unwrap();
        assert!(loaded.stale.is_empty());
        let m2 = SubsetManager::from_store(loaded.store, a.bundle().fingerprint()).unwrap();
        assert_eq!(m2.list(), m.list());
        m2.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(m2.insert(None, vec![], Provenance::Selection { selection: Selection::All }).id, "s4");

        let stale = load_store(&path, 1234).unwrap();
        assert_eq!(stale.stale.len(), 3);
    }

    #[test]
    fn store_version_is_checked() {
        let mut store = SubsetManager::new(1).snapshot();
        store.version = 9;
        assert!(matches!(SubsetStore::from_bytes(&store.to_bytes()), Err(SubsetError::Version { found: 9, .. })));
        assert!(matches!(SubsetStore::from_bytes(b"{}"), Err(SubsetError::Malformed(_))));
    }

    #[test]
    fn concurrent_saves_keep_the_latest_revision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(STORE_FILE);
        let m = Arc::new(SubsetManager::new(7));
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let (m, path) = (m.clone(), path.clone());
                std::thread::spawn(move || {
                    let mut saved = Vec::new();
                    for i in 0..10u32 {
                        m.insert(None, ids(&[t * 100 + i]), Provenance::Selection { selection: Selection::All });
                        saved.push(m.save(&path).unwrap());
                    }
                    saved
                })
            })
            .collect();
        for h in handles {
            let saved = h.join().unwrap();
            assert!(saved.windows(2).all(|w| w[0] < w[1]));
        }
        m.save(&path).unwrap();
        let on_disk = load_store(&path, 7).unwrap().store;
        assert_eq!(on_disk.revision, 40);
        assert_eq!(on_disk.subsets.len(), 40);
    }

    #[test]
    fn csv_export_and_parse() {
        let m = SubsetManager::new(0);
        let s = m.insert(Some("x".into()), ids(&[3, 1, 3]), Provenance::Selection { selection: Selection::All });
        assert_eq!(s.to_csv(), "instance_id\ntest/1\ntest/3\n");
        assert_eq!(parse_id_list(&s.to_csv()).unwrap(), s.members);
        assert!(parse_id_list("instance_id\nbogus\n").is_err());
    }

    fn universe() -> Vec<InstanceId> {
        ids(&(0..40).collect::<Vec<_>>())
    }

    fn arb_subset() -> impl Strategy<Value = Vec<InstanceId>> {
        proptest::collection::vec(0u32..40, 0..40).prop_map(|v| ids(&v))
    }

    proptest! {
        #[test]
        fn set_algebra_laws(a in arb_subset(), b in arb_subset(), c in arb_subset()) {
            let u = universe();
            let not = |x: &[InstanceId]| difference(&u, x);
            prop_assert_eq!(union(&a, &a), a.clone());
            prop_assert_eq!(intersection(&a, &a), a.clone());
            prop_assert!(intersection(&a, &[]).is_empty());
            prop_assert_eq!(union(&a, &b), union(&b, &a));
            prop_assert_eq!(intersection(&a, &b), intersection(&b, &a));
            prop_assert_eq!(union(&union(&a, &b), &c), union(&a, &union(&b, &c)));
            prop_assert_eq!(intersection(&intersection(&a, &b), &c), intersection(&a, &intersection(&b, &c)));
            prop_assert_eq!(not(&union(&a, &b)), intersection(&not(&a), &not(&b)));
            prop_assert_eq!(not(&intersection(&a, &b)), union(&not(&a), &not(&b)));
            let d = difference(&union(&a, &b), &b);
            prop_assert!(d.iter().all(|x| a.contains(x)));
        }
    }
}
