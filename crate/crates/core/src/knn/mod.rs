//! Euclidean k-nearest-neighbor probes over one embedding space's training rows.
//!
//! Exact mode scans every row with a bounded max-heap; ties are broken by the
//! lower row index. Approximate mode searches a forest of random-projection
//! trees (see [`forest`]) and then ranks the collected candidates exactly, so
//! reported distances are always true Euclidean distances.

pub mod cache;
mod forest;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingBundle;
use crate::ids::Split;
use crate::matrix::Matrix;

pub use forest::Forest;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TREES: usize = 16;
pub const DEFAULT_LEAF_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexParams {
    pub mode: IndexMode,
    /// Number of random-projection trees (approximate mode).
    pub trees: usize,
    /// Maximum rows per leaf (approximate mode).
    pub leaf_size: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams { mode: IndexMode::Approximate, trees: DEFAULT_TREES, leaf_size: DEFAULT_LEAF_SIZE, seed: 0 }
    }
}

impl IndexParams {
    pub fn exact() -> Self {
        IndexParams { mode: IndexMode::Exact, ..Default::default() }
    }

    pub fn approximate(trees: usize, leaf_size: usize, seed: u64) -> Self {
        IndexParams { mode: IndexMode::Approximate, trees, leaf_size, seed }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KnnError {
    #[error("cannot index an empty training split")]
    EmptyTrainingSplit,
    #[error("query has {got} dimensions, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} out of range [1, {available}]")]
    KOutOfRange { k: usize, available: usize },
    #[error("indices are not comparable: {0}")]
    Mismatched(String),
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
    pub label: u32,
}

/// The k nearest training rows of one query, closest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub space: usize,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.neighbors.iter().map(|n| n.label)
    }

    pub fn max_distance(&self) -> f64 {
        self.neighbors.last().map_or(0.0, |n| n.distance)
    }
}

/// Squared Euclidean distance accumulated in `f64`.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Heap entry ordered by (distance, row): the heap top is the current worst neighbor.
#[derive(Clone, Copy)]
struct Ranked {
    dist2: f64,
    row: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.row.cmp(&other.row))
    }
}

/// Keeps the k smallest (distance, row) pairs seen.
struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, dist2: f64, row: usize) {
        let cand = Ranked { dist2, row };
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(top) = self.heap.peek() {
            if cand < *top {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    fn into_sorted(self) -> Vec<Ranked> {
        self.heap.into_sorted_vec()
    }
}

/// A k-NN probe over one space's training embeddings. Immutable once built.
#[derive(Debug, Clone)]
pub struct ProbeIndex {
    space: usize,
    data: Arc<Matrix>,
    labels: Arc<[u32]>,
    params: IndexParams,
    forest: Option<Forest>,
}

impl ProbeIndex {
    pub fn build(space: usize, data: Arc<Matrix>, labels: Arc<[u32]>, params: IndexParams) -> Result<Self, KnnError> {
        if data.rows() == 0 {
            return Err(KnnError::EmptyTrainingSplit);
        }
        assert_eq!(data.rows(), labels.len(), "one label per training row");
        let forest = match params.mode {
            IndexMode::Exact => None,
            IndexMode::Approximate => {
                if params.trees == 0 || params.leaf_size == 0 {
                    return Err(KnnError::InvalidParams("trees and leaf_size must be positive".into()));
                }
                Some(Forest::build(&data, params.trees, params.leaf_size, params.seed))
            }
        };
        Ok(ProbeIndex { space, data, labels, params, forest })
    }

    /// Reuses a previously built forest (e.g. from the on-disk cache).
    pub fn with_forest(space: usize, data: Arc<Matrix>, labels: Arc<[u32]>, params: IndexParams, forest: Forest) -> Result<Self, KnnError> {
        if data.rows() == 0 {
            return Err(KnnError::EmptyTrainingSplit);
        }
        if forest.num_trees() != params.trees || !forest.covers(data.rows()) {
            return Err(KnnError::Mismatched("cached forest does not match the training matrix".into()));
        }
        Ok(ProbeIndex { space, data, labels, params: IndexParams { mode: IndexMode::Approximate, ..params }, forest: Some(forest) })
    }

    pub fn space(&self) -> usize {
        self.space
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn mode(&self) -> IndexMode {
        self.params.mode
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn forest(&self) -> Option<&Forest> {
        self.forest.as_ref()
    }

    pub fn query(&self, vector: &[f32], k: usize) -> Result<NeighborSet, KnnError> {
        self.query_excluding(vector, k, None)
    }

    /// Like [`query`](Self::query) but never returns row `exclude` (leave-one-out for train queries).
    pub fn query_excluding(&self, vector: &[f32], k: usize, exclude: Option<usize>) -> Result<NeighborSet, KnnError> {
        if vector.len() != self.cols() {
            return Err(KnnError::DimensionMismatch { expected: self.cols(), got: vector.len() });
        }
        let available = self.rows() - usize::from(exclude.is_some_and(|r| r < self.rows()));
        if k == 0 || k > available {
            return Err(KnnError::KOutOfRange { k, available });
        }
        let ranked = match &self.forest {
            None => self.scan(vector, k, exclude),
            Some(forest) => {
                let budget = (k * self.params.trees).max(4 * k);
                let mut candidates = forest.candidates(vector, k + usize::from(exclude.is_some()), budget);
                candidates.sort_unstable();
                candidates.dedup();
                let mut top = TopK::new(k);
                for row in candidates {
                    if Some(row) != exclude {
                        top.offer(squared_distance(vector, self.data.row(row)), row);
                    }
                }
                top.into_sorted()
            }
        };
        Ok(NeighborSet {
            space: self.space,
            neighbors: ranked.into_iter().map(|r| Neighbor { row: r.row, distance: r.dist2.sqrt(), label: self.labels[r.row] }).collect(),
        })
    }

    fn scan(&self, vector: &[f32], k: usize, exclude: Option<usize>) -> Vec<Ranked> {
        let mut top = TopK::new(k);
        for (row, x) in self.data.iter_rows().enumerate() {
            if Some(row) != exclude {
                top.offer(squared_distance(vector, x), row);
            }
        }
        top.into_sorted()
    }

    pub fn predict(&self, vector: &[f32], k: usize) -> Result<u32, KnnError> {
        Ok(majority_label(&self.query(vector, k)?))
    }
}

/// Builds a probe over the bundle's training matrix for `space` as stored (no compression).
pub fn build_index(bundle: &EmbeddingBundle, space: usize, params: IndexParams) -> Result<ProbeIndex, KnnError> {
    let data = Arc::new(bundle.matrix(Split::Train, space).clone());
    let labels: Arc<[u32]> = bundle.labels(Split::Train).into();
    ProbeIndex::build(space, data, labels, params)
}

/// Plurality label of a neighbor set; ties go to the smallest class index.
pub fn majority_label(neighbors: &NeighborSet) -> u32 {
    let max_label = neighbors.labels().max().unwrap_or(0) as usize;
    let mut counts = vec![0usize; max_label + 1];
    for l in neighbors.labels() {
        counts[l as usize] += 1;
    }
    // first maximum wins
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u32
}

pub fn knn_predict(index: &ProbeIndex, vector: &[f32], k: usize) -> Result<u32, KnnError> {
    index.predict(vector, k)
}

/// Mean over query rows of |approx ∩ exact| / k, matching neighbors by row id.
pub fn recall_eval(exact: &ProbeIndex, approx: &ProbeIndex, queries: &Matrix, k: usize) -> Result<f64, KnnError> {
    if exact.space() != approx.space() || exact.rows() != approx.rows() || exact.cols() != approx.cols() {
        return Err(KnnError::Mismatched(format!(
            "space {} ({}x{}) vs space {} ({}x{})",
            exact.space(),
            exact.rows(),
            exact.cols(),
            approx.space(),
            approx.rows(),
            approx.cols()
        )));
    }
    if queries.rows() == 0 {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for q in queries.iter_rows() {
        let mut truth: Vec<usize> = exact.query(q, k)?.neighbors.iter().map(|n| n.row).collect();
        truth.sort_unstable();
        let hits = approx.query(q, k)?.neighbors.iter().filter(|n| truth.binary_search(&n.row).is_ok()).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / queries.rows() as f64)
}
