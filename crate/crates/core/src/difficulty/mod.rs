//! Per-instance difficulty from three perspectives, plus the taxonomy that
//! combines them with model correctness.
//!
//! * data: k-disagreeing-neighbors (kDN) in the raw input space, against the
//!   instance's ground-truth label.
//! * model: prediction depth (PD), the first probe from which every k-NN probe
//!   agrees with the DNN's final prediction, scaled to `[0, 1]` by `L`.
//! * human: fraction of annotator labels that differ from the ground truth.

mod pipeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::ids::{InstanceId, Split};
use crate::knn::{IndexParams, KnnError, NeighborSet, DEFAULT_K};
use crate::projection::PcaError;

pub use pipeline::{build_probes, compute_profiles, Analysis, LayerProbe, ProbeOptions, ProfileTable, COMPRESS_DIMS};

/// Label an instance's neighbors are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    GroundTruth,
    FinalPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    /// `high` means strictly above the threshold.
    Fixed { data: f64, model: f64, human: f64 },
    /// Per-perspective threshold at the `q` quantile of the profiled values.
    Quantile { q: f64 },
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_QUANTILE: f64 = 0.7;

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed { data: DEFAULT_THRESHOLD, model: DEFAULT_THRESHOLD, human: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    pub k: usize,
    /// Reference label for the input-space (data) kDN.
    pub data_reference: Reference,
    /// Reference label for the per-probe kDN vector.
    pub layer_reference: Reference,
    pub thresholds: ThresholdMode,
    pub profile_splits: Vec<Split>,
    pub index: IndexParams,
    /// Z-score each embedding column (train statistics) before indexing.
    pub standardize: bool,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            k: DEFAULT_K,
            data_reference: Reference::GroundTruth,
            layer_reference: Reference::FinalPrediction,
            thresholds: ThresholdMode::default(),
            profile_splits: vec![Split::Test],
            index: IndexParams::default(),
            standardize: false,
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<(), DifficultyError> {
        let bad = |field: &str, msg: String| Err(DifficultyError::InvalidConfig { field: field.into(), message: msg });
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        match self.thresholds {
            ThresholdMode::Fixed { data, model, human } => {
                for (name, v) in [("data", data), ("model", model), ("human", human)] {
                    if !(v > 0.0 && v < 1.0) {
                        return bad(&format!("thresholds.{name}"), format!("{v} not in (0, 1)"));
                    }
                }
            }
            ThresholdMode::Quantile { q } => {
                if !(q > 0.0 && q < 1.0) {
                    return bad("thresholds.q", format!("{q} not in (0, 1)"));
                }
            }
        }
        if self.profile_splits.is_empty() {
            return bad("profile_splits", "must name at least one split".into());
        }
        if self.index.trees == 0 || self.index.leaf_size == 0 {
            return bad("index", "trees and leaf_size must be positive".into());
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form, used to cache computations.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DifficultyError {
    #[error("empty probe trace")]
    EmptyTrace,
    #[error("no final prediction for profiled instance {0}")]
    MissingPrediction(InstanceId),
    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Pca(#[from] PcaError),
}

/// Fraction of neighbors whose label differs from `reference`, a multiple of `1/k`.
pub fn kdn_score(neighbors: &NeighborSet, reference: u32) -> f64 {
    let k = neighbors.k();
    if k == 0 {
        return 0.0;
    }
    let disagree = neighbors.labels().filter(|&l| l != reference).count();
    disagree as f64 / k as f64
}

/// Probe predictions for one instance: index 0 is the input probe, then one per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub instance: InstanceId,
    pub probes: Vec<u32>,
    pub final_prediction: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Depth {
    pub depth: usize,
    /// The deepest probe disagrees with the final prediction; `depth` is then `L`.
    pub never_aligned: bool,
}

/// Smallest `d` such that probes `d..=L` all equal the final prediction.
pub fn prediction_depth(trace: &ProbeTrace) -> Result<Depth, DifficultyError> {
    let last = trace.probes.len().checked_sub(1).ok_or(DifficultyError::EmptyTrace)?;
    // forward pass: the depth is one past the last disagreeing probe
    let mut last_mismatch = None;
    for (i, &p) in trace.probes.iter().enumerate() {
        if p != trace.final_prediction {
            last_mismatch = Some(i);
        }
    }
    Ok(match last_mismatch {
        None => Depth { depth: 0, never_aligned: false },
        Some(i) if i == last => Depth { depth: last, never_aligned: true },
        Some(i) => Depth { depth: i + 1, never_aligned: false },
    })
}

/// Share of annotations that disagree with the ground truth; absent without annotations.
pub fn human_difficulty(annotations: Option<&[Annotation]>, ground_truth: u32) -> Option<f64> {
    let ann = annotations.filter(|a| !a.is_empty())?;
    let disagree = ann.iter().filter(|a| a.label != ground_truth).count();
    Some(disagree as f64 / ann.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    /// `High` iff the value lies strictly above the threshold.
    pub fn of(value: f64, threshold: f64) -> Level {
        if value > threshold {
            Level::High
        } else {
            Level::Low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Levels {
    pub human: Option<Level>,
    pub data: Level,
    pub model: Level,
}

/// Taxonomy codes combining human, data and model difficulty with correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    P1a,
    P1b,
    P2a,
    P2b,
    P3a,
    P3b,
    P4a,
    P4b,
    P5a,
    P5b,
    P6,
    Unclassified,
}

impl Pattern {
    pub const ALL: [Pattern; 12] = [
        Pattern::P1a,
        Pattern::P1b,
        Pattern::P2a,
        Pattern::P2b,
        Pattern::P3a,
        Pattern::P3b,
        Pattern::P4a,
        Pattern::P4b,
        Pattern::P5a,
        Pattern::P5b,
        Pattern::P6,
        Pattern::Unclassified,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Pattern::P1a => "1a",
            Pattern::P1b => "1b",
            Pattern::P2a => "2a",
            Pattern::P2b => "2b",
            Pattern::P3a => "3a",
            Pattern::P3b => "3b",
            Pattern::P4a => "4a",
            Pattern::P4b => "4b",
            Pattern::P5a => "5a",
            Pattern::P5b => "5b",
            Pattern::P6 => "6",
            Pattern::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL.into_iter().find(|p| p.code() == s).ok_or_else(|| format!("unknown pattern `{s}`"))
    }
}

impl Serialize for Pattern {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Table lookup. Model difficulty is a wildcard once human difficulty is high;
/// row 6 additionally ignores correctness.
pub fn assign_pattern(levels: Levels, correct: bool) -> Pattern {
    use Level::{High, Low};
    let Some(human) = levels.human else {
        return Pattern::Unclassified;
    };
    match (human, levels.data, levels.model, correct) {
        (Low, Low, Low, true) => Pattern::P1a,
        (Low, Low, Low, false) => Pattern::P1b,
        (Low, High, Low, true) => Pattern::P2a,
        (Low, High, Low, false) => Pattern::P2b,
        (Low, Low, High, true) => Pattern::P3a,
        (Low, Low, High, false) => Pattern::P3b,
        (Low, High, High, true) => Pattern::P4a,
        (Low, High, High, false) => Pattern::P4b,
        (High, High, _, true) => Pattern::P5a,
        (High, High, _, false) => Pattern::P5b,
        (High, Low, _, _) => Pattern::P6,
    }
}

/// Thresholds after resolving quantiles against the profiled population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedThresholds {
    pub data: f64,
    pub model: f64,
    /// `None` when no profiled instance has human difficulty.
    pub human: Option<f64>,
}

impl ResolvedThresholds {
    pub fn levels(&self, data: f64, model: f64, human: Option<f64>) -> Levels {
        Levels {
            human: human.zip(self.human).map(|(v, t)| Level::of(v, t)),
            data: Level::of(data, self.data),
            model: Level::of(model, self.model),
        }
    }
}

/// Linear-interpolation quantile of unsorted values; `None` for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn resolve_thresholds(mode: ThresholdMode, data: &[f64], model: &[f64], human: &[f64]) -> ResolvedThresholds {
    match mode {
        ThresholdMode::Fixed { data: d, model: m, human: h } => {
            ResolvedThresholds { data: d, model: m, human: (!human.is_empty()).then_some(h) }
        }
        ThresholdMode::Quantile { q } => ResolvedThresholds {
            data: quantile(data, q).unwrap_or(DEFAULT_THRESHOLD),
            model: quantile(model, q).unwrap_or(DEFAULT_THRESHOLD),
            human: quantile(human, q),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    pub instance: InstanceId,
    pub label: u32,
    pub prediction: u32,
    pub data_kdn: f64,
    /// One entry per probe (input first), each a multiple of `1/k`.
    pub layer_kdn: Vec<f64>,
    pub prediction_depth: usize,
    pub model_difficulty: f64,
    pub human_difficulty: Option<f64>,
    pub correct: bool,
    pub pattern: Pattern,
    pub never_aligned: bool,
}

/// CSV with header `instance_id,data_kdn,kdn_L0..kdn_L<L>,pd,model_difficulty,human_difficulty,correct,pattern,never_aligned`.
/// Absent human difficulty is an empty field.
pub fn profiles_to_csv(profiles: &[DifficultyProfile], num_probes: usize) -> String {
    let mut out = String::from("instance_id,data_kdn");
    for i in 0..num_probes {
        out.push_str(&format!(",kdn_L{i}"));
    }
    out.push_str(",pd,model_difficulty,human_difficulty,correct,pattern,never_aligned\n");
    for p in profiles {
        out.push_str(&format!("{},{}", p.instance, p.data_kdn));
        for v in &p.layer_kdn {
            out.push_str(&format!(",{v}"));
        }
        let human = p.human_difficulty.map(|h| h.to_string()).unwrap_or_default();
        out.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            p.prediction_depth, p.model_difficulty, human, p.correct, p.pattern, p.never_aligned
        ));
    }
    out
}
