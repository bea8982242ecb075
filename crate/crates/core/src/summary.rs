//! Aggregates over a subset of profiled instances: heatmaps, marginals,
//! confusion matrix, pattern tallies, instance rows and neighbor evidence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::difficulty::{Analysis, DifficultyProfile, Pattern};
use crate::ids::{InstanceId, Split};

pub const DEFAULT_BINS: usize = 10;
pub const NEIGHBOR_HIST_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SummaryError {
    #[error("unknown perspective pair `{0}`")]
    UnknownPair(String),
    #[error("instance {0} has no profile")]
    UnknownInstance(InstanceId),
    #[error("unknown space `{0}`")]
    UnknownSpace(String),
    #[error("unknown sort key `{0}`")]
    UnknownSortKey(String),
    #[error("k = {k} exceeds the {computed} neighbors computed")]
    KTooLarge { k: usize, computed: usize },
    #[error("bins must be at least 1")]
    ZeroBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Data,
    Model,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerspectivePair(pub Perspective, pub Perspective);

impl PerspectivePair {
    pub const ALL: [PerspectivePair; 3] = [
        PerspectivePair(Perspective::Data, Perspective::Model),
        PerspectivePair(Perspective::Data, Perspective::Human),
        PerspectivePair(Perspective::Model, Perspective::Human),
    ];

    fn involves_human(self) -> bool {
        self.0 == Perspective::Human || self.1 == Perspective::Human
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perspective::Data => "data",
            Perspective::Model => "model",
            Perspective::Human => "human",
        })
    }
}

impl fmt::Display for PerspectivePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

impl FromStr for PerspectivePair {
    type Err = SummaryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PerspectivePair::ALL.into_iter().find(|p| p.to_string() == s).ok_or_else(|| SummaryError::UnknownPair(s.to_string()))
    }
}

impl Serialize for PerspectivePair {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Fixed-width bin of a value in `[0, 1]`; the upper edge falls into the last bin.
pub fn bin_of(value: f64, bins: usize) -> usize {
    // the epsilon keeps exact multiples of 1/k (e.g. 0.3 * 10) in the bin they name
    (((value * bins as f64) + 1e-9).floor().max(0.0) as usize).min(bins - 1)
}

struct Axis {
    perspective: Perspective,
    bins: usize,
}

impl Axis {
    fn new(perspective: Perspective, bins: usize, num_layers: usize) -> Self {
        let bins = if perspective == Perspective::Model { num_layers + 1 } else { bins };
        Axis { perspective, bins }
    }

    fn bin(&self, p: &DifficultyProfile) -> Option<usize> {
        match self.perspective {
            Perspective::Data => Some(bin_of(p.data_kdn, self.bins)),
            Perspective::Model => Some(p.prediction_depth.min(self.bins - 1)),
            Perspective::Human => p.human_difficulty.map(|h| bin_of(h, self.bins)),
        }
    }
}

/// `(x_bins, y_bins)` of a pair's heatmap.
pub fn heatmap_dims(pair: PerspectivePair, bins: usize, num_layers: usize) -> (usize, usize) {
    (Axis::new(pair.0, bins, num_layers).bins, Axis::new(pair.1, bins, num_layers).bins)
}

/// Heatmap cell of one profile; `None` when the pair involves absent human difficulty.
pub fn heatmap_cell(p: &DifficultyProfile, pair: PerspectivePair, bins: usize, num_layers: usize) -> Option<(usize, usize)> {
    Some((Axis::new(pair.0, bins, num_layers).bin(p)?, Axis::new(pair.1, bins, num_layers).bin(p)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Marginals {
    pub data: Vec<usize>,
    /// One bin per prediction depth `0..=L`.
    pub model: Vec<usize>,
    pub human: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub pair: PerspectivePair,
    pub x_bins: usize,
    pub y_bins: usize,
    /// `counts[x][y]`.
    pub counts: Vec<Vec<usize>>,
    pub subset_size: usize,
    /// Instances counted in the heatmap.
    pub included: usize,
    /// Instances left out because human difficulty is absent.
    pub missing_human: usize,
    pub marginals: Marginals,
}

fn profiles_of<'a>(analysis: &'a Analysis, members: &[InstanceId]) -> Result<Vec<&'a DifficultyProfile>, SummaryError> {
    members.iter().map(|&id| analysis.profile(id).ok_or(SummaryError::UnknownInstance(id))).collect()
}

pub fn heatmap(analysis: &Analysis, members: &[InstanceId], pair: PerspectivePair, bins: usize) -> Result<Heatmap, SummaryError> {
    if bins == 0 {
        return Err(SummaryError::ZeroBins);
    }
    let profiles = profiles_of(analysis, members)?;
    let l = analysis.bundle().num_layers();
    let (x, y) = (Axis::new(pair.0, bins, l), Axis::new(pair.1, bins, l));
    let mut counts = vec![vec![0usize; y.bins]; x.bins];
    let mut included = 0;
    for p in &profiles {
        if let (Some(i), Some(j)) = (x.bin(p), y.bin(p)) {
            counts[i][j] += 1;
            included += 1;
        }
    }
    let mut marginals = Marginals { data: vec![0; bins], model: vec![0; l + 1], human: vec![0; bins] };
    for p in &profiles {
        marginals.data[bin_of(p.data_kdn, bins)] += 1;
        marginals.model[p.prediction_depth.min(l)] += 1;
        if let Some(h) = p.human_difficulty {
            marginals.human[bin_of(h, bins)] += 1;
        }
    }
    let missing_human = profiles.iter().filter(|p| p.human_difficulty.is_none()).count();
    Ok(Heatmap {
        pair,
        x_bins: x.bins,
        y_bins: y.bins,
        counts,
        subset_size: profiles.len(),
        included,
        missing_human: if pair.involves_human() { missing_human } else { 0 },
        marginals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetStats {
    pub size: usize,
    pub correct: usize,
    /// `None` for an empty subset.
    pub accuracy: Option<f64>,
    pub mean_data_kdn: Option<f64>,
    pub mean_model_difficulty: Option<f64>,
    /// Mean over instances with annotations only.
    pub mean_human_difficulty: Option<f64>,
    pub with_human: usize,
    pub never_aligned: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn stats(analysis: &Analysis, members: &[InstanceId]) -> Result<SubsetStats, SummaryError> {
    let profiles = profiles_of(analysis, members)?;
    let correct = profiles.iter().filter(|p| p.correct).count();
    Ok(SubsetStats {
        size: profiles.len(),
        correct,
        accuracy: (!profiles.is_empty()).then(|| correct as f64 / profiles.len() as f64),
        mean_data_kdn: mean(profiles.iter().map(|p| p.data_kdn)),
        mean_model_difficulty: mean(profiles.iter().map(|p| p.model_difficulty)),
        mean_human_difficulty: mean(profiles.iter().filter_map(|p| p.human_difficulty)),
        with_human: profiles.iter().filter(|p| p.human_difficulty.is_some()).count(),
        never_aligned: profiles.iter().filter(|p| p.never_aligned).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Confusion {
    pub class_names: Vec<String>,
    /// `counts[actual][predicted]`.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    pub correct: usize,
}

pub fn confusion(analysis: &Analysis, members: &[InstanceId]) -> Result<Confusion, SummaryError> {
    let profiles = profiles_of(analysis, members)?;
    let c = analysis.bundle().num_classes();
    let mut counts = vec![vec![0usize; c]; c];
    for p in &profiles {
        counts[p.label as usize][p.prediction as usize] += 1;
    }
    Ok(Confusion {
        class_names: analysis.bundle().manifest().class_names.clone(),
        correct: (0..c).map(|i| counts[i][i]).sum(),
        counts,
        total: profiles.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternCount {
    pub code: Pattern,
    pub count: usize,
}

/// Counts for every taxonomy code, in table order, including zero rows.
pub fn pattern_tally(analysis: &Analysis, members: &[InstanceId]) -> Result<Vec<PatternCount>, SummaryError> {
    let profiles = profiles_of(analysis, members)?;
    Ok(Pattern::ALL.iter().map(|&code| PatternCount { code, count: profiles.iter().filter(|p| p.pattern == code).count() }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortKey {
    Id,
    DataKdn,
    Model,
    Human,
    /// kDN at one space: the score shown at the center of the neighbor donut.
    LayerKdn(usize),
}

impl SortKey {
    /// `id`, `data`, `model`, `human`, or `kdn:<space name or index>`.
    pub fn parse(s: &str, analysis: &Analysis) -> Result<Self, SummaryError> {
        match s {
            "id" => Ok(SortKey::Id),
            "data" | "data_kdn" => Ok(SortKey::DataKdn),
            "model" | "pd" => Ok(SortKey::Model),
            "human" => Ok(SortKey::Human),
            _ => s
                .strip_prefix("kdn:")
                .and_then(|name| analysis.bundle().space_by_name(name))
                .map(SortKey::LayerKdn)
                .ok_or_else(|| SummaryError::UnknownSortKey(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRow {
    #[serde(flatten)]
    pub profile: DifficultyProfile,
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstancePage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub rows: Vec<InstanceRow>,
}

/// Stable sort by `key` (ties by instance id; absent human difficulty sorts last), then one page.
pub fn instance_page(
    analysis: &Analysis,
    members: &[InstanceId],
    key: SortKey,
    descending: bool,
    page: usize,
    page_size: usize,
) -> Result<InstancePage, SummaryError> {
    let mut profiles = profiles_of(analysis, members)?;
    profiles.sort_by_key(|p| p.instance);
    profiles.dedup_by_key(|p| p.instance);
    let value = |p: &DifficultyProfile| -> Option<f64> {
        match key {
            SortKey::Id => None,
            SortKey::DataKdn => Some(p.data_kdn),
            SortKey::Model => Some(p.model_difficulty),
            SortKey::Human => p.human_difficulty,
            SortKey::LayerKdn(s) => p.layer_kdn.get(s).copied(),
        }
    };
    if key != SortKey::Id {
        profiles.sort_by(|a, b| match (value(a), value(b)) {
            (Some(x), Some(y)) => {
                let o = x.total_cmp(&y);
                if descending {
                    o.reverse()
                } else {
                    o
                }
            }
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
    } else if descending {
        profiles.reverse();
    }
    let page_size = page_size.max(1);
    let rows = profiles
        .iter()
        .skip(page * page_size)
        .take(page_size)
        .map(|p| InstanceRow { profile: (*p).clone(), image: analysis.bundle().image(p.instance).map(str::to_string) })
        .collect();
    Ok(InstancePage { total: profiles.len(), page, page_size, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborEntry {
    pub id: InstanceId,
    pub label: u32,
    pub distance: f64,
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceHistogram {
    /// Upper edge of the last bin; the bins split `[0, max_distance]` evenly.
    pub max_distance: f64,
    /// `counts[bin][class]`.
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborEvidence {
    pub instance: InstanceId,
    pub space: usize,
    pub space_name: String,
    pub k: usize,
    /// Neighbor count per class, for the donut.
    pub class_counts: Vec<usize>,
    /// kDN at this space, shown at the donut's center.
    pub score: f64,
    pub neighbors: Vec<NeighborEntry>,
    pub histogram: DistanceHistogram,
}

/// Neighbor evidence of one instance at one space. The histogram range is the
/// largest neighbor distance at that space over `context` (the active subset).
pub fn neighbor_evidence(
    analysis: &Analysis,
    id: InstanceId,
    space: usize,
    k: Option<usize>,
    context: &[InstanceId],
) -> Result<NeighborEvidence, SummaryError> {
    let bundle = analysis.bundle();
    if space >= bundle.num_spaces() {
        return Err(SummaryError::UnknownSpace(space.to_string()));
    }
    let sets = analysis.neighbors(id).ok_or(SummaryError::UnknownInstance(id))?;
    let computed = sets[space].k();
    let k = k.unwrap_or(computed);
    if k > computed || k == 0 {
        return Err(SummaryError::KTooLarge { k, computed });
    }
    let nearest = &sets[space].neighbors[..k];
    let mut max_distance = nearest.last().map_or(0.0, |n| n.distance);
    for &other in context {
        if let Some(s) = analysis.neighbors(other) {
            if let Some(n) = s[space].neighbors.get(k - 1) {
                max_distance = max_distance.max(n.distance);
            }
        }
    }
    let c = bundle.num_classes();
    let mut class_counts = vec![0usize; c];
    let mut counts = vec![vec![0usize; c]; NEIGHBOR_HIST_BINS];
    for n in nearest {
        class_counts[n.label as usize] += 1;
        let b = if max_distance > 0.0 { bin_of(n.distance / max_distance, NEIGHBOR_HIST_BINS) } else { 0 };
        counts[b][n.label as usize] += 1;
    }
    let profile = analysis.profile(id).expect("neighbors imply a profile");
    let reference = match analysis.config().layer_reference {
        crate::difficulty::Reference::GroundTruth => profile.label,
        crate::difficulty::Reference::FinalPrediction => profile.prediction,
    };
    let score = nearest.iter().filter(|n| n.label != reference).count() as f64 / k as f64;
    Ok(NeighborEvidence {
        instance: id,
        space,
        space_name: bundle.space_name(space).to_string(),
        k,
        class_counts,
        score,
        neighbors: nearest
            .iter()
            .map(|n| {
                let nid = InstanceId { split: Split::Train, index: n.row as u32 };
                NeighborEntry { id: nid, label: n.label, distance: n.distance, image: bundle.image(nid).map(str::to_string) }
            })
            .collect(),
        histogram: DistanceHistogram { max_distance, counts },
    })
}
