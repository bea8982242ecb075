use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use super::{
    assign_pattern, human_difficulty, kdn_score, prediction_depth, resolve_thresholds, DifficultyConfig, DifficultyError,
    DifficultyProfile, ProbeTrace, Reference, ResolvedThresholds,
};
use crate::dataset::EmbeddingBundle;
use crate::ids::{InstanceId, Split};
use crate::knn::{cache, majority_label, IndexMode, IndexParams, NeighborSet, ProbeIndex};
use crate::matrix::Matrix;
use crate::projection::{pca_fit, PcaModel};

/// Spaces wider than this are PCA-compressed to this many dimensions before indexing.
pub const COMPRESS_DIMS: usize = 128;

#[derive(Debug, Clone, Default)]
pub struct ProbeOptions {
    pub standardize: bool,
    /// Forest cache directory; only used in approximate mode.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(m: &Matrix) -> Self {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        let mut sq = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut inv_std = Vec::with_capacity(m.cols());
        for j in 0..m.cols() {
            mean[j] /= n;
            let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
            // constant columns stay centred at zero
            inv_std.push(if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 });
        }
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        x.iter().zip(self.mean.iter().zip(&self.inv_std)).map(|(&v, (m, s))| ((v as f64 - m) * s) as f32).collect()
    }

    fn apply_matrix(&self, m: &Matrix) -> Matrix {
        let mut data = Vec::with_capacity(m.rows() * m.cols());
        for row in m.iter_rows() {
            data.extend(self.apply(row));
        }
        Matrix::new(m.rows(), m.cols(), data)
    }
}

/// A k-NN probe for one space, including the transform applied to its embeddings.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    space: usize,
    scale: Option<Standardizer>,
    pca: Option<PcaModel>,
    index: ProbeIndex,
}

impl LayerProbe {
    pub fn build(bundle: &EmbeddingBundle, space: usize, params: IndexParams, opts: &ProbeOptions) -> Result<Self, DifficultyError> {
        let raw = bundle.matrix(Split::Train, space);
        let scale = opts.standardize.then(|| Standardizer::fit(raw));
        let mut data = match &scale {
            Some(s) => s.apply_matrix(raw),
            None => raw.clone(),
        };
        let mut pca = None;
        if data.cols() > COMPRESS_DIMS {
            let p = COMPRESS_DIMS.min(data.rows());
            let model = pca_fit(&data, p)?;
            data = model.transform(&data)?;
            pca = Some(model);
        }
        let data = Arc::new(data);
        let labels: Arc<[u32]> = bundle.labels(Split::Train).into();

        let key = cache::CacheKey {
            fingerprint: bundle.fingerprint(),
            space: space as u32,
            rows: data.rows() as u64,
            cols: data.cols() as u64,
            trees: params.trees as u64,
            leaf_size: params.leaf_size as u64,
            seed: params.seed,
            transform: (u64::from(opts.standardize) << 32) | pca.as_ref().map_or(0, |m| m.num_components() as u64),
        };
        let cache_dir = opts.cache_dir.as_deref().filter(|_| params.mode == IndexMode::Approximate && bundle.fingerprint() != 0);

        let cached = cache_dir.and_then(|dir| cache::load(dir, &key));
        let index = match cached {
            Some(forest) => {
                log::debug!("space {space}: using cached forest");
                ProbeIndex::with_forest(space, data, labels, params, forest)?
            }
            None => {
                let index = ProbeIndex::build(space, data, labels, params)?;
                if let (Some(dir), Some(forest)) = (cache_dir, index.forest()) {
                    if let Err(e) = cache::store(dir, &key, forest) {
                        log::warn!("could not write forest cache in {}: {e}", dir.display());
                    }
                }
                index
            }
        };
        Ok(LayerProbe { space, scale, pca, index })
    }

    pub fn space(&self) -> usize {
        self.space
    }

    pub fn index(&self) -> &ProbeIndex {
        &self.index
    }

    /// Dimension of the indexed vectors after any compression.
    pub fn indexed_dims(&self) -> usize {
        self.index.cols()
    }

    pub fn is_compressed(&self) -> bool {
        self.pca.is_some()
    }

    pub fn transform(&self, x: &[f32]) -> Result<Vec<f32>, DifficultyError> {
        let mut v = match &self.scale {
            Some(s) => s.apply(x),
            None => x.to_vec(),
        };
        if let Some(m) = &self.pca {
            v = m.transform_row(&v)?.into_iter().map(|z| z as f32).collect();
        }
        Ok(v)
    }

    /// Neighbors of a bundle instance; a train instance never counts itself.
    pub fn neighbors(&self, bundle: &EmbeddingBundle, id: InstanceId, k: usize) -> Result<NeighborSet, DifficultyError> {
        let v = self.transform(bundle.embedding(id, self.space))?;
        let exclude = (id.split == Split::Train).then_some(id.row());
        Ok(self.index.query_excluding(&v, k, exclude)?)
    }
}

/// One probe per space, input space first.
pub fn build_probes(bundle: &EmbeddingBundle, params: IndexParams, opts: &ProbeOptions) -> Result<Vec<LayerProbe>, DifficultyError> {
    (0..bundle.num_spaces()).into_par_iter().map(|s| LayerProbe::build(bundle, s, params, opts)).collect()
}

/// Profiles plus the evidence they were computed from, in profiling order.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    pub profiles: Vec<DifficultyProfile>,
    /// Per profile, one neighbor set per space.
    pub neighbors: Vec<Vec<NeighborSet>>,
    /// Per profile, the k-NN prediction of every probe.
    pub probe_predictions: Vec<Vec<u32>>,
    pub thresholds: ResolvedThresholds,
}

struct Raw {
    profile: DifficultyProfile,
    neighbors: Vec<NeighborSet>,
    trace: Vec<u32>,
}

fn profile_one(bundle: &EmbeddingBundle, probes: &[LayerProbe], config: &DifficultyConfig, id: InstanceId) -> Result<Raw, DifficultyError> {
    let label = bundle.label(id);
    let prediction = bundle.prediction(id).ok_or(DifficultyError::MissingPrediction(id))?;
    let reference = |r: Reference| match r {
        Reference::GroundTruth => label,
        Reference::FinalPrediction => prediction,
    };
    let neighbors = probes.iter().map(|p| p.neighbors(bundle, id, config.k)).collect::<Result<Vec<_>, _>>()?;
    let trace: Vec<u32> = neighbors.iter().map(majority_label).collect();
    let layer_ref = reference(config.layer_reference);
    let layer_kdn: Vec<f64> = neighbors.iter().map(|n| kdn_score(n, layer_ref)).collect();
    let data_kdn = kdn_score(&neighbors[0], reference(config.data_reference));
    let depth = prediction_depth(&ProbeTrace { instance: id, probes: trace.clone(), final_prediction: prediction })?;
    let l = bundle.num_layers();
    let model_difficulty = if l == 0 { 0.0 } else { depth.depth as f64 / l as f64 };
    let profile = DifficultyProfile {
        instance: id,
        label,
        prediction,
        data_kdn,
        layer_kdn,
        prediction_depth: depth.depth,
        model_difficulty,
        human_difficulty: human_difficulty(bundle.annotations(id), label),
        correct: prediction == label,
        pattern: super::Pattern::Unclassified,
        never_aligned: depth.never_aligned,
    };
    Ok(Raw { profile, neighbors, trace })
}

/// Profiles every instance of the configured splits. `progress` is bumped once per instance.
pub fn compute_profiles(
    bundle: &EmbeddingBundle,
    probes: &[LayerProbe],
    config: &DifficultyConfig,
    progress: Option<&AtomicUsize>,
) -> Result<ProfileTable, DifficultyError> {
    config.validate()?;
    let mut ids: Vec<InstanceId> = Vec::new();
    for &split in &config.profile_splits {
        if !ids.iter().any(|i| i.split == split) {
            ids.extend(bundle.instance_ids(split));
        }
    }
    ids.sort_unstable();
    let raws: Vec<Raw> = ids
        .par_iter()
        .map(|&id| {
            let r = profile_one(bundle, probes, config, id);
            if let Some(p) = progress {
                p.fetch_add(1, Ordering::Relaxed);
            }
            r
        })
        .collect::<Result<_, _>>()?;

    let data: Vec<f64> = raws.iter().map(|r| r.profile.data_kdn).collect();
    let model: Vec<f64> = raws.iter().map(|r| r.profile.model_difficulty).collect();
    let human: Vec<f64> = raws.iter().filter_map(|r| r.profile.human_difficulty).collect();
    let thresholds = resolve_thresholds(config.thresholds, &data, &model, &human);

    let mut table = ProfileTable {
        profiles: Vec::with_capacity(raws.len()),
        neighbors: Vec::with_capacity(raws.len()),
        probe_predictions: Vec::with_capacity(raws.len()),
        thresholds,
    };
    for mut r in raws {
        let p = &mut r.profile;
        p.pattern = assign_pattern(thresholds.levels(p.data_kdn, p.model_difficulty, p.human_difficulty), p.correct);
        table.profiles.push(r.profile);
        table.neighbors.push(r.neighbors);
        table.probe_predictions.push(r.trace);
    }
    Ok(table)
}

/// A finished difficulty computation over one bundle.
#[derive(Debug, Clone)]
pub struct Analysis {
    bundle: Arc<EmbeddingBundle>,
    config: DifficultyConfig,
    table: ProfileTable,
    positions: HashMap<InstanceId, usize>,
}

impl Analysis {
    pub fn run(
        bundle: Arc<EmbeddingBundle>,
        config: DifficultyConfig,
        cache_dir: Option<&Path>,
        progress: Option<&AtomicUsize>,
    ) -> Result<Self, DifficultyError> {
        config.validate()?;
        let opts = ProbeOptions { standardize: config.standardize, cache_dir: cache_dir.map(Path::to_path_buf) };
        let probes = build_probes(&bundle, config.index, &opts)?;
        let table = compute_profiles(&bundle, &probes, &config, progress)?;
        let positions = table.profiles.iter().enumerate().map(|(i, p)| (p.instance, i)).collect();
        Ok(Analysis { bundle, config, table, positions })
    }

    /// Instances that `run` will profile, for progress reporting.
    pub fn planned_work(bundle: &EmbeddingBundle, config: &DifficultyConfig) -> usize {
        let mut splits = config.profile_splits.clone();
        splits.sort_unstable();
        splits.dedup();
        splits.iter().map(|&s| bundle.split_len(s)).sum()
    }

    pub fn bundle(&self) -> &Arc<EmbeddingBundle> {
        &self.bundle
    }

    pub fn config(&self) -> &DifficultyConfig {
        &self.config
    }

    pub fn profiles(&self) -> &[DifficultyProfile] {
        &self.table.profiles
    }

    pub fn thresholds(&self) -> ResolvedThresholds {
        self.table.thresholds
    }

    pub fn table(&self) -> &ProfileTable {
        &self.table
    }

    pub fn position(&self, id: InstanceId) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn profile(&self, id: InstanceId) -> Option<&DifficultyProfile> {
        self.position(id).map(|i| &self.table.profiles[i])
    }

    pub fn neighbors(&self, id: InstanceId) -> Option<&[NeighborSet]> {
        self.position(id).map(|i| self.table.neighbors[i].as_slice())
    }

    pub fn probe_predictions(&self, id: InstanceId) -> Option<&[u32]> {
        self.position(id).map(|i| self.table.probe_predictions[i].as_slice())
    }

    pub fn profiles_csv(&self) -> String {
        super::profiles_to_csv(&self.table.profiles, self.bundle.num_spaces())
    }
}
