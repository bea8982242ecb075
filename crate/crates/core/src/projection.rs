//! Principal component analysis and 2-D projections.
//!
//! Components come from the SVD of the mean-centred data matrix, which stays
//! well conditioned when there are far more dimensions than rows. Each
//! component is oriented so that its largest-magnitude entry is nonnegative.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingBundle, INPUT_SPACE};
use crate::difficulty::DifficultyProfile;
use crate::ids::InstanceId;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PcaError {
    #[error("cannot keep {requested} components of a {rows}x{cols} matrix")]
    ComponentsOutOfRange { requested: usize, rows: usize, cols: usize },
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("matrix has {got} columns, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown embedding space `{0}`")]
    UnknownSpace(String),
    #[error("difficulty profiles have not been computed")]
    MissingProfiles,
    #[error("SVD did not converge")]
    NoConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `p` orthonormal rows of length `d`, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Total variance of the fitted data across all directions.
    pub total_variance: f64,
    /// Set when the fitted data has zero variance; components are then arbitrary but orthonormal.
    pub degenerate: bool,
}

pub fn pca_fit(matrix: &Matrix, p: usize) -> Result<PcaModel, PcaError> {
    let (n, d) = (matrix.rows(), matrix.cols());
    if n < 2 {
        return Err(PcaError::TooFewRows(n));
    }
    if p == 0 || p > n.min(d) {
        return Err(PcaError::ComponentsOutOfRange { requested: p, rows: n, cols: d });
    }
    let mut mean = vec![0.0f64; d];
    for row in matrix.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centred = DMatrix::from_fn(n, d, |i, j| matrix.row(i)[j] as f64 - mean[j]);
    let svd = nalgebra::linalg::SVD::try_new(centred, false, true, f64::EPSILON, 0).ok_or(PcaError::NoConvergence)?;
    let v_t = svd.v_t.expect("V requested");
    let denom = (n - 1) as f64;
    let total_variance = svd.singular_values.iter().map(|s| s * s).sum::<f64>() / denom;

    let mut components = Vec::with_capacity(p);
    let mut explained_variance = Vec::with_capacity(p);
    for i in 0..p {
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        orient(&mut c);
        components.push(c);
        let s = svd.singular_values[i];
        explained_variance.push(s * s / denom);
    }
    Ok(PcaModel { mean, components, explained_variance, total_variance, degenerate: total_variance == 0.0 })
}

/// Flips `v` so that its first largest-magnitude entry is nonnegative.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl PcaModel {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Share of the total variance captured by the retained components.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            1.0
        } else {
            self.explained_variance.iter().sum::<f64>() / self.total_variance
        }
    }

    pub fn transform_row(&self, x: &[f32]) -> Result<Vec<f64>, PcaError> {
        if x.len() != self.dims() {
            return Err(PcaError::DimensionMismatch { expected: self.dims(), got: x.len() });
        }
        Ok(self.components.iter().map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(w, (&v, m))| w * (v as f64 - m)).sum()).collect())
    }

    pub fn transform(&self, matrix: &Matrix) -> Result<Matrix, PcaError> {
        if matrix.cols() != self.dims() {
            return Err(PcaError::DimensionMismatch { expected: self.dims(), got: matrix.cols() });
        }
        let mut data = Vec::with_capacity(matrix.rows() * self.num_components());
        for row in matrix.iter_rows() {
            data.extend(self.transform_row(row)?.into_iter().map(|v| v as f32));
        }
        Ok(Matrix::new(matrix.rows(), self.num_components(), data))
    }

    /// Maps reduced coordinates back into the original space.
    pub fn inverse_transform_row(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (zi, c) in z.iter().zip(&self.components) {
            for (xj, cj) in x.iter_mut().zip(c) {
                *xj += zi * cj;
            }
        }
        x
    }
}

/// Which features a 2-D projection is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectionSource {
    PixelFeatures,
    /// Embeddings of one space (0 is the input space).
    LayerEmbedding(usize),
    /// Per-probe layer kDN vectors of the profiled instances.
    DifficultyPattern,
}

impl fmt::Display for ProjectionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionSource::PixelFeatures => f.write_str("pixel"),
            ProjectionSource::LayerEmbedding(s) => write!(f, "layer:{s}"),
            ProjectionSource::DifficultyPattern => f.write_str("pattern"),
        }
    }
}

impl FromStr for ProjectionSource {
    type Err = String;

    /// Accepts `pixel`, `pattern`, and `layer:<space index>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixel" | "pixel-features" => Ok(ProjectionSource::PixelFeatures),
            "pattern" | "difficulty-pattern" => Ok(ProjectionSource::DifficultyPattern),
            _ => s
                .strip_prefix("layer:")
                .and_then(|i| i.parse().ok())
                .map(ProjectionSource::LayerEmbedding)
                .ok_or_else(|| format!("unknown projection source `{s}`")),
        }
    }
}

impl ProjectionSource {
    /// Parses a source, resolving `layer:<name>` against the bundle's layer names.
    pub fn parse_for(s: &str, bundle: &EmbeddingBundle) -> Result<Self, PcaError> {
        if let Some(name) = s.strip_prefix("layer:") {
            return bundle
                .space_by_name(name)
                .map(ProjectionSource::LayerEmbedding)
                .ok_or_else(|| PcaError::UnknownSpace(name.to_string()));
        }
        s.parse().map_err(PcaError::UnknownSpace)
    }
}

impl Serialize for ProjectionSource {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProjectionSource {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: InstanceId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub source: ProjectionSource,
    pub points: Vec<ProjectedPoint>,
    pub model: PcaModel,
}

impl Projection2D {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.id, p.x, p.y));
        }
        out
    }
}

/// The feature rows a projection source yields for each profile, in profile order.
pub fn source_matrix(bundle: &EmbeddingBundle, profiles: &[DifficultyProfile], source: ProjectionSource) -> Result<Matrix, PcaError> {
    match source {
        ProjectionSource::PixelFeatures => source_matrix(bundle, profiles, ProjectionSource::LayerEmbedding(0)),
        ProjectionSource::LayerEmbedding(space) => {
            if space >= bundle.num_spaces() {
                return Err(PcaError::UnknownSpace(space.to_string()));
            }
            let cols = bundle.matrix(crate::ids::Split::Train, space).cols();
            let mut data = Vec::with_capacity(profiles.len() * cols);
            for p in profiles {
                data.extend_from_slice(bundle.embedding(p.instance, space));
            }
            Ok(Matrix::new(profiles.len(), cols, data))
        }
        ProjectionSource::DifficultyPattern => {
            if profiles.is_empty() {
                return Err(PcaError::MissingProfiles);
            }
            let cols = profiles[0].layer_kdn.len();
            let mut data = Vec::with_capacity(profiles.len() * cols);
            for p in profiles {
                data.extend(p.layer_kdn.iter().map(|&v| v as f32));
            }
            Ok(Matrix::new(profiles.len(), cols, data))
        }
    }
}

/// Fits a 2-component PCA over the profiled instances' source features.
/// Sources narrower than two columns get a zero `y` coordinate.
pub fn project_2d(bundle: &EmbeddingBundle, profiles: &[DifficultyProfile], source: ProjectionSource) -> Result<Projection2D, PcaError> {
    if profiles.is_empty() {
        return Err(PcaError::MissingProfiles);
    }
    let m = source_matrix(bundle, profiles, source)?;
    let p = 2.min(m.rows()).min(m.cols());
    let model = pca_fit(&m, p)?;
    let points = profiles
        .iter()
        .zip(m.iter_rows())
        .map(|(prof, row)| {
            let z = model.transform_row(row)?;
            Ok(ProjectedPoint { id: prof.instance, x: z[0], y: z.get(1).copied().unwrap_or(0.0) })
        })
        .collect::<Result<_, PcaError>>()?;
    Ok(Projection2D { source, points, model })
}

/// Name of the space behind a layer source, for labels.
pub fn source_label(bundle: &EmbeddingBundle, source: ProjectionSource) -> String {
    match source {
        ProjectionSource::PixelFeatures => INPUT_SPACE.to_string(),
        ProjectionSource::LayerEmbedding(s) => bundle.space_name(s).to_string(),
        ProjectionSource::DifficultyPattern => "difficulty-pattern".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn points_on_the_diagonal() {
        let m = Matrix::from_rows(&[[0.0f32, 0.0], [1.0, 1.0], [2.0, 2.0], [-3.0, -3.0]]);
        let model = pca_fit(&m, 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((model.components[0][0] - h).abs() < 1e-12);
        assert!((model.components[0][1] - h).abs() < 1e-12);
        assert!(model.explained_variance[1].abs() < 1e-12);
        assert!(!model.degenerate);
    }

    #[test]
    fn constant_rows_are_degenerate_but_defined() {
        let m = Matrix::from_rows(&[[2.0f32, 5.0, 1.0]; 4]);
        let model = pca_fit(&m, 2).unwrap();
        assert!(model.degenerate);
        assert_eq!(model.explained_variance, vec![0.0, 0.0]);
        for c in &model.components {
            let norm: f64 = c.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let z = model.transform(&m).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_errors() {
        let m = Matrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0], [0.0, 1.0]]);
        assert!(matches!(pca_fit(&m, 3), Err(PcaError::ComponentsOutOfRange { .. })));
        assert!(matches!(pca_fit(&m, 0), Err(PcaError::ComponentsOutOfRange { .. })));
        assert_eq!(pca_fit(&Matrix::from_rows(&[[1.0f32, 2.0]]), 1).unwrap_err(), PcaError::TooFewRows(1));
        let model = pca_fit(&m, 1).unwrap();
        assert!(matches!(model.transform(&Matrix::zeros(2, 3)), Err(PcaError::DimensionMismatch { expected: 2, got: 3 })));
    }

    #[test]
    fn mean_maps_to_origin_and_empty_maps_to_empty() {
        let m = Matrix::from_rows(&[[1.0f32, 2.0, 0.5], [3.0, -4.0, 1.0], [0.0, 1.0, 2.0], [2.0, 2.0, 2.0]]);
        let model = pca_fit(&m, 2).unwrap();
        let mean: Vec<f32> = model.mean.iter().map(|&v| v as f32).collect();
        for v in model.transform_row(&mean).unwrap() {
            assert!(v.abs() < 1e-6);
        }
        let empty = model.transform(&Matrix::zeros(0, 3)).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (0, 2));
    }

    #[test]
    fn source_names_parse() {
        assert_eq!("pixel".parse::<ProjectionSource>().unwrap(), ProjectionSource::PixelFeatures);
        assert_eq!("layer:2".parse::<ProjectionSource>().unwrap(), ProjectionSource::LayerEmbedding(2));
        assert_eq!("pattern".parse::<ProjectionSource>().unwrap(), ProjectionSource::DifficultyPattern);
        assert!("layer:x".parse::<ProjectionSource>().is_err());
    }

    proptest! {
        #[test]
        fn transform_is_affine(seed in any::<u64>(), alpha in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::new(12, 5, (0..60).map(|_| rng.random_range(-3.0f32..3.0)).collect());
            let model = pca_fit(&m, 3).unwrap();
            let x: Vec<f32> = (0..5).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let y: Vec<f32> = (0..5).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let mix: Vec<f32> = x.iter().zip(&y).map(|(a, b)| (alpha * *a as f64 + (1.0 - alpha) * *b as f64) as f32).collect();
            let (tx, ty, tm) = (model.transform_row(&x).unwrap(), model.transform_row(&y).unwrap(), model.transform_row(&mix).unwrap());
            for i in 0..3 {
                prop_assert!((tm[i] - (alpha * tx[i] + (1.0 - alpha) * ty[i])).abs() < 1e-5);
            }
        }
    }
}
