//! Deterministic synthetic bundles with planted difficulty structure.
//!
//! Every class owns one Gaussian cluster center per embedding space. Clean
//! instances sit at their own class center in every space. Three kinds of
//! instance can be planted into the test split:
//!
//! * late separators: placed at a confuser class's center in every space
//!   before `separate_at`, then at their own center. The DNN predicts their
//!   label correctly, so their prediction depth is `separate_at`.
//! * mislabeled: content of class `f` in every space but labelled `y != f`,
//!   predicted as `f`. Annotators see `f`.
//! * confusable: clean in the input space, at a confuser center from
//!   `confuse_from` onwards, and predicted as the confuser.

use std::fs;
use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Annotation, BundleError, BundleParts, EmbeddingBundle};
use crate::ids::InstanceId;
use crate::matrix::Matrix;

pub const EXPECTATIONS_FILE: &str = "expectations.json";

fn default_name() -> String {
    "synthetic".into()
}
fn default_dim() -> usize {
    32
}
fn default_separation() -> f32 {
    4.0
}
fn default_noise() -> f32 {
    1.0
}
fn default_confuse_from() -> usize {
    1
}
fn default_annotation_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub dataset_name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub num_layers: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_dim")]
    pub input_dim: usize,
    #[serde(default = "default_dim")]
    pub layer_dim: usize,
    /// Explicit centers, indexed `[space][class][coordinate]`. Drawn from the seed when absent.
    #[serde(default)]
    pub centers: Option<Vec<Vec<Vec<f32>>>>,
    /// Standard deviation of generated center coordinates.
    #[serde(default = "default_separation")]
    pub separation: f32,
    /// Standard deviation of per-instance isotropic noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub late_separators: usize,
    /// Space index at which late separators reach their own cluster; defaults to the last layer.
    #[serde(default)]
    pub separate_at: Option<usize>,
    #[serde(default)]
    pub mislabeled: usize,
    #[serde(default)]
    pub confusable: usize,
    #[serde(default = "default_confuse_from")]
    pub confuse_from: usize,
    /// Annotations per test instance; zero produces an unannotated bundle.
    #[serde(default)]
    pub annotators: usize,
    #[serde(default = "default_annotation_noise")]
    pub annotation_noise: f64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub layer_names: Option<Vec<String>>,
    /// Attach an inline 8x8 grayscale PNG rendered from the input features to every instance.
    #[serde(default)]
    pub thumbnails: bool,
}

impl SynthSpec {
    /// A small, fully specified starting point.
    pub fn new(seed: u64, num_classes: usize, num_layers: usize, n_train: usize, n_test: usize) -> Self {
        SynthSpec {
            dataset_name: default_name(),
            seed,
            num_classes,
            num_layers,
            n_train,
            n_test,
            input_dim: default_dim(),
            layer_dim: default_dim(),
            centers: None,
            separation: default_separation(),
            noise: default_noise(),
            late_separators: 0,
            separate_at: None,
            mislabeled: 0,
            confusable: 0,
            confuse_from: default_confuse_from(),
            annotators: 0,
            annotation_noise: default_annotation_noise(),
            class_names: None,
            layer_names: None,
            thumbnails: false,
        }
    }

    fn separate_at(&self) -> usize {
        self.separate_at.unwrap_or(self.num_layers)
    }

    fn dim(&self, space: usize) -> usize {
        if space == 0 {
            self.input_dim
        } else {
            self.layer_dim
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible synth spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfusion {
    pub id: InstanceId,
    pub actual: u32,
    pub predicted: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroup {
    pub ids: Vec<InstanceId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_pd: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_data_kdn: Option<f64>,
}

/// Sidecar describing what the generator planted, written as `expectations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub seed: u64,
    pub num_layers: usize,
    /// Fraction of test instances whose final prediction equals their label.
    pub expected_accuracy: f64,
    /// True when noise is zero: clean instances then have data kDN 0 and PD 0 exactly.
    pub exact: bool,
    pub clean: PlantedGroup,
    pub late_separators: PlantedGroup,
    pub mislabeled: PlantedGroup,
    pub confusable: Vec<PlantedConfusion>,
}

impl Expectations {
    pub fn read(dir: &Path) -> std::io::Result<Expectations> {
        let bytes = fs::read(dir.join(EXPECTATIONS_FILE))?;
        serde_json::from_slice(&bytes).map_err(std::io::Error::other)
    }
}

fn check(spec: &SynthSpec) -> Result<(), SynthError> {
    let bad = |m: String| Err(SynthError::Infeasible(m));
    let c = spec.num_classes;
    let l = spec.num_layers;
    if c < 2 {
        return bad(format!("need at least 2 classes, got {c}"));
    }
    if l < 1 {
        return bad("need at least one hidden layer".into());
    }
    if c > spec.n_train || c > spec.n_test {
        return bad(format!("{c} classes cannot be populated by {} train / {} test instances", spec.n_train, spec.n_test));
    }
    if spec.input_dim == 0 || spec.layer_dim == 0 {
        return bad("dimensions must be positive".into());
    }
    let planted = spec.late_separators + spec.mislabeled + spec.confusable;
    if planted > spec.n_test {
        return bad(format!("{planted} planted instances exceed n_test = {}", spec.n_test));
    }
    if !(1..=l).contains(&spec.separate_at()) {
        return bad(format!("separate_at must lie in 1..={l}"));
    }
    if !(1..=l).contains(&spec.confuse_from) {
        return bad(format!("confuse_from must lie in 1..={l}"));
    }
    if !(spec.noise >= 0.0 && spec.separation >= 0.0 && spec.noise.is_finite() && spec.separation.is_finite()) {
        return bad("noise and separation must be finite and nonnegative".into());
    }
    if !(0.0..=1.0).contains(&spec.annotation_noise) {
        return bad("annotation_noise must lie in [0, 1]".into());
    }
    if let Some(centers) = &spec.centers {
        if centers.len() != l + 1 {
            return bad(format!("centers must cover {} spaces", l + 1));
        }
        for (s, per_class) in centers.iter().enumerate() {
            if per_class.len() != c || per_class.iter().any(|v| v.len() != spec.dim(s)) {
                return bad(format!("centers for space {s} must be {c} vectors of length {}", spec.dim(s)));
            }
        }
    }
    if let Some(names) = &spec.class_names {
        if names.len() != c {
            return bad("class_names length must equal num_classes".into());
        }
    }
    if let Some(names) = &spec.layer_names {
        if names.len() != l {
            return bad("layer_names length must equal num_layers".into());
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Plant {
    Clean,
    Late { confuser: u32 },
    Mislabeled { content: u32 },
    Confusable { confuser: u32 },
}

fn other_class(rng: &mut ChaCha8Rng, not: u32, c: usize) -> u32 {
    let offset = rng.random_range(1..c as u32);
    (not + offset) % c as u32
}

/// Builds the in-memory bundle and its expectations without touching disk.
pub fn synth_bundle(spec: &SynthSpec) -> Result<(EmbeddingBundle, Expectations), SynthError> {
    check(spec)?;
    let c = spec.num_classes;
    let l = spec.num_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centers: Vec<Vec<Vec<f32>>> = match &spec.centers {
        Some(c) => c.clone(),
        None => (0..=l)
            .map(|s| (0..c).map(|_| (0..spec.dim(s)).map(|_| spec.separation * rng.sample::<f32, _>(StandardNormal)).collect()).collect())
            .collect(),
    };

    let mut test_order: Vec<usize> = (0..spec.n_test).collect();
    test_order.shuffle(&mut rng);
    let mut plants = vec![Plant::Clean; spec.n_test];
    let test_class = |i: usize| (i % c) as u32;
    let mut cursor = test_order.into_iter();
    for _ in 0..spec.late_separators {
        let i = cursor.next().unwrap();
        plants[i] = Plant::Late { confuser: other_class(&mut rng, test_class(i), c) };
    }
    for _ in 0..spec.mislabeled {
        let i = cursor.next().unwrap();
        plants[i] = Plant::Mislabeled { content: other_class(&mut rng, test_class(i), c) };
    }
    for _ in 0..spec.confusable {
        let i = cursor.next().unwrap();
        plants[i] = Plant::Confusable { confuser: other_class(&mut rng, test_class(i), c) };
    }

    let separate_at = spec.separate_at();
    let sample = |rng: &mut ChaCha8Rng, center: &[f32]| -> Vec<f32> {
        center.iter().map(|&m| m + spec.noise * rng.sample::<f32, _>(StandardNormal)).collect()
    };

    let mut train = Vec::with_capacity(l + 1);
    let mut test = Vec::with_capacity(l + 1);
    for (s, space_centers) in centers.iter().enumerate().take(l + 1) {
        let dim = spec.dim(s);
        let mut tr = Vec::with_capacity(spec.n_train * dim);
        for i in 0..spec.n_train {
            tr.extend(sample(&mut rng, &space_centers[i % c]));
        }
        train.push(Matrix::new(spec.n_train, dim, tr));

        let mut te = Vec::with_capacity(spec.n_test * dim);
        for (i, plant) in plants.iter().enumerate() {
            let own = test_class(i);
            let at = match *plant {
                Plant::Clean => own,
                Plant::Late { confuser } => {
                    if s < separate_at {
                        confuser
                    } else {
                        own
                    }
                }
                Plant::Mislabeled { content } => content,
                Plant::Confusable { confuser } => {
                    if s >= spec.confuse_from {
                        confuser
                    } else {
                        own
                    }
                }
            };
            te.extend(sample(&mut rng, &space_centers[at as usize]));
        }
        test.push(Matrix::new(spec.n_test, dim, te));
    }

    let train_labels: Vec<u32> = (0..spec.n_train).map(|i| (i % c) as u32).collect();
    let test_labels: Vec<u32> = (0..spec.n_test).map(test_class).collect();
    let test_predictions: Vec<u32> = plants
        .iter()
        .enumerate()
        .map(|(i, p)| match *p {
            Plant::Clean | Plant::Late { .. } => test_class(i),
            Plant::Mislabeled { content } => content,
            Plant::Confusable { confuser } => confuser,
        })
        .collect();

    let annotations = (spec.annotators > 0).then(|| {
        plants
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let perceived = match *p {
                    Plant::Mislabeled { content } => content,
                    _ => test_class(i),
                };
                (0..spec.annotators)
                    .map(|a| {
                        let label = if rng.random_bool(spec.annotation_noise) { other_class(&mut rng, perceived, c) } else { perceived };
                        Annotation { annotator: format!("a{a}"), label }
                    })
                    .collect()
            })
            .collect()
    });

    let images = if spec.thumbnails { thumbnails(&train, &test) } else { Default::default() };
    let parts = BundleParts {
        dataset_name: spec.dataset_name.clone(),
        class_names: spec.class_names.clone().unwrap_or_else(|| (0..c).map(|k| format!("class_{k}")).collect()),
        layers: spec.layer_names.clone().unwrap_or_else(|| (0..l).map(|k| format!("layer_{k}")).collect()),
        train,
        test,
        train_labels,
        test_labels: test_labels.clone(),
        test_predictions: test_predictions.clone(),
        train_predictions: vec![None; spec.n_train],
        annotations,
        images,
    };
    let bundle = EmbeddingBundle::from_parts(parts)?;

    let ids_where = |f: &dyn Fn(&Plant) -> bool| -> Vec<InstanceId> {
        plants.iter().enumerate().filter(|(_, p)| f(p)).map(|(i, _)| InstanceId::test(i as u32)).collect()
    };
    let correct = test_labels.iter().zip(&test_predictions).filter(|(a, b)| a == b).count();
    let expectations = Expectations {
        seed: spec.seed,
        num_layers: l,
        expected_accuracy: correct as f64 / spec.n_test as f64,
        exact: spec.noise == 0.0,
        clean: PlantedGroup { ids: ids_where(&|p| *p == Plant::Clean), expected_pd: Some(0), min_data_kdn: None },
        late_separators: PlantedGroup {
            ids: ids_where(&|p| matches!(p, Plant::Late { .. })),
            expected_pd: Some(separate_at),
            min_data_kdn: None,
        },
        mislabeled: PlantedGroup { ids: ids_where(&|p| matches!(p, Plant::Mislabeled { .. })), expected_pd: None, min_data_kdn: Some(0.8) },
        confusable: plants
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match *p {
                Plant::Confusable { confuser } => {
                    Some(PlantedConfusion { id: InstanceId::test(i as u32), actual: test_class(i), predicted: confuser })
                }
                _ => None,
            })
            .collect(),
    };
    Ok((bundle, expectations))
}

/// Generates a bundle into `dir` together with its `expectations.json` sidecar.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<(EmbeddingBundle, Expectations), SynthError> {
    let (bundle, expectations) = synth_bundle(spec)?;
    let bundle = bundle.write(dir)?;
    let path = dir.join(EXPECTATIONS_FILE);
    let mut text = serde_json::to_string_pretty(&expectations).expect("expectations serialize");
    text.push('\n');
    fs::write(&path, text).map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
    Ok((bundle, expectations))
}

const THUMB_SIDE: usize = 8;

/// Grayscale thumbnail of an input row: coordinates (cycled to fill 8x8) squashed through tanh.
fn thumbnail(row: &[f32]) -> String {
    let pixels: Vec<u8> = (0..THUMB_SIDE * THUMB_SIDE)
        .map(|i| {
            let v = row.get(i % row.len().max(1)).copied().unwrap_or(0.0);
            ((v / 4.0).tanh() * 127.5 + 127.5).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, THUMB_SIDE as u32, THUMB_SIDE as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(&pixels).expect("in-memory png data");
    }
    format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn thumbnails(train: &[Matrix], test: &[Matrix]) -> std::collections::BTreeMap<InstanceId, String> {
    let mut out = std::collections::BTreeMap::new();
    for (i, row) in train[0].iter_rows().enumerate() {
        out.insert(InstanceId::train(i as u32), thumbnail(row));
    }
    for (i, row) in test[0].iter_rows().enumerate() {
        out.insert(InstanceId::test(i as u32), thumbnail(row));
    }
    out
}
