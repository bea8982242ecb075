//! On-disk embedding bundles.
//!
//! A bundle directory holds `manifest.json`, one `EMB1` matrix per split and
//! embedding space (raw input features plus every exported hidden layer), and
//! the CSV tables for labels, predictions, annotations and image references.
//! Every registered file carries a CRC-32 in the manifest.
//!
//! [`load_bundle`] and [`validate_bundle`] share one scanning pass, so a
//! bundle loads exactly when its validation report is empty.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ids::{InstanceId, Split};
use crate::matrix::Matrix;

pub use synth::{synth_bundle, synth_generate, Expectations, PlantedConfusion, PlantedGroup, SynthError, SynthSpec, EXPECTATIONS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Name of the pixel/raw-feature space. Hidden layers may not reuse it.
pub const INPUT_SPACE: &str = "input";

const MAX_NON_FINITE_REPORTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub class_names: Vec<String>,
    /// Hidden layers in network order.
    pub layers: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub has_annotations: bool,
    pub files: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }
}

/// Logical registry key of the matrix for `split` in embedding space `space`.
pub fn matrix_key(split: Split, space_name: &str) -> String {
    format!("matrix/{split}/{space_name}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotator: String,
    pub label: u32,
}

/// What a violation is about; the `file` and `location` fields say where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Manifest,
    MissingFile,
    PathEscape,
    Checksum,
    Format,
    DimensionMismatch,
    NonFinite,
    ClassOutOfRange,
    DanglingReference,
    DuplicateRecord,
    MissingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Location {
    Line { line: u64 },
    Cell { row: usize, col: usize, offset: usize },
    Offset { offset: usize },
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line { line } => write!(f, "line {line}"),
            Location::Cell { row, col, offset } => {
                write!(f, "row {row}, col {col} (byte offset {offset})")
            }
            Location::Offset { offset } => write!(f, "byte offset {offset}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Bundle-relative path, or the logical registry name when the path is unknown.
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(loc) = &self.location {
            write!(f, " at {loc}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid bundle: {} ({} violation(s))", violations[0], violations.len())]
    Invalid { violations: Vec<Violation> },
    #[error("inconsistent bundle contents: {0}")]
    Inconsistent(String),
}

impl BundleError {
    fn io(path: &Path, source: io::Error) -> Self {
        BundleError::Io { path: path.to_path_buf(), source }
    }
}

/// In-memory contents of a bundle, before it has been written anywhere.
#[derive(Debug, Clone)]
pub struct BundleParts {
    pub dataset_name: String,
    pub class_names: Vec<String>,
    pub layers: Vec<String>,
    /// One matrix per space: index 0 is the input space, then each hidden layer.
    pub train: Vec<Matrix>,
    pub test: Vec<Matrix>,
    pub train_labels: Vec<u32>,
    pub test_labels: Vec<u32>,
    pub test_predictions: Vec<u32>,
    /// Optional final predictions for train instances (needed only when profiling them).
    pub train_predictions: Vec<Option<u32>>,
    /// `None` when the dataset carries no annotations at all.
    pub annotations: Option<Vec<Vec<Annotation>>>,
    pub images: BTreeMap<InstanceId, String>,
}

/// An immutable, validated bundle.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    manifest: Manifest,
    root: Option<PathBuf>,
    fingerprint: u32,
    train: Vec<Matrix>,
    test: Vec<Matrix>,
    train_labels: Vec<u32>,
    test_labels: Vec<u32>,
    test_predictions: Vec<u32>,
    train_predictions: Vec<Option<u32>>,
    annotations: Option<Vec<Vec<Annotation>>>,
    images: BTreeMap<InstanceId, String>,
}

impl EmbeddingBundle {
    /// Checks shapes and ranges of in-memory parts. The returned bundle has no
    /// root directory and a fingerprint of 0 until it is written.
    pub fn from_parts(parts: BundleParts) -> Result<Self, BundleError> {
        let bad = |msg: String| Err(BundleError::Inconsistent(msg));
        let c = parts.class_names.len();
        let l = parts.layers.len();
        if c < 2 {
            return bad(format!("need at least 2 classes, got {c}"));
        }
        if l < 1 {
            return bad("need at least one hidden layer".into());
        }
        if parts.train.len() != l + 1 || parts.test.len() != l + 1 {
            return bad(format!("expected {} matrices per split", l + 1));
        }
        let n_train = parts.train_labels.len();
        let n_test = parts.test_labels.len();
        for (s, (tr, te)) in parts.train.iter().zip(&parts.test).enumerate() {
            if tr.rows() != n_train || te.rows() != n_test {
                return bad(format!("space {s}: matrix rows disagree with label counts"));
            }
            if tr.cols() != te.cols() {
                return bad(format!("space {s}: train and test widths differ"));
            }
            if tr.non_finite().next().is_some() || te.non_finite().next().is_some() {
                return bad(format!("space {s}: non-finite values"));
            }
        }
        let in_range = |v: &u32| (*v as usize) < c;
        if !parts.train_labels.iter().chain(&parts.test_labels).all(in_range)
            || !parts.test_predictions.iter().all(in_range)
            || !parts.train_predictions.iter().flatten().all(in_range)
        {
            return bad("class index out of range".into());
        }
        if parts.test_predictions.len() != n_test {
            return bad("every test instance needs exactly one prediction".into());
        }
        if parts.train_predictions.len() != n_train {
            return bad("train prediction slots must match n_train".into());
        }
        if let Some(ann) = &parts.annotations {
            if ann.len() != n_test || !ann.iter().flatten().map(|a| &a.label).all(in_range) {
                return bad("annotations must cover the test split with valid classes".into());
            }
        }
        let manifest = Manifest {
            dataset_name: parts.dataset_name,
            class_names: parts.class_names,
            layers: parts.layers,
            n_train,
            n_test,
            has_annotations: parts.annotations.is_some(),
            files: BTreeMap::new(),
        };
        Ok(EmbeddingBundle {
            manifest,
            root: None,
            fingerprint: 0,
            train: parts.train,
            test: parts.test,
            train_labels: parts.train_labels,
            test_labels: parts.test_labels,
            test_predictions: parts.test_predictions,
            train_predictions: parts.train_predictions,
            annotations: parts.annotations,
            images: parts.images,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// CRC-32 of the manifest bytes; changes whenever any registered file changes.
    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers()
    }

    /// Number of embedding spaces, `L + 1`.
    pub fn num_spaces(&self) -> usize {
        self.manifest.num_layers() + 1
    }

    pub fn space_name(&self, space: usize) -> &str {
        if space == 0 {
            INPUT_SPACE
        } else {
            &self.manifest.layers[space - 1]
        }
    }

    /// Resolves `input`, a hidden layer name, or a numeric space index.
    pub fn space_by_name(&self, name: &str) -> Option<usize> {
        if name == INPUT_SPACE {
            return Some(0);
        }
        if let Some(i) = self.manifest.layers.iter().position(|l| l == name) {
            return Some(i + 1);
        }
        name.parse::<usize>().ok().filter(|&s| s < self.num_spaces())
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.manifest.split_len(split)
    }

    pub fn matrix(&self, split: Split, space: usize) -> &Matrix {
        match split {
            Split::Train => &self.train[space],
            Split::Test => &self.test[space],
        }
    }

    pub fn embedding(&self, id: InstanceId, space: usize) -> &[f32] {
        self.matrix(id.split, space).row(id.row())
    }

    pub fn labels(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_labels,
            Split::Test => &self.test_labels,
        }
    }

    pub fn label(&self, id: InstanceId) -> u32 {
        self.labels(id.split)[id.row()]
    }

    /// Final DNN prediction, when the bundle has one for this instance.
    pub fn prediction(&self, id: InstanceId) -> Option<u32> {
        match id.split {
            Split::Test => self.test_predictions.get(id.row()).copied(),
            Split::Train => self.train_predictions.get(id.row()).copied().flatten(),
        }
    }

    pub fn has_annotations(&self) -> bool {
        self.annotations.is_some()
    }

    /// Annotations for a test instance; `None` when the dataset has none at all.
    pub fn annotations(&self, id: InstanceId) -> Option<&[Annotation]> {
        match id.split {
            Split::Test => self.annotations.as_ref().map(|a| a[id.row()].as_slice()),
            Split::Train => None,
        }
    }

    pub fn image(&self, id: InstanceId) -> Option<&str> {
        self.images.get(&id).map(String::as_str)
    }

    pub fn instance_ids(&self, split: Split) -> impl Iterator<Item = InstanceId> {
        (0..self.split_len(split) as u32).map(move |index| InstanceId { split, index })
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        id.row() < self.split_len(id.split)
    }

    /// Writes the bundle to `dir` and returns the reloaded, validated handle.
    /// Output bytes depend only on the bundle contents.
    pub fn write(&self, dir: &Path) -> Result<EmbeddingBundle, BundleError> {
        fs::create_dir_all(dir.join("matrices")).map_err(|e| BundleError::io(dir, e))?;
        let mut files = BTreeMap::new();
        let mut put = |logical: String, rel: String, bytes: Vec<u8>| -> Result<(), BundleError> {
            let path = dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| BundleError::io(&path, e))?;
            files.insert(logical, FileEntry { path: rel, crc32: crc32fast::hash(&bytes) });
            Ok(())
        };

        for space in 0..self.num_spaces() {
            let name = self.space_name(space).to_string();
            for split in [Split::Train, Split::Test] {
                put(matrix_key(split, &name), format!("matrices/{split}_{name}.emb"), self.matrix(split, space).to_emb1())?;
            }
        }

        let mut labels = csv_writer(&["instance_id", "split", "label"]);
        for split in [Split::Train, Split::Test] {
            for id in self.instance_ids(split) {
                labels.write_record([id.to_string(), split.to_string(), self.label(id).to_string()]).unwrap();
            }
        }
        put("labels".into(), "labels.csv".into(), labels.into_inner().unwrap())?;

        let mut preds = csv_writer(&["instance_id", "predicted_label"]);
        for (i, p) in self.train_predictions.iter().enumerate() {
            if let Some(p) = p {
                preds.write_record([InstanceId::train(i as u32).to_string(), p.to_string()]).unwrap();
            }
        }
        for (i, p) in self.test_predictions.iter().enumerate() {
            preds.write_record([InstanceId::test(i as u32).to_string(), p.to_string()]).unwrap();
        }
        put("predictions".into(), "predictions.csv".into(), preds.into_inner().unwrap())?;

        if let Some(ann) = &self.annotations {
            let mut w = csv_writer(&["instance_id", "annotator_id", "label"]);
            for (i, list) in ann.iter().enumerate() {
                for a in list {
                    w.write_record([InstanceId::test(i as u32).to_string(), a.annotator.clone(), a.label.to_string()]).unwrap();
                }
            }
            put("annotations".into(), "annotations.csv".into(), w.into_inner().unwrap())?;
        }

        if !self.images.is_empty() {
            let mut w = csv_writer(&["instance_id", "path"]);
            for (id, path) in &self.images {
                w.write_record([id.to_string(), path.clone()]).unwrap();
            }
            put("images".into(), "images.csv".into(), w.into_inner().unwrap())?;
        }

        let manifest = Manifest { files, ..self.manifest.clone() };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, &text).map_err(|e| BundleError::io(&manifest_path, e))?;
        load_bundle(dir)
    }
}

fn csv_writer(header: &[&str]) -> csv::Writer<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).unwrap();
    w
}

/// Loads and fully validates a bundle directory.
pub fn load_bundle(path: &Path) -> Result<EmbeddingBundle, BundleError> {
    let (violations, bundle) = scan(path)?;
    match bundle {
        Some(b) if violations.is_empty() => Ok(b),
        _ => Err(BundleError::Invalid { violations }),
    }
}

/// Reports every content violation of a bundle directory. Only fails when the
/// directory itself cannot be read.
pub fn validate_bundle(path: &Path) -> Result<ValidationReport, BundleError> {
    let (violations, _) = scan(path)?;
    Ok(ValidationReport { violations })
}

struct Scanner<'a> {
    root: &'a Path,
    violations: Vec<Violation>,
}

impl Scanner<'_> {
    fn report(&mut self, kind: ViolationKind, file: &str, location: Option<Location>, message: impl Into<String>) {
        self.violations.push(Violation { kind, file: file.to_string(), location, message: message.into() });
    }

    /// Reads a registered file, checking containment and checksum.
    fn read(&mut self, manifest: &Manifest, logical: &str, required: bool) -> Option<(String, Vec<u8>)> {
        let Some(entry) = manifest.files.get(logical) else {
            if required {
                self.report(ViolationKind::MissingFile, logical, None, format!("`{logical}` is not registered in the manifest"));
            }
            return None;
        };
        if !is_contained(&entry.path) {
            self.report(ViolationKind::PathEscape, &entry.path, None, "path leaves the bundle directory");
            return None;
        }
        let full = self.root.join(&entry.path);
        let bytes = match fs::read(&full) {
            Ok(b) => b,
            Err(e) => {
                self.report(ViolationKind::MissingFile, &entry.path, None, format!("cannot read `{logical}`: {e}"));
                return None;
            }
        };
        let actual = crc32fast::hash(&bytes);
        if actual != entry.crc32 {
            self.report(
                ViolationKind::Checksum,
                &entry.path,
                None,
                format!("crc32 mismatch: manifest says {:08x}, file has {actual:08x}", entry.crc32),
            );
            return None;
        }
        Some((entry.path.clone(), bytes))
    }

    fn matrix(&mut self, manifest: &Manifest, split: Split, space_name: &str) -> Option<Matrix> {
        let logical = matrix_key(split, space_name);
        let (file, bytes) = self.read(manifest, &logical, true)?;
        let m = match Matrix::from_emb1(&bytes) {
            Ok(m) => m,
            Err(e) => {
                let loc = Matrix::emb1_header(&bytes).ok().map(|_| Location::Offset { offset: bytes.len() });
                self.report(ViolationKind::Format, &file, loc, format!("{logical}: {e}"));
                return None;
            }
        };
        let expected = manifest.split_len(split);
        if m.rows() != expected {
            self.report(
                ViolationKind::DimensionMismatch,
                &file,
                Some(Location::Offset { offset: 4 }),
                format!("{logical} holds {} rows but n_{split} is {expected} (layer {space_name})", m.rows()),
            );
        }
        let mut bad = m.non_finite();
        for nf in bad.by_ref().take(MAX_NON_FINITE_REPORTS) {
            self.report(
                ViolationKind::NonFinite,
                &file,
                Some(Location::Cell { row: nf.row, col: nf.col, offset: nf.offset }),
                format!("{logical}: non-finite value {}", nf.value),
            );
        }
        let more = bad.count();
        if more > 0 {
            self.report(ViolationKind::NonFinite, &file, None, format!("{logical}: {more} more non-finite values"));
        }
        Some(m)
    }

    fn table(
        &mut self,
        manifest: &Manifest,
        logical: &str,
        required: bool,
        header: &[&str],
    ) -> Option<(String, Vec<(u64, csv::StringRecord)>)> {
        let (file, bytes) = self.read(manifest, logical, required)?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
        match rdr.headers() {
            Ok(h) if h.iter().eq(header.iter().copied()) => {}
            Ok(h) => {
                self.report(
                    ViolationKind::Format,
                    &file,
                    Some(Location::Line { line: 1 }),
                    format!("expected header `{}`, found `{}`", header.join(","), h.iter().collect::<Vec<_>>().join(",")),
                );
                return None;
            }
            Err(e) => {
                self.report(ViolationKind::Format, &file, Some(Location::Line { line: 1 }), e.to_string());
                return None;
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            match rec {
                Ok(r) => rows.push((r.position().map_or(0, |p| p.line()), r)),
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    self.report(ViolationKind::Format, &file, Some(Location::Line { line }), e.to_string());
                    return None;
                }
            }
        }
        Some((file, rows))
    }

    fn instance(&mut self, file: &str, line: u64, field: &str, manifest: &Manifest) -> Option<InstanceId> {
        match field.parse::<InstanceId>() {
            Ok(id) if id.row() < manifest.split_len(id.split) => Some(id),
            Ok(id) => {
                self.report(ViolationKind::DanglingReference, file, Some(Location::Line { line }), format!("unknown instance `{id}`"));
                None
            }
            Err(e) => {
                self.report(ViolationKind::Format, file, Some(Location::Line { line }), e);
                None
            }
        }
    }

    fn class(&mut self, file: &str, line: u64, field: &str, c: usize) -> Option<u32> {
        match field.parse::<u32>() {
            Ok(v) if (v as usize) < c => Some(v),
            Ok(v) => {
                self.report(
                    ViolationKind::ClassOutOfRange,
                    file,
                    Some(Location::Line { line }),
                    format!("class index {v} outside [0, {c})"),
                );
                None
            }
            Err(_) => {
                self.report(ViolationKind::Format, file, Some(Location::Line { line }), format!("`{field}` is not a class index"));
                None
            }
        }
    }
}

fn is_contained(rel: &str) -> bool {
    let p = Path::new(rel);
    !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn is_inline_image(value: &str) -> bool {
    value.starts_with("data:image/png;base64,")
}

fn scan(root: &Path) -> Result<(Vec<Violation>, Option<EmbeddingBundle>), BundleError> {
    let meta = fs::metadata(root).map_err(|e| BundleError::io(root, e))?;
    if !meta.is_dir() {
        return Err(BundleError::io(root, io::Error::new(io::ErrorKind::NotADirectory, "bundle path is not a directory")));
    }
    let mut sc = Scanner { root, violations: Vec::new() };

    let manifest_bytes = match fs::read(root.join(MANIFEST_FILE)) {
        Ok(b) => b,
        Err(e) => {
            sc.report(ViolationKind::MissingFile, MANIFEST_FILE, None, format!("cannot read manifest: {e}"));
            return Ok((sc.violations, None));
        }
    };
    let manifest: Manifest = match serde_json::from_slice(&manifest_bytes) {
        Ok(m) => m,
        Err(e) => {
            sc.report(ViolationKind::Manifest, MANIFEST_FILE, Some(Location::Line { line: e.line() as u64 }), e.to_string());
            return Ok((sc.violations, None));
        }
    };
    let c = manifest.num_classes();
    if c < 2 {
        sc.report(ViolationKind::Manifest, MANIFEST_FILE, None, format!("class_names must list at least 2 classes, got {c}"));
    }
    if manifest.layers.is_empty() {
        sc.report(ViolationKind::Manifest, MANIFEST_FILE, None, "layers must list at least one hidden layer");
    }
    let mut seen = HashSet::new();
    for name in &manifest.layers {
        if name == INPUT_SPACE || name.is_empty() || name.contains('/') {
            sc.report(ViolationKind::Manifest, MANIFEST_FILE, None, format!("invalid layer name `{name}`"));
        } else if !seen.insert(name.as_str()) {
            sc.report(ViolationKind::Manifest, MANIFEST_FILE, None, format!("duplicate layer name `{name}`"));
        }
    }
    if !sc.violations.is_empty() {
        return Ok((sc.violations, None));
    }

    let spaces: Vec<String> = std::iter::once(INPUT_SPACE.to_string()).chain(manifest.layers.iter().cloned()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for name in &spaces {
        let tr = sc.matrix(&manifest, Split::Train, name);
        let te = sc.matrix(&manifest, Split::Test, name);
        if let (Some(a), Some(b)) = (&tr, &te) {
            if a.cols() != b.cols() {
                sc.report(
                    ViolationKind::DimensionMismatch,
                    &matrix_key(Split::Test, name),
                    Some(Location::Offset { offset: 8 }),
                    format!("layer {name}: test width {} differs from train width {}", b.cols(), a.cols()),
                );
            }
        }
        train.push(tr);
        test.push(te);
    }

    // labels
    let mut train_labels: Vec<Option<u32>> = vec![None; manifest.n_train];
    let mut test_labels: Vec<Option<u32>> = vec![None; manifest.n_test];
    if let Some((file, rows)) = sc.table(&manifest, "labels", true, &["instance_id", "split", "label"]) {
        for (line, rec) in rows {
            let Some(id) = sc.instance(&file, line, &rec[0], &manifest) else { continue };
            if rec[1] != *id.split.as_str() {
                sc.report(
                    ViolationKind::Format,
                    &file,
                    Some(Location::Line { line }),
                    format!("split column `{}` contradicts `{id}`", &rec[1]),
                );
                continue;
            }
            let Some(label) = sc.class(&file, line, &rec[2], c) else { continue };
            let slot = match id.split {
                Split::Train => &mut train_labels[id.row()],
                Split::Test => &mut test_labels[id.row()],
            };
            if slot.replace(label).is_some() {
                sc.report(ViolationKind::DuplicateRecord, &file, Some(Location::Line { line }), format!("second label for `{id}`"));
            }
        }
        report_missing(&mut sc, &file, "label", Split::Train, &train_labels);
        report_missing(&mut sc, &file, "label", Split::Test, &test_labels);
    }

    // predictions
    let mut test_preds: Vec<Option<u32>> = vec![None; manifest.n_test];
    let mut train_preds: Vec<Option<u32>> = vec![None; manifest.n_train];
    if let Some((file, rows)) = sc.table(&manifest, "predictions", true, &["instance_id", "predicted_label"]) {
        for (line, rec) in rows {
            let Some(id) = sc.instance(&file, line, &rec[0], &manifest) else { continue };
            let Some(p) = sc.class(&file, line, &rec[1], c) else { continue };
            let slot = match id.split {
                Split::Train => &mut train_preds[id.row()],
                Split::Test => &mut test_preds[id.row()],
            };
            if slot.replace(p).is_some() {
                sc.report(ViolationKind::DuplicateRecord, &file, Some(Location::Line { line }), format!("second prediction for `{id}`"));
            }
        }
        report_missing(&mut sc, &file, "prediction", Split::Test, &test_preds);
    }

    // annotations
    let mut annotations: Option<Vec<Vec<Annotation>>> = None;
    if manifest.has_annotations {
        if let Some((file, rows)) = sc.table(&manifest, "annotations", true, &["instance_id", "annotator_id", "label"]) {
            let mut ann = vec![Vec::new(); manifest.n_test];
            for (line, rec) in rows {
                let Some(id) = sc.instance(&file, line, &rec[0], &manifest) else { continue };
                if id.split != Split::Test {
                    sc.report(
                        ViolationKind::DanglingReference,
                        &file,
                        Some(Location::Line { line }),
                        format!("annotation for non-test instance `{id}`"),
                    );
                    continue;
                }
                let Some(label) = sc.class(&file, line, &rec[2], c) else { continue };
                ann[id.row()].push(Annotation { annotator: rec[1].to_string(), label });
            }
            annotations = Some(ann);
        }
    }

    // images
    let mut images = BTreeMap::new();
    if let Some((file, rows)) = sc.table(&manifest, "images", false, &["instance_id", "path"]) {
        for (line, rec) in rows {
            let Some(id) = sc.instance(&file, line, &rec[0], &manifest) else { continue };
            let value = &rec[1];
            if !is_inline_image(value) && !is_contained(value) {
                sc.report(
                    ViolationKind::PathEscape,
                    &file,
                    Some(Location::Line { line }),
                    format!("image path `{value}` leaves the bundle directory"),
                );
                continue;
            }
            images.insert(id, value.to_string());
        }
    }

    if !sc.violations.is_empty() {
        return Ok((sc.violations, None));
    }
    let parts = BundleParts {
        dataset_name: manifest.dataset_name.clone(),
        class_names: manifest.class_names.clone(),
        layers: manifest.layers.clone(),
        train: train.into_iter().map(Option::unwrap).collect(),
        test: test.into_iter().map(Option::unwrap).collect(),
        train_labels: train_labels.into_iter().map(Option::unwrap).collect(),
        test_labels: test_labels.into_iter().map(Option::unwrap).collect(),
        test_predictions: test_preds.into_iter().map(Option::unwrap).collect(),
        train_predictions: train_preds,
        annotations,
        images,
    };
    let mut bundle = EmbeddingBundle::from_parts(parts).map_err(|e| match e {
        // unreachable after a clean scan, but never panic on disk contents
        BundleError::Inconsistent(msg) => BundleError::Invalid {
            violations: vec![Violation { kind: ViolationKind::Format, file: MANIFEST_FILE.into(), location: None, message: msg }],
        },
        other => other,
    })?;
    bundle.manifest = manifest;
    bundle.root = Some(root.to_path_buf());
    bundle.fingerprint = crc32fast::hash(&manifest_bytes);
    Ok((Vec::new(), Some(bundle)))
}

fn report_missing(sc: &mut Scanner<'_>, file: &str, what: &str, split: Split, slots: &[Option<u32>]) {
    let missing: Vec<_> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect();
    if let Some(&first) = missing.first() {
        sc.report(
            ViolationKind::MissingRecord,
            file,
            None,
            format!("{} {split} instance(s) lack a {what}, first is `{split}/{first}`", missing.len()),
        );
    }
}
