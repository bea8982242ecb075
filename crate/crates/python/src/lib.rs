//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the standard `json` module, so callers get plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;

use difflens_core::dataset::{load_bundle, synth_generate, validate_bundle, SynthSpec};
use difflens_core::difficulty::{self, Analysis, DifficultyConfig, Level, Levels, ProbeTrace};
use difflens_core::flow::{flow_for, pcp_for};
use difflens_core::ids::InstanceId;
use difflens_core::knn::{Neighbor, NeighborSet};
use difflens_core::projection::{project_2d, ProjectionSource};
use difflens_core::summary::{self, PerspectivePair};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts either a JSON string or any object `json.dumps` can encode.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_string());
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

/// Parses an analysis config; `None` gives the defaults.
pub fn parse_config(text: Option<&str>) -> Result<DifficultyConfig, String> {
    let cfg: DifficultyConfig = match text {
        Some(t) => serde_json::from_str(t).map_err(|e| format!("config: {e}"))?,
        None => DifficultyConfig::default(),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn parse_ids(ids: &[String]) -> Result<Vec<InstanceId>, String> {
    let mut out: Vec<InstanceId> = ids.iter().map(|s| s.parse()).collect::<Result<_, String>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Share of `neighbor_labels` that differ from `reference`.
#[pyfunction]
fn kdn_score(neighbor_labels: Vec<u32>, reference: u32) -> PyResult<f64> {
    if neighbor_labels.is_empty() {
        return Err(value_error("need at least one neighbor"));
    }
    let set = NeighborSet {
        space: 0,
        neighbors: neighbor_labels.into_iter().enumerate().map(|(row, label)| Neighbor { row, distance: 0.0, label }).collect(),
    };
    Ok(difficulty::kdn_score(&set, reference))
}

/// Returns `(depth, never_aligned)` for probe predictions ordered input first.
#[pyfunction]
fn prediction_depth(probes: Vec<u32>, final_prediction: u32) -> PyResult<(usize, bool)> {
    let d = difficulty::prediction_depth(&ProbeTrace { instance: InstanceId::test(0), probes, final_prediction }).map_err(value_error)?;
    Ok((d.depth, d.never_aligned))
}

/// Pattern code for high/low flags (`True` = high); `human=None` gives "unclassified".
#[pyfunction]
#[pyo3(signature = (human, data, model, correct))]
fn assign_pattern(human: Option<bool>, data: bool, model: bool, correct: bool) -> &'static str {
    let level = |high: bool| if high { Level::High } else { Level::Low };
    difficulty::assign_pattern(Levels { human: human.map(level), data: level(data), model: level(model) }, correct).code()
}

/// Lists every violation of a bundle directory as a string; empty when valid.
#[pyfunction]
fn validate(path: PathBuf) -> PyResult<Vec<String>> {
    let report = validate_bundle(&path).map_err(runtime_error)?;
    Ok(report.violations.iter().map(|v| v.to_string()).collect())
}

/// Generates a synthetic bundle in `out_dir` and returns its planted expectations.
#[pyfunction]
fn synth<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, out_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let spec: SynthSpec = serde_json::from_str(&json_text(spec)?).map_err(value_error)?;
    let (_, exp) = py.detach(|| synth_generate(&spec, &out_dir)).map_err(value_error)?;
    to_py(py, &exp)
}

/// Difficulty profiles of one bundle under one config.
#[pyclass(name = "Analysis", module = "difflens", frozen)]
struct PyAnalysis {
    inner: Analysis,
}

impl PyAnalysis {
    fn members(&self, ids: Option<Vec<String>>) -> PyResult<Vec<InstanceId>> {
        match ids {
            Some(ids) => parse_ids(&ids).map_err(value_error),
            None => Ok(self.inner.profiles().iter().map(|p| p.instance).collect()),
        }
    }

    fn space(&self, name: &str) -> PyResult<usize> {
        self.inner.bundle().space_by_name(name).ok_or_else(|| value_error(format!("unknown space `{name}`")))
    }
}

#[pymethods]
impl PyAnalysis {
    #[new]
    #[pyo3(signature = (bundle, config = None, cache_dir = None))]
    fn new(py: Python<'_>, bundle: PathBuf, config: Option<&Bound<'_, PyAny>>, cache_dir: Option<PathBuf>) -> PyResult<Self> {
        let text = config.map(json_text).transpose()?;
        let cfg = parse_config(text.as_deref()).map_err(value_error)?;
        let inner = py
            .detach(|| -> Result<Analysis, String> {
                let b = Arc::new(load_bundle(&bundle).map_err(|e| e.to_string())?);
                Analysis::run(b, cfg, cache_dir.as_deref(), None).map_err(|e| e.to_string())
            })
            .map_err(runtime_error)?;
        Ok(PyAnalysis { inner })
    }

    #[getter]
    fn config_hash(&self) -> String {
        format!("{:08x}", self.inner.config().hash())
    }

    #[getter]
    fn spaces(&self) -> Vec<String> {
        let b = self.inner.bundle();
        (0..b.num_spaces()).map(|s| b.space_name(s).to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.profiles().len()
    }

    fn profiles<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.profiles())
    }

    fn profiles_csv(&self) -> String {
        self.inner.profiles_csv()
    }

    fn thresholds<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.thresholds())
    }

    #[pyo3(signature = (ids = None))]
    fn stats<'py>(&self, py: Python<'py>, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &summary::stats(&self.inner, &self.members(ids)?).map_err(value_error)?)
    }

    #[pyo3(signature = (ids = None))]
    fn patterns<'py>(&self, py: Python<'py>, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &summary::pattern_tally(&self.inner, &self.members(ids)?).map_err(value_error)?)
    }

    #[pyo3(signature = (ids = None))]
    fn confusion<'py>(&self, py: Python<'py>, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &summary::confusion(&self.inner, &self.members(ids)?).map_err(value_error)?)
    }

    #[pyo3(signature = (pair = "data-model", bins = summary::DEFAULT_BINS, ids = None))]
    fn heatmap<'py>(&self, py: Python<'py>, pair: &str, bins: usize, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        let pair: PerspectivePair = pair.parse().map_err(value_error)?;
        to_py(py, &summary::heatmap(&self.inner, &self.members(ids)?, pair, bins).map_err(value_error)?)
    }

    #[pyo3(signature = (ids = None))]
    fn flow<'py>(&self, py: Python<'py>, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &flow_for(&self.inner, &self.members(ids)?).map_err(value_error)?)
    }

    #[pyo3(signature = (ids = None))]
    fn pcp<'py>(&self, py: Python<'py>, ids: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &pcp_for(&self.inner, &self.members(ids)?).map_err(value_error)?)
    }

    #[pyo3(signature = (source = "pattern"))]
    fn projection<'py>(&self, py: Python<'py>, source: &str) -> PyResult<Bound<'py, PyAny>> {
        let source = ProjectionSource::parse_for(source, self.inner.bundle()).map_err(value_error)?;
        let proj = py.detach(|| project_2d(self.inner.bundle(), self.inner.profiles(), source)).map_err(runtime_error)?;
        to_py(py, &proj)
    }

    #[pyo3(signature = (instance, space = "input", k = None))]
    fn neighbors<'py>(&self, py: Python<'py>, instance: &str, space: &str, k: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let id: InstanceId = instance.parse().map_err(value_error)?;
        let space = self.space(space)?;
        to_py(py, &summary::neighbor_evidence(&self.inner, id, space, k, &[id]).map_err(value_error)?)
    }
}

#[pymodule]
fn difflens(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(kdn_score, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_depth, m)?)?;
    m.add_function(wrap_pyfunction!(assign_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<PyAnalysis>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_errors() {
        assert_eq!(parse_config(None).unwrap(), DifficultyConfig::default());
        assert_eq!(parse_config(Some(r#"{"k": 4}"#)).unwrap().k, 4);
        assert!(parse_config(Some(r#"{"k": 0}"#)).unwrap_err().contains('k'));
        assert!(parse_config(Some(r#"{"kk": 3}"#)).is_err());
    }

    #[test]
    fn ids_are_sorted_and_deduplicated() {
        let ids = parse_ids(&["test/3".into(), "train/1".into(), "test/3".into()]).unwrap();
        assert_eq!(ids.len(), 2);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(parse_ids(&["nope".into()]).is_err());
    }
}
