use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;

use difflens_core::dataset::EmbeddingBundle;
use difflens_core::difficulty::{Analysis, DifficultyConfig, DifficultyError};
use difflens_core::ids::InstanceId;
use difflens_core::projection::{project_2d, PcaError, Projection2D, ProjectionSource};
use difflens_core::subset::{load_store, SubsetError, SubsetManager};

#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    /// Directory for cached approximate indices.
    pub cache_dir: Option<PathBuf>,
    /// Where subsets are loaded from at startup and saved to.
    pub subsets_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeState {
    Idle,
    Running,
    Ready,
    Failed,
}

/// Profiles computed under one config. Immutable apart from the lazily filled projection cache.
pub struct Computed {
    pub analysis: Arc<Analysis>,
    pub config_hash: u32,
    projections: Mutex<HashMap<ProjectionSource, Arc<Projection2D>>>,
}

impl Computed {
    fn new(analysis: Arc<Analysis>) -> Self {
        let config_hash = analysis.config().hash();
        Computed { analysis, config_hash, projections: Mutex::new(HashMap::new()) }
    }

    pub fn projection(&self, source: ProjectionSource) -> Result<Arc<Projection2D>, PcaError> {
        if let Some(p) = self.projections.lock().unwrap().get(&source) {
            return Ok(p.clone());
        }
        let p = Arc::new(project_2d(self.analysis.bundle(), self.analysis.profiles(), source)?);
        self.projections.lock().unwrap().insert(source, p.clone());
        Ok(p)
    }

    pub fn all_members(&self) -> Vec<InstanceId> {
        self.analysis.profiles().iter().map(|p| p.instance).collect()
    }
}

#[derive(Debug, Clone)]
struct Status {
    state: ComputeState,
    error: Option<String>,
    pending_hash: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusReport {
    pub state: ComputeState,
    pub revision: u64,
    pub config_hash: Option<String>,
    pub config: Option<DifficultyConfig>,
    pub pending_config_hash: Option<String>,
    pub progress: Progress,
    pub error: Option<String>,
}

/// What a compute request did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeOutcome {
    /// The requested config is already active.
    Unchanged,
    /// Reused an earlier result for the same config.
    Cached,
    Computed,
}

/// One bundle, its active computation, and its subsets.
pub struct Session {
    bundle: Arc<EmbeddingBundle>,
    opts: SessionOptions,
    active: RwLock<Option<Arc<Computed>>>,
    results: Mutex<HashMap<u32, Arc<Analysis>>>,
    status: Mutex<Status>,
    compute_gate: Mutex<()>,
    progress: Arc<AtomicUsize>,
    total: AtomicUsize,
    compute_revision: AtomicU64,
    subsets: SubsetManager,
    stale_subsets: Vec<String>,
}

impl Session {
    pub fn new(bundle: Arc<EmbeddingBundle>, opts: SessionOptions) -> Result<Self, SubsetError> {
        let fingerprint = bundle.fingerprint();
        let (subsets, stale_subsets) = match opts.subsets_path.as_deref().filter(|p| p.exists()) {
            Some(path) => {
                let loaded = load_store(path, fingerprint)?;
                (SubsetManager::from_store(loaded.store, fingerprint)?, loaded.stale)
            }
            None => (SubsetManager::new(fingerprint), Vec::new()),
        };
        Ok(Session {
            bundle,
            opts,
            active: RwLock::new(None),
            results: Mutex::new(HashMap::new()),
            status: Mutex::new(Status { state: ComputeState::Idle, error: None, pending_hash: None }),
            compute_gate: Mutex::new(()),
            progress: Arc::new(AtomicUsize::new(0)),
            total: AtomicUsize::new(0),
            compute_revision: AtomicU64::new(0),
            subsets,
            stale_subsets,
        })
    }

    pub fn bundle(&self) -> &Arc<EmbeddingBundle> {
        &self.bundle
    }

    pub fn subsets(&self) -> &SubsetManager {
        &self.subsets
    }

    pub fn subsets_path(&self) -> Option<&std::path::Path> {
        self.opts.subsets_path.as_deref()
    }

    pub fn stale_subsets(&self) -> &[String] {
        &self.stale_subsets
    }

    /// Bumped by every change of the active computation and every subset mutation.
    pub fn revision(&self) -> u64 {
        self.compute_revision.load(Ordering::SeqCst) + self.subsets.revision()
    }

    pub fn active(&self) -> Option<Arc<Computed>> {
        self.active.read().unwrap().clone()
    }

    pub fn status(&self) -> StatusReport {
        let st = self.status.lock().unwrap().clone();
        let active = self.active();
        StatusReport {
            state: st.state,
            revision: self.revision(),
            config_hash: active.as_ref().map(|a| format!("{:08x}", a.config_hash)),
            config: active.as_ref().map(|a| a.analysis.config().clone()),
            pending_config_hash: st.pending_hash.map(|h| format!("{h:08x}")),
            progress: Progress { done: self.progress.load(Ordering::Relaxed), total: self.total.load(Ordering::Relaxed) },
            error: st.error,
        }
    }

    /// Marks a compute as pending so status polls see it before the worker starts.
    pub fn mark_pending(&self, config: &DifficultyConfig) {
        let mut st = self.status.lock().unwrap();
        st.state = ComputeState::Running;
        st.error = None;
        st.pending_hash = Some(config.hash());
    }

    /// Runs (or reuses) the computation for `config` and makes it active.
    /// Blocking; concurrent calls are serialized. Readers keep seeing the
    /// previous result until the new one is swapped in whole.
    pub fn compute(&self, config: DifficultyConfig) -> Result<ComputeOutcome, DifficultyError> {
        config.validate()?;
        let _gate = self.compute_gate.lock().unwrap();
        let hash = config.hash();
        self.mark_pending(&config);
        let finish = |state: ComputeState, error: Option<String>| {
            let mut st = self.status.lock().unwrap();
            st.state = state;
            st.error = error;
            st.pending_hash = None;
        };
        if self.active().is_some_and(|a| a.config_hash == hash) {
            finish(ComputeState::Ready, None);
            return Ok(ComputeOutcome::Unchanged);
        }
        let cached = self.results.lock().unwrap().get(&hash).cloned();
        let (analysis, outcome) = match cached {
            Some(a) => (a, ComputeOutcome::Cached),
            None => {
                self.progress.store(0, Ordering::Relaxed);
                self.total.store(Analysis::planned_work(&self.bundle, &config), Ordering::Relaxed);
                match Analysis::run(self.bundle.clone(), config, self.opts.cache_dir.as_deref(), Some(&self.progress)) {
                    Ok(a) => {
                        let a = Arc::new(a);
                        self.results.lock().unwrap().insert(hash, a.clone());
                        (a, ComputeOutcome::Computed)
                    }
                    Err(e) => {
                        finish(ComputeState::Failed, Some(e.to_string()));
                        return Err(e);
                    }
                }
            }
        };
        *self.active.write().unwrap() = Some(Arc::new(Computed::new(analysis)));
        self.compute_revision.fetch_add(1, Ordering::SeqCst);
        finish(ComputeState::Ready, None);
        Ok(outcome)
    }
}
