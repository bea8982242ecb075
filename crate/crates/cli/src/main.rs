mod args;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command, ConfigArgs, ExportKind, ReferenceArg, SplitArg, SynthCommand, ThresholdModeArg};
use difflens_core::dataset::{load_bundle, synth_generate, validate_bundle, BundleError, EmbeddingBundle, SynthError, SynthSpec};
use difflens_core::difficulty::{
    profiles_to_csv, Analysis, DifficultyConfig, DifficultyError, Reference, ThresholdMode, DEFAULT_QUANTILE, DEFAULT_THRESHOLD,
};
use difflens_core::flow::{flow_for, pcp_for};
use difflens_core::ids::{InstanceId, Split};
use difflens_core::knn::IndexMode;
use difflens_core::projection::{project_2d, ProjectionSource};
use difflens_core::subset::{load_store, parse_id_list};
use difflens_core::summary::{pattern_tally, stats};
use difflens_server::{Session, SessionOptions};

const EXIT_RUNTIME: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 3;

#[derive(Debug)]
struct CliError {
    exit: u8,
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(exit: u8, code: &'static str, message: impl Into<String>) -> Self {
        CliError { exit, code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        CliError::new(EXIT_USAGE, "usage", message)
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Io { .. } => CliError::new(EXIT_RUNTIME, "io", e.to_string()),
            _ => CliError::new(EXIT_VALIDATION, "invalid_bundle", e.to_string()),
        }
    }
}

impl From<DifficultyError> for CliError {
    fn from(e: DifficultyError) -> Self {
        match e {
            DifficultyError::InvalidConfig { .. } => CliError::new(EXIT_USAGE, "invalid_config", e.to_string()),
            _ => CliError::new(EXIT_RUNTIME, "compute_failed", e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            report(&CliError::usage(first));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit)
        }
    }
}

/// One JSON object on one line of stderr.
fn report(e: &CliError) {
    eprintln!("{}", json!({ "error": e.code, "message": e.message, "exit_code": e.exit }));
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Validate { bundle, json } => validate(&bundle, json),
        Command::Synth { command: SynthCommand::Gen { spec, out } } => synth(&spec, &out),
        Command::Compute { bundle, config, out, json } => compute(&bundle, &config, out.as_deref(), json),
        Command::Serve { bundle, config, host, port, precompute, subsets } => serve(&bundle, &config, &host, port, precompute, subsets),
        Command::Export { bundle, what, subset, source, config, out } => {
            export(&bundle, what, subset.as_deref(), &source, &config, out.as_deref())
        }
    }
}

fn validate(path: &Path, as_json: bool) -> Result<u8> {
    let report = validate_bundle(path)?;
    if as_json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        for v in &report.violations {
            println!("{}: {v}", serde_json::to_value(v.kind).expect("kind serializes").as_str().unwrap_or(""));
        }
        if report.is_empty() {
            println!("ok: {}", path.display());
        }
    }
    if report.is_empty() {
        Ok(0)
    } else {
        let first = &report.violations[0];
        Err(CliError::new(EXIT_VALIDATION, "invalid_bundle", format!("{} violation(s); first: {first}", report.violations.len())))
    }
}

fn synth(spec_path: &Path, out: &Path) -> Result<u8> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::new(EXIT_RUNTIME, "io", format!("{}: {e}", spec_path.display())))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_VALIDATION, "invalid_spec", format!("{}: {e}", spec_path.display())))?;
    let (bundle, exp) = synth_generate(&spec, out).map_err(|e| match e {
        SynthError::Infeasible(_) => CliError::new(EXIT_VALIDATION, "invalid_spec", e.to_string()),
        SynthError::Bundle(b) => b.into(),
        SynthError::Io { .. } => CliError::new(EXIT_RUNTIME, "io", e.to_string()),
    })?;
    println!(
        "wrote {} ({} train / {} test, {} classes, {} layers, expected accuracy {:.2}%)",
        out.display(),
        bundle.split_len(Split::Train),
        bundle.split_len(Split::Test),
        bundle.num_classes(),
        bundle.num_layers(),
        exp.expected_accuracy * 100.0
    );
    Ok(0)
}

fn reference(r: ReferenceArg) -> Reference {
    match r {
        ReferenceArg::GroundTruth => Reference::GroundTruth,
        ReferenceArg::FinalPrediction => Reference::FinalPrediction,
    }
}

fn build_config(args: &ConfigArgs) -> Result<DifficultyConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::new(EXIT_RUNTIME, "io", format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_USAGE, "invalid_config", format!("{}: {e}", path.display())))?
        }
        None => DifficultyConfig::default(),
    };
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if args.exact {
        cfg.index.mode = IndexMode::Exact;
    }
    if let Some(t) = args.trees {
        cfg.index.trees = t;
    }
    if let Some(m) = args.leaf_size {
        cfg.index.leaf_size = m;
    }
    if let Some(s) = args.seed {
        cfg.index.seed = s;
    }
    let fixed_given = args.data_threshold.is_some() || args.model_threshold.is_some() || args.human_threshold.is_some();
    let mode = args.threshold_mode.or(if args.quantile.is_some() {
        Some(ThresholdModeArg::Quantile)
    } else if fixed_given {
        Some(ThresholdModeArg::Fixed)
    } else {
        None
    });
    match mode {
        Some(ThresholdModeArg::Fixed) => {
            if args.quantile.is_some() {
                return Err(CliError::usage("--quantile only applies with --threshold-mode quantile"));
            }
            let (d, m, h) = match cfg.thresholds {
                ThresholdMode::Fixed { data, model, human } => (data, model, human),
                ThresholdMode::Quantile { .. } => (DEFAULT_THRESHOLD, DEFAULT_THRESHOLD, DEFAULT_THRESHOLD),
            };
            cfg.thresholds = ThresholdMode::Fixed {
                data: args.data_threshold.unwrap_or(d),
                model: args.model_threshold.unwrap_or(m),
                human: args.human_threshold.unwrap_or(h),
            };
        }
        Some(ThresholdModeArg::Quantile) => {
            if fixed_given {
                return Err(CliError::usage("--data/model/human-threshold only apply with --threshold-mode fixed"));
            }
            let q = match cfg.thresholds {
                ThresholdMode::Quantile { q } => q,
                ThresholdMode::Fixed { .. } => DEFAULT_QUANTILE,
            };
            cfg.thresholds = ThresholdMode::Quantile { q: args.quantile.unwrap_or(q) };
        }
        None => {}
    }
    if let Some(r) = args.data_reference {
        cfg.data_reference = reference(r);
    }
    if let Some(r) = args.layer_reference {
        cfg.layer_reference = reference(r);
    }
    if let Some(splits) = &args.splits {
        let mut s: Vec<Split> = splits
            .iter()
            .map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            })
            .collect();
        s.sort_unstable();
        s.dedup();
        cfg.profile_splits = s;
    }
    if args.standardize {
        cfg.standardize = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn analyze(bundle_path: &Path, args: &ConfigArgs) -> Result<Analysis> {
    let config = build_config(args)?;
    let bundle = Arc::new(load_bundle(bundle_path)?);
    if let Some(dir) = &args.cache_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::new(EXIT_RUNTIME, "io", format!("{}: {e}", dir.display())))?;
    }
    log::info!("computing profiles for {}", bundle_path.display());
    Ok(Analysis::run(bundle, config, args.cache_dir.as_deref(), None)?)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| CliError::new(EXIT_RUNTIME, "io", format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::new(EXIT_RUNTIME, "io", e.to_string())),
    }
}

fn compute(bundle_path: &Path, args: &ConfigArgs, out: Option<&Path>, as_json: bool) -> Result<u8> {
    let analysis = analyze(bundle_path, args)?;
    if let Some(path) = out {
        write_output(Some(path), analysis.profiles_csv().as_bytes())?;
    }
    let ids: Vec<InstanceId> = analysis.profiles().iter().map(|p| p.instance).collect();
    let s = stats(&analysis, &ids).expect("profiled ids");
    let patterns = pattern_tally(&analysis, &ids).expect("profiled ids");
    let b = analysis.bundle();
    let count = |split| ids.iter().filter(|i| i.split == split).count();
    if as_json {
        let body = json!({
            "dataset": b.manifest().dataset_name,
            "num_classes": b.num_classes(),
            "num_layers": b.num_layers(),
            "profiled": { "train": count(Split::Train), "test": count(Split::Test) },
            "config_hash": format!("{:08x}", analysis.config().hash()),
            "stats": s,
            "thresholds": analysis.thresholds(),
            "patterns": patterns,
        });
        println!("{body}");
        return Ok(0);
    }
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", v * 100.0));
    let num = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("dataset      {} ({} classes, {} layers)", b.manifest().dataset_name, b.num_classes(), b.num_layers());
    println!("profiled     {} instances ({} train, {} test)", s.size, count(Split::Train), count(Split::Test));
    println!("accuracy     {} ({}/{})", pct(s.accuracy), s.correct, s.size);
    println!("mean data    {}", num(s.mean_data_kdn));
    println!("mean model   {}", num(s.mean_model_difficulty));
    println!("mean human   {} ({} annotated)", num(s.mean_human_difficulty), s.with_human);
    println!("never aligned {}", s.never_aligned);
    let t = analysis.thresholds();
    println!("thresholds   data {} model {} human {}", t.data, t.model, t.human.map_or("n/a".into(), |h| h.to_string()));
    println!("patterns");
    for p in &patterns {
        println!("  {:<13}{}", p.code.code(), p.count);
    }
    Ok(0)
}

fn serve(bundle_path: &Path, args: &ConfigArgs, host: &str, port: u16, precompute: bool, subsets: Option<PathBuf>) -> Result<u8> {
    let config = build_config(args)?;
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .or_else(|_| {
            use std::net::ToSocketAddrs;
            (host, port).to_socket_addrs().ok().and_then(|mut a| a.next()).ok_or(())
        })
        .map_err(|_| CliError::usage(format!("cannot resolve host `{host}`")))?;
    let bundle = Arc::new(load_bundle(bundle_path)?);
    let opts = SessionOptions {
        cache_dir: args.cache_dir.clone(),
        subsets_path: Some(subsets.unwrap_or_else(|| bundle_path.join(difflens_core::subset::STORE_FILE))),
    };
    let session = Arc::new(Session::new(bundle, opts).map_err(|e| CliError::new(EXIT_RUNTIME, "subset_store", e.to_string()))?);
    if precompute {
        session.compute(config)?;
        log::info!("profiles ready");
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(EXIT_RUNTIME, "runtime", e.to_string()))?;
    runtime
        .block_on(difflens_server::serve(session, addr, |bound| eprintln!("listening on http://{bound}")))
        .map_err(|e| CliError::new(EXIT_RUNTIME, "io", format!("{addr}: {e}")))?;
    Ok(0)
}

fn subset_members(spec: &str, bundle: &EmbeddingBundle) -> Result<Vec<InstanceId>> {
    let io = |p: &str, e: std::io::Error| CliError::new(EXIT_RUNTIME, "io", format!("{p}: {e}"));
    if let Some((store, id)) = spec.rsplit_once('#') {
        let loaded =
            load_store(Path::new(store), bundle.fingerprint()).map_err(|e| CliError::new(EXIT_RUNTIME, "subset_store", e.to_string()))?;
        if loaded.stale.iter().any(|s| s == id) {
            log::warn!("subset {id} was recorded against a different bundle");
        }
        return loaded
            .store
            .subsets
            .into_iter()
            .find(|s| s.id == id)
            .map(|s| s.members)
            .ok_or_else(|| CliError::usage(format!("no subset `{id}` in {store}")));
    }
    let text = fs::read_to_string(spec).map_err(|e| io(spec, e))?;
    parse_id_list(&text).map_err(|e| CliError::new(EXIT_VALIDATION, "invalid_subset", format!("{spec}: {e}")))
}

fn export(bundle_path: &Path, what: ExportKind, subset: Option<&str>, source: &str, args: &ConfigArgs, out: Option<&Path>) -> Result<u8> {
    let analysis = analyze(bundle_path, args)?;
    let members = match subset {
        Some(spec) => subset_members(spec, analysis.bundle())?,
        None => analysis.profiles().iter().map(|p| p.instance).collect(),
    };
    if let Some(id) = members.iter().find(|&&id| analysis.profile(id).is_none()) {
        return Err(CliError::new(EXIT_VALIDATION, "invalid_subset", format!("{id} is not a profiled instance")));
    }
    let to_json = |v: serde_json::Value| {
        let mut s = v.to_string();
        s.push('\n');
        s.into_bytes()
    };
    let runtime = |e: &dyn std::fmt::Display| CliError::new(EXIT_RUNTIME, "export_failed", e.to_string());
    let bytes = match what {
        ExportKind::Profiles => {
            let profiles: Vec<_> = members.iter().map(|&id| analysis.profile(id).unwrap().clone()).collect();
            profiles_to_csv(&profiles, analysis.bundle().num_spaces()).into_bytes()
        }
        ExportKind::Flow => to_json(serde_json::to_value(flow_for(&analysis, &members).map_err(|e| runtime(&e))?).unwrap()),
        ExportKind::Pcp => to_json(serde_json::to_value(pcp_for(&analysis, &members).map_err(|e| runtime(&e))?).unwrap()),
        ExportKind::Projection => {
            let source = ProjectionSource::parse_for(source, analysis.bundle()).map_err(|e| CliError::usage(e.to_string()))?;
            let mut proj = project_2d(analysis.bundle(), analysis.profiles(), source).map_err(|e| runtime(&e))?;
            proj.points.retain(|p| members.binary_search(&p.id).is_ok());
            proj.to_csv().into_bytes()
        }
    };
    write_output(out, &bytes)?;
    Ok(0)
}
