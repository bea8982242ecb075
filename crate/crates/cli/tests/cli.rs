mod common;

use std::fs;
use std::sync::Arc;

use common::{bin, run, stderr, stdout, synth, Server};
use difflens_core::dataset::{load_bundle, Expectations};
use difflens_core::difficulty::{Analysis, DifficultyConfig};
use difflens_core::flow::flow_for;
use difflens_core::ids::InstanceId;
use difflens_core::knn::IndexMode;
use serde_json::{json, Value};

fn separated_spec() -> Value {
    json!({
        "dataset_name": "separated", "seed": 7, "num_classes": 4, "num_layers": 2,
        "n_train": 200, "n_test": 60, "input_dim": 8, "layer_dim": 8,
        "separation": 10.0, "noise": 0.0
    })
}

fn noisy_spec() -> Value {
    json!({
        "dataset_name": "noisy", "seed": 3, "num_classes": 3, "num_layers": 2,
        "n_train": 150, "n_test": 45, "input_dim": 8, "layer_dim": 8,
        "late_separators": 3, "mislabeled": 3, "annotators": 3
    })
}

fn last_stderr_json(o: &std::process::Output) -> Value {
    let err = stderr(o);
    let line = err.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn help_matches_snapshots() {
    let cases: [(&[&str], &str); 6] = [
        (&["--help"], include_str!("snapshots/help.txt")),
        (&["validate", "--help"], include_str!("snapshots/help_validate.txt")),
        (&["compute", "--help"], include_str!("snapshots/help_compute.txt")),
        (&["serve", "--help"], include_str!("snapshots/help_serve.txt")),
        (&["export", "--help"], include_str!("snapshots/help_export.txt")),
        (&["synth", "gen", "--help"], include_str!("snapshots/help_synth_gen.txt")),
    ];
    for (args, expected) in cases {
        let o = run(args);
        assert!(o.status.success(), "{args:?}");
        assert_eq!(stdout(&o), expected, "help drifted for {args:?}");
    }
}

#[test]
fn separated_clusters_are_perfectly_easy() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &separated_spec());
    let exp = Expectations::read(&bundle).unwrap();
    assert!(exp.exact);
    assert_eq!(exp.expected_accuracy, 1.0);

    let o = run(&["compute", bundle.to_str().unwrap(), "--exact", "--k", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("accuracy     100.00% (60/60)"), "{text}");
    assert!(text.contains("mean data    0.0000"), "{text}");
    assert!(text.contains("mean model   0.0000"), "{text}");

    let o = run(&["compute", bundle.to_str().unwrap(), "--exact", "--k", "10", "--json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["stats"]["accuracy"], 1.0);
    assert_eq!(v["stats"]["mean_data_kdn"], 0.0);
    assert_eq!(v["profiled"]["test"], 60);
}

#[test]
fn compute_output_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &noisy_spec());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&["compute", bundle.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let first = fs::read(&a).unwrap();
    assert!(!first.is_empty());
    assert_eq!(first, fs::read(&b).unwrap());
}

#[test]
fn validate_reports_truncated_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &separated_spec());
    let o = run(&["validate", bundle.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: "));

    let matrix = bundle.join("matrices/test_layer_1.emb");
    let bytes = fs::read(&matrix).unwrap();
    fs::write(&matrix, &bytes[..bytes.len() - 7]).unwrap();
    let o = run(&["validate", bundle.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("test_layer_1.emb"), "{}", stdout(&o));
    let err = last_stderr_json(&o);
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("test_layer_1.emb"));

    let o = run(&["validate", bundle.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!report["violations"].as_array().unwrap().is_empty());

    let o = run(&["compute", bundle.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_are_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &separated_spec());
    let b = bundle.to_str().unwrap();
    for args in [
        vec!["compute", b, "--bogus"],
        vec!["compute", b, "--k", "0"],
        vec!["compute", b, "--quantile", "0.5", "--data-threshold", "0.2"],
        vec!["export", b, "--what", "nothing"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(3), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["exit_code"], 3);
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

#[test]
fn invalid_synth_spec_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, json!({"seed": 1, "num_classes": 1, "num_layers": 2, "n_train": 10, "n_test": 5}).to_string()).unwrap();
    let o = run(&["synth", "gen", spec.to_str().unwrap(), "-o", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(last_stderr_json(&o)["error"], "invalid_spec");

    fs::write(&spec, "{not json").unwrap();
    let o = run(&["synth", "gen", spec.to_str().unwrap(), "-o", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cli_stats_match_api_summary() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &noisy_spec());
    let o = run(&["compute", bundle.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cli: Value = serde_json::from_slice(&o.stdout).unwrap();

    let server = Server::start(&bundle, &["--precompute"]);
    let (status, body) = server.get("/api/summary");
    assert_eq!(status, 200, "{body}");
    let api: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(cli["stats"], api["stats"]);
    assert_eq!(cli["thresholds"], api["thresholds"]);
    let (status, body) = server.get("/api/status");
    assert_eq!(status, 200);
    let st: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(st["status"]["config_hash"], cli["config_hash"]);
}

#[test]
fn export_flow_matches_library_and_honours_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &noisy_spec());
    let b = bundle.to_str().unwrap();

    let config = DifficultyConfig::default();
    let analysis = Analysis::run(Arc::new(load_bundle(&bundle).unwrap()), config, None, None).unwrap();
    let all: Vec<InstanceId> = analysis.profiles().iter().map(|p| p.instance).collect();

    let o = run(&["export", b, "--what", "flow"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let exported: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(exported, serde_json::to_value(flow_for(&analysis, &all).unwrap()).unwrap());

    let picked = &all[..10];
    let list = dir.path().join("subset.csv");
    let mut text = String::from("instance_id\n");
    for id in picked {
        text.push_str(&format!("{id}\n"));
    }
    fs::write(&list, text).unwrap();
    let out = dir.path().join("flow.json");
    let o = run(&["export", b, "--what", "flow", "--subset", list.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let exported: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(exported["num_instances"], 10);
    assert_eq!(exported, serde_json::to_value(flow_for(&analysis, picked).unwrap()).unwrap());

    let o = run(&["export", b, "--what", "profiles", "--subset", list.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 11);

    let o = run(&["export", b, "--what", "projection", "--source", "layer:layer_0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), all.len() + 1);

    fs::write(&list, "train/0\n").unwrap();
    let o = run(&["export", b, "--what", "pcp", "--subset", list.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "train rows are not profiled by default");
}

#[test]
fn cache_dir_from_environment_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &noisy_spec());
    let cache = dir.path().join("cache");
    let o = bin().args(["compute", bundle.to_str().unwrap()]).env("DIFFLENS_CACHE_DIR", &cache).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(files.iter().any(|f| f.ends_with(".dlix")), "{files:?}");

    let exact = dir.path().join("cache-exact");
    let o = bin().args(["compute", bundle.to_str().unwrap(), "--exact"]).env("DIFFLENS_CACHE_DIR", &exact).output().unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&exact).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn serve_without_precompute_reports_not_computed() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &separated_spec());
    let server = Server::start(&bundle, &[]);
    let (status, body) = server.get("/api/flow");
    assert_eq!(status, 409, "{body}");
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["code"], "not_computed");
    let (status, _) = server.get("/api/nope");
    assert_eq!(status, 404);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &noisy_spec());
    let cfg = dir.path().join("cfg.json");
    let mut base = DifficultyConfig { k: 5, ..DifficultyConfig::default() };
    base.index.mode = IndexMode::Exact;
    fs::write(&cfg, serde_json::to_string(&base).unwrap()).unwrap();
    let o = run(&["compute", bundle.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config_hash"], format!("{:08x}", base.hash()));

    let o = run(&["compute", bundle.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--k", "7", "--json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    base.k = 7;
    assert_eq!(v["config_hash"], format!("{:08x}", base.hash()));

    fs::write(&cfg, r#"{"k": 5, "surprise": true}"#).unwrap();
    let o = run(&["compute", bundle.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
