use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use difflens_core::dataset::{load_bundle, synth_generate, SynthSpec};
use difflens_core::flow::flow_for;
use difflens_core::projection::{project_2d, ProjectionSource};
use difflens_server::{router, Session, SessionOptions, REVISION_HEADER};

struct Fixture {
    _dir: tempfile::TempDir,
    session: Arc<Session>,
    app: Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(21, 4, 2, 200, 60);
    spec.annotators = 5;
    spec.late_separators = 4;
    spec.mislabeled = 4;
    spec.confusable = 4;
    spec.thumbnails = true;
    let bundle_dir = dir.path().join("bundle");
    synth_generate(&spec, &bundle_dir).unwrap();
    let bundle = Arc::new(load_bundle(&bundle_dir).unwrap());
    let opts = SessionOptions { cache_dir: None, subsets_path: Some(dir.path().join("subsets.json")) };
    let session = Arc::new(Session::new(bundle, opts).unwrap());
    let app = router(session.clone());
    Fixture { _dir: dir, session, app }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, HeaderMap, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, _, b) = call(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = format!("{}/schemas/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&doc).unwrap()
}

fn assert_valid(name: &str, value: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{value}");
}

async fn compute(app: &Router, config: Value) -> Value {
    let (s, body) = post_json(app, "/api/compute?wait=true", config).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_valid("compute", &body);
    body
}

const DERIVED: [&str; 8] = [
    "/api/summary",
    "/api/confusion",
    "/api/flow",
    "/api/pcp",
    "/api/projection",
    "/api/patterns",
    "/api/instances",
    "/api/neighbors?instance=test/0",
];

#[tokio::test]
async fn derived_endpoints_wait_for_compute() {
    let f = fixture();
    for uri in DERIVED {
        let (s, body) = get_json(&f.app, uri).await;
        assert_eq!(s, StatusCode::CONFLICT, "{uri}");
        assert_eq!(body["code"], "not_computed");
        assert_valid("error", &body);
    }
    let (s, body) = get_json(&f.app, "/api/status").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"]["state"], "idle");
    assert_valid("status", &body);
}

#[tokio::test]
async fn compute_is_cached_by_config() {
    let f = fixture();
    let first = compute(&f.app, json!({"k": 5})).await;
    assert_eq!(first["outcome"], "computed");
    let rev = f.session.revision();
    let again = compute(&f.app, json!({"k": 5})).await;
    assert_eq!(again["outcome"], "unchanged");
    assert_eq!(f.session.revision(), rev);

    let changed = compute(&f.app, json!({"k": 7})).await;
    assert_eq!(changed["outcome"], "computed");
    assert!(f.session.revision() > rev);
    let (_, inst) = get_json(&f.app, "/api/neighbors?instance=test/0&layer=input").await;
    assert_eq!(inst["k"], 7);

    let back = compute(&f.app, json!({"k": 5})).await;
    assert_eq!(back["outcome"], "cached");
    assert_eq!(f.session.status().config.unwrap().k, 5);
}

#[tokio::test]
async fn config_errors_name_the_field() {
    let f = fixture();
    let (s, body) = post_json(&f.app, "/api/compute?wait=true", json!({"k": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "invalid_config");
    assert_eq!(body["details"]["field"], "k");
    assert_valid("error", &body);
    let (s, body) = post_json(&f.app, "/api/compute", json!({"thresholds": {"mode": "quantile", "q": 2.0}})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["details"]["field"], "thresholds.q");
    let (s, body) = post_json(&f.app, "/api/compute", json!({"kk": 3})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["details"]["field"], "kk");
    let (s, _) = post_json(&f.app, "/api/compute?wait=maybe", json!({})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn background_compute_reports_progress() {
    let f = fixture();
    let (s, body) = post_json(&f.app, "/api/compute", json!({})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_valid("compute", &body);
    let mut state = String::new();
    for _ in 0..600 {
        let (_, st) = get_json(&f.app, "/api/status").await;
        assert_valid("status", &st);
        state = st["status"]["state"].as_str().unwrap().to_string();
        if state == "ready" {
            assert_eq!(st["status"]["progress"]["done"], 60);
            assert_eq!(st["status"]["progress"]["total"], 60);
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    assert_eq!(state, "ready");
}

#[tokio::test]
async fn every_get_is_deterministic_and_schema_valid() {
    let f = fixture();
    compute(&f.app, json!({})).await;
    let (s, sub) = post_json(
        &f.app,
        "/api/subsets",
        json!({"action": "create", "name": "wrong", "selection": {"kind": "brush", "data": {"lo": 0.0, "hi": 1.0}}}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let sid = sub["id"].as_str().unwrap().to_string();
    let cases = [
        ("status", "/api/status".to_string()),
        ("summary", "/api/summary".to_string()),
        ("summary", format!("/api/summary?pair=data-human&bins=5&subset={sid}")),
        ("summary", "/api/summary?pair=model-human".to_string()),
        ("confusion", "/api/confusion".to_string()),
        ("flow", "/api/flow".to_string()),
        ("flow", format!("/api/flow?subset={sid}")),
        ("pcp", "/api/pcp".to_string()),
        ("projection", "/api/projection?source=pattern".to_string()),
        ("projection", "/api/projection?source=pixel".to_string()),
        ("projection", "/api/projection?source=layer:layer_1".to_string()),
        ("patterns", "/api/patterns".to_string()),
        ("instances", "/api/instances?sort=kdn:layer_0&order=desc&page=1&page_size=7".to_string()),
        ("neighbors", "/api/neighbors?instance=test/5&layer=layer_1&k=4".to_string()),
        ("subsets", "/api/subsets".to_string()),
        ("subset", format!("/api/subsets/{sid}")),
    ];
    for (name, uri) in cases {
        let (s, h, first) = call(&f.app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&first));
        assert_eq!(h[REVISION_HEADER], f.session.revision().to_string());
        for _ in 0..2 {
            let (_, _, again) = call(&f.app, "GET", &uri, None).await;
            assert_eq!(again, first, "{uri}");
        }
        assert_valid(name, &serde_json::from_slice(&first).unwrap());
    }
}

#[tokio::test]
async fn flow_and_projection_pass_through() {
    let f = fixture();
    compute(&f.app, json!({})).await;
    let a = f.session.active().unwrap();
    let all = a.all_members();
    let (_, _, bytes) = call(&f.app, "GET", "/api/flow", None).await;
    assert_eq!(bytes, serde_json::to_vec(&flow_for(&a.analysis, &all).unwrap()).unwrap());

    let (_, body) = get_json(&f.app, "/api/projection?source=pattern").await;
    let proj = project_2d(a.analysis.bundle(), a.analysis.profiles(), ProjectionSource::DifficultyPattern).unwrap();
    let points = body["points"].as_array().unwrap();
    assert_eq!(points.len(), proj.points.len());
    for (got, want) in points.iter().zip(&proj.points) {
        assert_eq!(got["id"], want.id.to_string());
        assert_eq!(got["x"].as_f64().unwrap(), want.x);
        assert_eq!(got["y"].as_f64().unwrap(), want.y);
    }
}

#[tokio::test]
async fn summaries_conserve_mass() {
    let f = fixture();
    compute(&f.app, json!({})).await;
    let (_, sum) = get_json(&f.app, "/api/summary?pair=data-model").await;
    let total: u64 =
        sum["heatmap"]["counts"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 60);
    assert_eq!(sum["heatmap"]["y_bins"], 3);
    let (_, conf) = get_json(&f.app, "/api/confusion").await;
    assert_eq!(conf["total"], 60);
    assert_eq!(conf["correct"], sum["stats"]["correct"]);
    let (_, pats) = get_json(&f.app, "/api/patterns").await;
    let n: u64 = pats["patterns"].as_array().unwrap().iter().map(|p| p["count"].as_u64().unwrap()).sum();
    assert_eq!(n, 60);
    let (_, pcp) = get_json(&f.app, "/api/pcp").await;
    assert_eq!(pcp["axes"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn neighbor_evidence_and_images() {
    let f = fixture();
    compute(&f.app, json!({})).await;
    let (s, ev) = get_json(&f.app, "/api/neighbors?instance=test/3&layer=layer_0").await;
    assert_eq!(s, StatusCode::OK);
    let counts: u64 = ev["class_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 10);
    let d: Vec<f64> = ev["neighbors"].as_array().unwrap().iter().map(|n| n["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    let img = ev["neighbors"][0]["image"].as_str().unwrap().to_string();
    assert!(img.starts_with("/api/images/train/"));
    let (s, h, bytes) = call(&f.app, "GET", &img, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["content-type"], "image/png");
    assert_eq!(&bytes[1..4], b"PNG");

    for (uri, code) in [
        ("/api/neighbors?instance=test/3&layer=nope", "unknown_layer"),
        ("/api/neighbors?instance=test/999", "unknown_instance"),
        ("/api/neighbors?instance=test/3&k=11", "bad_request"),
        ("/api/images/test/9999", "no_image"),
        ("/api/summary?pair=data-data", "bad_request"),
        ("/api/summary?bogus=1", "bad_request"),
        ("/api/summary?subset=s404", "unknown_subset"),
        ("/api/nothing", "not_found"),
    ] {
        let (s, body) = get_json(&f.app, uri).await;
        assert!(s.is_client_error(), "{uri}");
        assert_eq!(body["code"], code, "{uri}");
        assert_valid("error", &body);
    }
}

#[tokio::test]
async fn subsets_follow_manager_semantics() {
    let f = fixture();
    let (s, body) = post_json(&f.app, "/api/subsets", json!({"action": "create", "selection": {"kind": "all"}})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "not_computed");
    compute(&f.app, json!({})).await;

    let create = |sel: Value| json!({"action": "create", "selection": sel});
    let (_, a) =
        post_json(&f.app, "/api/subsets", create(json!({"kind": "confusion_cells", "cells": [[0, 0], [1, 1], [2, 2], [3, 3]]}))).await;
    let (_, b) = post_json(&f.app, "/api/subsets", create(json!({"kind": "brush", "data": {"lo": 0.0, "hi": 0.1}}))).await;
    assert_valid("subset", &a);
    let (_, got) = get_json(&f.app, &format!("/api/subsets/{}", a["id"].as_str().unwrap())).await;
    assert_eq!(got, a);

    let (s, c) =
        post_json(&f.app, "/api/subsets", json!({"action": "combine", "a": a["id"], "b": b["id"], "op": "difference", "name": "a-b"}))
            .await;
    assert_eq!(s, StatusCode::CREATED);
    let members = |v: &Value| -> Vec<String> { v["members"].as_array().unwrap().iter().map(|m| m.as_str().unwrap().to_string()).collect() };
    let want: Vec<String> = members(&a).into_iter().filter(|m| !members(&b).contains(m)).collect();
    assert_eq!(members(&c), want);
    assert_eq!(c["provenance"]["type"], "combine");
    assert_valid("subset", &c);

    let (_, conf) = get_json(&f.app, &format!("/api/confusion?subset={}", a["id"].as_str().unwrap())).await;
    assert_eq!(conf["total"], conf["correct"]);

    let (s, saved) = post_json(&f.app, "/api/subsets", json!({"action": "save"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("subset_save", &saved);
    let reopened = Session::new(
        f.session.bundle().clone(),
        SessionOptions { cache_dir: None, subsets_path: Some(saved["saved"].as_str().unwrap().into()) },
    )
    .unwrap();
    assert_eq!(reopened.subsets().list(), f.session.subsets().list());

    let (s, body) =
        post_json(&f.app, "/api/subsets", create(json!({"kind": "heatmap_cells", "pair": "data-model", "bins": 10, "cells": [[0, 9]]})))
            .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["details"]["field"], "selection.cells");
    let (s, body) = post_json(&f.app, "/api/subsets", json!({"action": "explode"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_valid("error", &body);
    let (s, _) = post_json(&f.app, "/api/subsets", json!({"action": "delete", "id": b["id"]})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = get_json(&f.app, &format!("/api/subsets/{}", b["id"].as_str().unwrap())).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let f = fixture();
    let req = Request::builder().uri("/api/status").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = f.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[test]
fn schemas_reject_malformed_bodies() {
    assert!(!schema("flow").is_valid(&json!({})));
    assert!(!schema("error").is_valid(&json!({"code": "x", "message": "m"})));
    assert!(!schema("patterns")
        .is_valid(&json!({"total": 0, "thresholds": {"data": 0.5, "model": 0.5, "human": null}, "patterns": [{"code": "7", "count": 1}]})));
    assert!(schema("error").is_valid(&json!({"code": "x", "message": "m", "details": {}})));
}
