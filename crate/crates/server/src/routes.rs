use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use difflens_core::difficulty::{DifficultyConfig, ResolvedThresholds};
use difflens_core::flow::{flow_for, pcp_for};
use difflens_core::ids::{InstanceId, Split};
use difflens_core::projection::{source_label, ProjectionSource};
use difflens_core::subset::{Selection, SetOp, Subset};
use difflens_core::summary::{
    self, confusion, heatmap, instance_page, neighbor_evidence, pattern_tally, PatternCount, PerspectivePair, SortKey, DEFAULT_BINS,
};

use crate::error::ApiError;
use crate::session::{Computed, Session};

pub const REVISION_HEADER: &str = "x-difflens-revision";
const DEFAULT_PAGE_SIZE: usize = 50;
const MAX_BINS: usize = 1000;

type Q = Result<Query<BTreeMap<String, String>>, QueryRejection>;

pub fn router(session: Arc<Session>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
        .expose_headers([header::HeaderName::from_static(REVISION_HEADER)]);
    Router::new()
        .route("/api/status", get(status))
        .route("/api/compute", axum::routing::post(compute))
        .route("/api/summary", get(summary_view))
        .route("/api/confusion", get(confusion_view))
        .route("/api/flow", get(flow_view))
        .route("/api/pcp", get(pcp_view))
        .route("/api/projection", get(projection_view))
        .route("/api/patterns", get(patterns_view))
        .route("/api/instances", get(instances_view))
        .route("/api/neighbors", get(neighbors_view))
        .route("/api/subsets", get(list_subsets).post(mutate_subsets))
        .route("/api/subsets/{id}", get(get_subset))
        .route("/api/images/{split}/{index}", get(image))
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .layer(axum::middleware::map_response_with_state(session.clone(), stamp_revision))
        .layer(cors)
        .with_state(session)
}

/// Adds the revision header to responses that were not built by `json_response`.
async fn stamp_revision(State(s): State<Arc<Session>>, mut resp: Response) -> Response {
    if !resp.headers().contains_key(REVISION_HEADER) {
        resp.headers_mut().insert(REVISION_HEADER, HeaderValue::from(s.revision()));
    }
    resp
}

fn json_response<T: Serialize>(session: &Session, status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    let mut resp = (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response();
    resp.headers_mut().insert(REVISION_HEADER, HeaderValue::from(session.revision()));
    resp
}

fn ok<T: Serialize>(session: &Session, body: &T) -> Result<Response, ApiError> {
    Ok(json_response(session, StatusCode::OK, body))
}

fn params(q: Q) -> Result<BTreeMap<String, String>, ApiError> {
    q.map(|Query(m)| m).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn check_known(params: &BTreeMap<String, String>, known: &[&str]) -> Result<(), ApiError> {
    match params.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(ApiError::bad_request(format!("unknown query parameter `{k}`")).with_details(json!({ "parameter": k }))),
        None => Ok(()),
    }
}

fn parse_num<T: std::str::FromStr>(params: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    params
        .get(key)
        .map(|v| {
            v.parse().map_err(|_| {
                ApiError::bad_request(format!("`{key}` must be a non-negative integer")).with_details(json!({ "parameter": key }))
            })
        })
        .transpose()
}

fn computed(session: &Session) -> Result<Arc<Computed>, ApiError> {
    session.active().ok_or_else(ApiError::not_computed)
}

/// Members of `?subset=<id>`, or every profiled instance.
fn members(session: &Session, c: &Computed, params: &BTreeMap<String, String>) -> Result<Vec<InstanceId>, ApiError> {
    let Some(id) = params.get("subset") else {
        return Ok(c.all_members());
    };
    let subset = session.subsets().get(id)?;
    if let Some(missing) = subset.members.iter().find(|&&m| c.analysis.profile(m).is_none()) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "subset_out_of_scope",
            format!("subset {id} contains {missing}, which is not profiled"),
        )
        .with_details(json!({ "subset": id })));
    }
    Ok(subset.members)
}

async fn status(State(s): State<Arc<Session>>) -> Response {
    let b = s.bundle();
    let m = b.manifest();
    let body = json!({
        "status": s.status(),
        "dataset": {
            "name": m.dataset_name,
            "class_names": m.class_names,
            "spaces": (0..b.num_spaces()).map(|i| b.space_name(i)).collect::<Vec<_>>(),
            "n_train": m.n_train,
            "n_test": m.n_test,
            "has_annotations": m.has_annotations,
            "fingerprint": format!("{:08x}", b.fingerprint()),
        },
    });
    json_response(&s, StatusCode::OK, &body)
}

async fn compute(State(s): State<Arc<Session>>, q: Q, body: Result<Json<serde_json::Value>, JsonRejection>) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["wait"])?;
    let wait = match p.get("wait").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => return Err(ApiError::bad_request(format!("`wait` must be true or false, got `{other}`"))),
    };
    let Json(value) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let config: DifficultyConfig = serde_json::from_value(value).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()).with_details(json!({ "field": field_of(&e) }))
    })?;
    config.validate()?;
    s.mark_pending(&config);
    let worker = s.clone();
    let task = tokio::task::spawn_blocking(move || worker.compute(config));
    if !wait {
        return Ok(json_response(&s, StatusCode::ACCEPTED, &json!({ "outcome": "started", "status": s.status() })));
    }
    let outcome = task.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(json_response(&s, StatusCode::OK, &json!({ "outcome": outcome, "status": s.status() })))
}

/// Best-effort field name from a serde error message (`unknown field `kk``, `missing field`, ...).
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("").to_string()
}

#[derive(Serialize)]
struct SummaryBody {
    heatmap: summary::Heatmap,
    stats: summary::SubsetStats,
    thresholds: ResolvedThresholds,
}

async fn summary_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["pair", "bins", "subset"])?;
    let c = computed(&s)?;
    let pair: PerspectivePair = p.get("pair").map_or("data-model", String::as_str).parse()?;
    let bins = parse_num(&p, "bins")?.unwrap_or(DEFAULT_BINS);
    if bins == 0 || bins > MAX_BINS {
        return Err(ApiError::bad_request(format!("`bins` must be in 1..={MAX_BINS}")));
    }
    let m = members(&s, &c, &p)?;
    let body = SummaryBody {
        heatmap: heatmap(&c.analysis, &m, pair, bins)?,
        stats: summary::stats(&c.analysis, &m)?,
        thresholds: c.analysis.thresholds(),
    };
    ok(&s, &body)
}

async fn confusion_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["subset"])?;
    let c = computed(&s)?;
    let m = members(&s, &c, &p)?;
    ok(&s, &confusion(&c.analysis, &m)?)
}

async fn flow_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["subset"])?;
    let c = computed(&s)?;
    let m = members(&s, &c, &p)?;
    ok(&s, &flow_for(&c.analysis, &m)?)
}

async fn pcp_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["subset"])?;
    let c = computed(&s)?;
    let m = members(&s, &c, &p)?;
    ok(&s, &pcp_for(&c.analysis, &m)?)
}

#[derive(Serialize)]
struct ProjectionBody<'a> {
    source: ProjectionSource,
    label: String,
    explained_variance: &'a [f64],
    explained_ratio: f64,
    points: Vec<difflens_core::projection::ProjectedPoint>,
}

async fn projection_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["source", "subset"])?;
    let c = computed(&s)?;
    let source = ProjectionSource::parse_for(p.get("source").map_or("pattern", String::as_str), s.bundle())?;
    let m = members(&s, &c, &p)?;
    let proj = c.projection(source)?;
    let points = proj.points.iter().filter(|pt| m.binary_search(&pt.id).is_ok()).copied().collect();
    ok(
        &s,
        &ProjectionBody {
            source,
            label: source_label(s.bundle(), source),
            explained_variance: &proj.model.explained_variance,
            explained_ratio: proj.model.explained_ratio(),
            points,
        },
    )
}

#[derive(Serialize)]
struct PatternsBody {
    total: usize,
    thresholds: ResolvedThresholds,
    patterns: Vec<PatternCount>,
}

async fn patterns_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["subset"])?;
    let c = computed(&s)?;
    let m = members(&s, &c, &p)?;
    let patterns = pattern_tally(&c.analysis, &m)?;
    ok(&s, &PatternsBody { total: m.len(), thresholds: c.analysis.thresholds(), patterns })
}

fn image_url(id: InstanceId) -> String {
    format!("/api/images/{}/{}", id.split, id.index)
}

async fn instances_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["subset", "sort", "order", "page", "page_size"])?;
    let c = computed(&s)?;
    let m = members(&s, &c, &p)?;
    let key = SortKey::parse(p.get("sort").map_or("id", String::as_str), &c.analysis)?;
    let descending = match p.get("order").map(String::as_str) {
        None | Some("asc") => false,
        Some("desc") => true,
        Some(o) => return Err(ApiError::bad_request(format!("`order` must be asc or desc, got `{o}`"))),
    };
    let page = parse_num(&p, "page")?.unwrap_or(0);
    let page_size = parse_num(&p, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    let mut body = instance_page(&c.analysis, &m, key, descending, page, page_size)?;
    for row in &mut body.rows {
        row.image = row.image.as_ref().map(|_| image_url(row.profile.instance));
    }
    ok(&s, &body)
}

async fn neighbors_view(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    let p = params(q)?;
    check_known(&p, &["instance", "layer", "k", "subset"])?;
    let c = computed(&s)?;
    let id: InstanceId = p
        .get("instance")
        .ok_or_else(|| ApiError::bad_request("`instance` is required"))?
        .parse()
        .map_err(|e: String| ApiError::bad_request(e))?;
    let layer = p.get("layer").map_or("input", String::as_str);
    let space = s
        .bundle()
        .space_by_name(layer)
        .ok_or_else(|| ApiError::not_found("unknown_layer", format!("unknown layer `{layer}`")).with_details(json!({ "layer": layer })))?;
    let k = parse_num(&p, "k")?;
    let context = members(&s, &c, &p)?;
    let mut body = neighbor_evidence(&c.analysis, id, space, k, &context)?;
    for n in &mut body.neighbors {
        n.image = n.image.as_ref().map(|_| image_url(n.id));
    }
    ok(&s, &body)
}

#[derive(Serialize)]
struct SubsetList {
    revision: u64,
    stale: Vec<String>,
    subsets: Vec<Subset>,
}

async fn list_subsets(State(s): State<Arc<Session>>, q: Q) -> Result<Response, ApiError> {
    check_known(&params(q)?, &[])?;
    ok(&s, &SubsetList { revision: s.revision(), stale: s.stale_subsets().to_vec(), subsets: s.subsets().list() })
}

async fn get_subset(State(s): State<Arc<Session>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    ok(&s, &s.subsets().get(&id)?)
}

#[derive(Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
enum SubsetAction {
    Create {
        #[serde(default)]
        name: Option<String>,
        selection: Selection,
    },
    Combine {
        a: String,
        b: String,
        op: SetOp,
        #[serde(default)]
        name: Option<String>,
    },
    Delete {
        id: String,
    },
    Save,
}

async fn mutate_subsets(State(s): State<Arc<Session>>, body: Result<Json<serde_json::Value>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(value) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let action: SubsetAction = serde_json::from_value(value).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()).with_details(json!({ "field": field_of(&e) }))
    })?;
    let session = s.clone();
    // selections may fit projections or flows; keep them off the async workers
    tokio::task::spawn_blocking(move || -> Result<Response, ApiError> {
        let s = session;
        match action {
            SubsetAction::Create { name, selection } => {
                let c = computed(&s)?;
                let subset = s.subsets().create(&c.analysis, name, selection)?;
                Ok(json_response(&s, StatusCode::CREATED, &subset))
            }
            SubsetAction::Combine { a, b, op, name } => {
                let subset = s.subsets().combine(&a, &b, op, name)?;
                Ok(json_response(&s, StatusCode::CREATED, &subset))
            }
            SubsetAction::Delete { id } => {
                let subset = s.subsets().remove(&id)?;
                ok(&s, &subset)
            }
            SubsetAction::Save => {
                let path = s
                    .subsets_path()
                    .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no_store", "the server was started without a subset store path"))?;
                let revision = s.subsets().save(path)?;
                ok(&s, &json!({ "saved": path.display().to_string(), "revision": revision }))
            }
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn image(State(s): State<Arc<Session>>, Path((split, index)): Path<(String, u32)>) -> Result<Response, ApiError> {
    let split: Split = split.parse().map_err(|e: String| ApiError::bad_request(e))?;
    let id = InstanceId { split, index };
    let reference = s.bundle().image(id).ok_or_else(|| ApiError::not_found("no_image", format!("no image for {id}")))?;
    if let Some(rest) = reference.strip_prefix("data:") {
        let (mime, data) = rest
            .split_once(";base64,")
            .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "unsupported data URI"))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        return Ok(([(header::CONTENT_TYPE, mime.to_string())], bytes).into_response());
    }
    let root = s.bundle().root().ok_or_else(|| ApiError::not_found("no_image", "bundle has no directory"))?;
    let path = root.join(reference);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::not_found("no_image", format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(reference).to_string())], bytes).into_response())
}
