use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use serde_json::{json, Value};

use difflens_core::difficulty::DifficultyError;
use difflens_core::flow::FlowError;
use difflens_core::projection::PcaError;
use difflens_core::subset::SubsetError;
use difflens_core::summary::SummaryError;

/// Error body: `{"code", "message", "details"}`.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: json!({}) }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_computed() -> Self {
        ApiError::new(StatusCode::CONFLICT, "not_computed", "difficulty profiles have not been computed; POST /api/compute first")
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::to_vec(&self).expect("error serializes");
        (self.status, [(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

impl From<DifficultyError> for ApiError {
    fn from(e: DifficultyError) -> Self {
        match &e {
            DifficultyError::InvalidConfig { field, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()).with_details(json!({ "field": field }))
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "compute_failed", e.to_string()),
        }
    }
}

impl From<SummaryError> for ApiError {
    fn from(e: SummaryError) -> Self {
        match e {
            SummaryError::UnknownInstance(id) => {
                ApiError::not_found("unknown_instance", e.to_string()).with_details(json!({ "instance": id.to_string() }))
            }
            SummaryError::UnknownSpace(_) => ApiError::not_found("unknown_layer", e.to_string()),
            _ => ApiError::bad_request(e.to_string()),
        }
    }
}

impl From<FlowError> for ApiError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::EmptySubset => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_subset", e.to_string()),
            FlowError::UnknownElement(_) => ApiError::not_found("unknown_element", e.to_string()),
            FlowError::UnknownInstance(_) => ApiError::not_found("unknown_instance", e.to_string()),
            FlowError::TraceLength { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<PcaError> for ApiError {
    fn from(e: PcaError) -> Self {
        match e {
            PcaError::UnknownSpace(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "projection_failed", e.to_string()),
        }
    }
}

impl From<SubsetError> for ApiError {
    fn from(e: SubsetError) -> Self {
        match &e {
            SubsetError::UnknownSubset(id) => {
                let id = id.clone();
                ApiError::not_found("unknown_subset", e.to_string()).with_details(json!({ "subset": id }))
            }
            SubsetError::UnknownInstance(_) => ApiError::not_found("unknown_instance", e.to_string()),
            SubsetError::InvalidSelection { field, .. } => {
                let field = format!("selection.{field}");
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_selection", e.to_string()).with_details(json!({ "field": field }))
            }
            SubsetError::CrossBundle(..) => ApiError::new(StatusCode::CONFLICT, "cross_bundle", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}
