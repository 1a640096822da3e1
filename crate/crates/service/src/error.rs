use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

use explainer_core::intent::IntentError;
use explainer_core::pipeline::PipelineError;

/// Error body returned by every endpoint: `{code, message, details}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into(), details: Value::Null }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "SessionNotFound", format!("no session {id}"))
            .with_details(json!({ "session_id": id }))
    }

    pub fn step_not_found(step: u64, taken: usize) -> Self {
        Self::new(StatusCode::NOT_FOUND, "StepNotFound", format!("decision step {step} has not been taken"))
            .with_details(json!({ "decision_step": step, "steps_taken": taken }))
    }

    pub fn revision_not_found(step: u64, rev: u32, available: usize) -> Self {
        Self::new(StatusCode::NOT_FOUND, "RevisionNotFound", format!("step {step} has no revision {rev}"))
            .with_details(json!({ "decision_step": step, "rev": rev, "revisions": available }))
    }

    pub fn episode_finished(state: u32) -> Self {
        Self::new(StatusCode::CONFLICT, "EpisodeFinished", "the episode already ended in a terminal state")
            .with_details(json!({ "state": state }))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        // Upstream model failures are a gateway problem, not the caller's.
        let status = match &e {
            PipelineError::Intent(IntentError::Llm(_)) => StatusCode::BAD_GATEWAY,
            PipelineError::Intent(IntentError::EmptyQuestion) => StatusCode::BAD_REQUEST,
            PipelineError::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let details = match &e {
            PipelineError::Intent(IntentError::UnparseableIntent { last_reply, .. }) => {
                json!({ "last_reply": last_reply })
            }
            _ => Value::Null,
        };
        ApiError::new(status, e.code(), e.to_string()).with_details(details)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code, message: self.message, details: self.details };
        (self.status, Json(body)).into_response()
    }
}
