//! HTTP session service.
//!
//! A session is one episode on one map. Each `step` plans from the current
//! state, saves the trace as `step_<k>.tree` under the session directory and
//! applies one sampled transition. `ask` runs the question pipeline on a
//! saved trace; when that needs targeted expansion the grown tree becomes a
//! new revision `step_<k>.rev<r>.tree` and older revisions stay addressable.
//!
//! Step and ask are serialized per session. Reads only take a short shared
//! lock and may run alongside each other.

pub mod error;
pub mod session;
pub mod view;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use explainer_core::config::{ExplainerConfig, PlannerSettings};
use explainer_core::env::{GridMap, StateId};
use explainer_core::llm::ChatClient;
use explainer_core::mcts::{plan_step, SearchParams};
use explainer_core::pipeline::{ask as run_pipeline, AskOutcome};

pub use error::{ApiError, ErrorBody};
use session::{Session, StepRecord, TraceRef};
use view::{prune, TreeQuery, TreeView, DEFAULT_MIN_VISITS, DEFAULT_VIEW_DEPTH};

/// Current UTC time in RFC 3339 form, used for trace timestamps.
pub fn now_rfc3339() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_else(|_| "1970-01-01T00:00:00Z".into())
}

struct Slot {
    /// Held for the whole of a step or ask.
    op: tokio::sync::Mutex<()>,
    data: RwLock<Session>,
}

struct Inner {
    config: ExplainerConfig,
    client: Arc<dyn ChatClient>,
    trace_root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ExplainerConfig, client: Arc<dyn ChatClient>, trace_root: impl Into<PathBuf>) -> Self {
        AppState(Arc::new(Inner {
            config,
            client,
            trace_root: trace_root.into(),
            sessions: RwLock::new(HashMap::new()),
        }))
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.0
            .sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::session_not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/ask", post(ask))
        .route("/sessions/{id}/trees/{step}", get(get_tree))
        .route("/sessions/{id}/trees/{step}/raw", get(get_tree_raw))
        .with_state(state)
}

/// Binds and serves until the task is cancelled.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "explain service listening");
    axum::serve(listener, router(state)).await
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
    pub sessions: usize,
}

async fn health(State(app): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model: app.0.client.model().to_string(),
        sessions: app.0.sessions.read().expect("session table lock").len(),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    /// Map rows separated by newlines or `/`; the configured map otherwise.
    pub map: Option<String>,
    /// Planner overrides; omitted fields keep the configured values.
    pub planner: Option<serde_json::Value>,
    /// Seed for the episode's sampled transitions; the planner seed otherwise.
    pub env_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub state: StateId,
    pub map: String,
    pub params: SearchParams,
    pub env_seed: u64,
}

async fn create_session(
    State(app): State<AppState>,
    payload: Result<Option<Json<serde_json::Value>>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let req: CreateSession = match payload.map_err(|e| ApiError::invalid(e.body_text()))? {
        None => CreateSession::default(),
        Some(Json(v)) => serde_json::from_value(v).map_err(|e| ApiError::invalid(e.to_string()))?,
    };
    let config = &app.0.config;
    let map: GridMap = match &req.map {
        Some(text) => text.replace('/', "\n").parse().map_err(|e| ApiError::invalid(format!("map: {e}")))?,
        None => config.grid_map().map_err(|e| ApiError::internal(e.to_string()))?,
    };
    let params = match req.planner {
        None => config.planner.params(),
        Some(overrides) => {
            let mut merged = serde_json::to_value(config.planner).expect("planner settings serialize");
            if let (Some(base), serde_json::Value::Object(o)) = (merged.as_object_mut(), overrides) {
                base.extend(o);
            }
            let settings: PlannerSettings =
                serde_json::from_value(merged).map_err(|e| ApiError::invalid(format!("planner: {e}")))?;
            settings.params()
        }
    };
    params.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    let env_seed = req.env_seed.unwrap_or(params.seed);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id.clone(), map.clone(), params, env_seed, &app.0.trace_root);
    let created = SessionCreated { session_id: id.clone(), state: session.state, map: map.to_string(), params, env_seed };
    app.0
        .sessions
        .write()
        .expect("session table lock")
        .insert(id, Arc::new(Slot { op: tokio::sync::Mutex::new(()), data: RwLock::new(session) }));
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StepSummary {
    #[serde(flatten)]
    pub step: StepRecord,
    pub revisions: Vec<TraceRef>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub map: String,
    pub params: SearchParams,
    pub env_seed: u64,
    pub state: StateId,
    pub next_decision_step: u64,
    pub finished: bool,
    pub steps: Vec<StepSummary>,
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = app.slot(&id)?;
    let s = slot.data.read().expect("session lock");
    Ok(Json(SessionView {
        session_id: s.id.clone(),
        map: s.map.to_string(),
        params: s.params,
        env_seed: s.env_seed,
        state: s.state,
        next_decision_step: s.next_step(),
        finished: s.finished,
        steps: s
            .steps
            .iter()
            .zip(&s.revisions)
            .map(|(step, revs)| StepSummary {
                step: step.clone(),
                revisions: revs.iter().map(|r| r.trace_ref.clone()).collect(),
            })
            .collect(),
    }))
}

async fn step(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<StepRecord>, ApiError> {
    let slot = app.slot(&id)?;
    let _op = slot.op.lock().await;
    let worker = slot.clone();
    let record = blocking(move || {
        let (map, state, params, k) = {
            let s = worker.data.read().expect("session lock");
            if s.finished {
                return Err(ApiError::episode_finished(s.state.0));
            }
            (s.map.clone(), s.state, s.step_params(s.next_step()), s.next_step())
        };
        let (action, mut tree) =
            plan_step(&map, state, &params, k).map_err(|e| ApiError::invalid(format!("planning failed: {e}")))?;
        tree.metadata.created_at = now_rfc3339();
        let mut s = worker.data.write().expect("session lock");
        let outcome = map
            .sample_transition(state, action, &mut s.env_rng)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        s.record_step(tree, outcome)
    })
    .await?;
    Ok(Json(record))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub decision_step: u64,
    pub question: String,
    /// Revision to ask about; the latest one by default.
    #[serde(default)]
    pub rev: Option<u32>,
}

#[derive(Debug, Serialize)]
pub struct AskResponse {
    pub decision_step: u64,
    /// Revision the question was asked against.
    pub base_rev: u32,
    /// Revision the answer (or final verdict) was computed from.
    pub rev: u32,
    pub trace_ref: TraceRef,
    #[serde(flatten)]
    pub outcome: AskOutcome,
}

async fn ask(
    State(app): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<AskRequest>, JsonRejection>,
) -> Result<Json<AskResponse>, ApiError> {
    let req = body(payload)?;
    let slot = app.slot(&id)?;
    let _op = slot.op.lock().await;
    let worker = slot.clone();
    let inner = app.0.clone();
    let response = blocking(move || {
        let (base_rev, tree, map) = {
            let s = worker.data.read().expect("session lock");
            let (r, rev) = s.revision(req.decision_step, req.rev)?;
            (r, rev.tree.clone(), s.map.clone())
        };
        let mut outcome = run_pipeline(&tree, &map, &req.question, inner.client.as_ref(), &inner.config, &now_rfc3339())?;
        let mut s = worker.data.write().expect("session lock");
        let rev = if outcome.expansion_performed {
            let rev = s.adopt_expansion(req.decision_step, base_rev, outcome.tree.clone())?;
            // Report the stored records so repeated asks return identical bodies.
            let stored = &s.revisions[req.decision_step as usize][rev as usize].tree;
            outcome.expansions = stored.metadata.expansions[tree.metadata.expansions.len()..].to_vec();
            outcome.tree = (**stored).clone();
            rev
        } else {
            base_rev
        };
        let trace_ref = s.revisions[req.decision_step as usize][rev as usize].trace_ref.clone();
        Ok(AskResponse { decision_step: req.decision_step, base_rev, rev, trace_ref, outcome })
    })
    .await?;
    Ok(Json(response))
}

fn tree_query(q: Result<Query<TreeQuery>, QueryRejection>) -> Result<TreeQuery, ApiError> {
    q.map(|Query(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

async fn get_tree(
    State(app): State<AppState>,
    Path((id, step)): Path<(String, u64)>,
    q: Result<Query<TreeQuery>, QueryRejection>,
) -> Result<Json<TreeView>, ApiError> {
    let q = tree_query(q)?;
    let slot = app.slot(&id)?;
    let (rev, tree, count) = {
        let s = slot.data.read().expect("session lock");
        let (r, rev) = s.revision(step, q.rev)?;
        (r, rev.tree.clone(), s.revisions[step as usize].len() as u32)
    };
    let depth = q.depth.unwrap_or(DEFAULT_VIEW_DEPTH);
    let min_visits = q.min_visits.unwrap_or(DEFAULT_MIN_VISITS);
    Ok(Json(prune(&tree, rev, count, depth, min_visits)))
}

async fn get_tree_raw(
    State(app): State<AppState>,
    Path((id, step)): Path<(String, u64)>,
    q: Result<Query<TreeQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let q = tree_query(q)?;
    let slot = app.slot(&id)?;
    let (file, tree) = {
        let s = slot.data.read().expect("session lock");
        let (_, rev) = s.revision(step, q.rev)?;
        (rev.trace_ref.file.clone(), rev.tree.clone())
    };
    let text = tree.to_json().map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{file}\"")),
        ],
        text,
    )
        .into_response())
}
