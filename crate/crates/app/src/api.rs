//! HTTP adapter over the session engine. Handlers only translate requests;
//! every state change goes through the engine and lands in the event log.

use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::task::JoinSet;
use tracecheck_core::model::{Claim, EvidenceDocument, FeedbackInstruction, LabelSet};
use tracecheck_core::session::{FeedbackTicket, Protocol, SessionEngine, SessionError, SessionRecord};

use crate::questionnaire;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Internal(String),
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let msg = e.to_string();
        match e {
            SessionError::NotFound(_) => ApiError::NotFound(msg),
            SessionError::Busy(_) | SessionError::RoundLimitExceeded { .. } | SessionError::NotActive(_) => {
                ApiError::Conflict(msg)
            }
            SessionError::Precondition(_) | SessionError::Model(_) => ApiError::Unprocessable(msg),
            _ => ApiError::Internal(msg),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::Unprocessable(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::Unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                tracing::error!("request failed: {m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared handler state. Background rounds are tracked so shutdown can wait for them.
#[derive(Clone)]
pub struct ApiState {
    engine: Arc<SessionEngine>,
    tasks: Arc<Mutex<JoinSet<()>>>,
}

impl ApiState {
    pub fn new(engine: Arc<SessionEngine>) -> Self {
        Self {
            engine,
            tasks: Arc::default(),
        }
    }

    pub fn engine(&self) -> &Arc<SessionEngine> {
        &self.engine
    }

    fn spawn_background(&self, task: impl FnOnce() + Send + 'static) {
        let mut tasks = self.tasks.lock().expect("task set poisoned");
        while tasks.try_join_next().is_some() {}
        tasks.spawn_blocking(task);
    }

    /// Number of background rounds not yet reaped.
    pub fn in_flight(&self) -> usize {
        self.tasks.lock().expect("task set poisoned").len()
    }

    /// Wait for every background round to finish.
    pub async fn drain(&self) {
        let mut tasks = std::mem::take(&mut *self.tasks.lock().expect("task set poisoned"));
        while let Some(r) = tasks.join_next().await {
            if let Err(e) = r {
                tracing::error!("background round panicked: {e}");
            }
        }
    }

    async fn blocking<T, F>(&self, f: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&SessionEngine) -> Result<T, SessionError> + Send + 'static,
    {
        let engine = self.engine.clone();
        tokio::task::spawn_blocking(move || f(&engine))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(ApiError::from)
    }
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/questionnaire", get(questionnaire_schema))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/questionnaire", post(submit_questionnaire))
        .with_state(state)
}

/// Serve until `shutdown` resolves, then wait for in-flight rounds.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ApiState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    let pending = state.in_flight();
    if pending > 0 {
        tracing::info!(pending, "waiting for in-flight rounds");
    }
    state.drain().await;
    Ok(())
}

/// Record plus a per-round trace diff.
pub fn session_view(record: &SessionRecord) -> Value {
    let mut view = serde_json::to_value(record).expect("session records serialize");
    view["round_diffs"] = serde_json::to_value(record.round_diffs()).expect("diffs serialize");
    view
}

async fn health() -> &'static str {
    "ok"
}

async fn questionnaire_schema() -> Json<Value> {
    Json(questionnaire::schema_json())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    claim: String,
    #[serde(default)]
    claim_id: Option<String>,
    labels: Vec<String>,
    protocol: Protocol,
    #[serde(default)]
    evidence: Option<Vec<EvidenceDocument>>,
}

async fn create_session(
    State(state): State<ApiState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    if req.protocol == Protocol::ChooseOne {
        return Err(ApiError::Unprocessable(
            "choose-one sessions are graded by the oracle and only run in batch mode".into(),
        ));
    }
    let claim_id = req.claim_id.unwrap_or_else(|| "adhoc".into());
    let claim = Claim::new(claim_id, req.claim).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let labels = LabelSet::new(req.labels).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let (protocol, evidence) = (req.protocol, req.evidence);
    let guard = state
        .blocking(move |engine| engine.create(claim, labels, protocol, evidence))
        .await?;
    let id = guard.id().to_string();
    let engine = state.engine.clone();
    state.spawn_background(move || {
        if let Err(e) = engine.run_initial(&guard, None) {
            tracing::warn!(session = guard.id(), "initial proposal failed: {e}");
        }
    });
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(State(state): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let record = state.blocking(move |engine| engine.load(&id)).await?;
    Ok(Json(session_view(&record)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    instructions: Vec<String>,
}

async fn submit_feedback(
    State(state): State<ApiState>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let instructions =
        FeedbackInstruction::human_batch(body.instructions).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let (guard, ticket) = state
        .blocking(move |engine| {
            let guard = engine.reserve(&id)?;
            let ticket = engine.begin_feedback(&guard, instructions)?;
            Ok((guard, ticket))
        })
        .await?;
    match ticket {
        FeedbackTicket::Accepted(record) => Ok((StatusCode::OK, Json(session_view(&record))).into_response()),
        FeedbackTicket::Queued { round, .. } => {
            let id = guard.id().to_string();
            let engine = state.engine.clone();
            state.spawn_background(move || {
                if let Err(e) = engine.complete_feedback(&guard, ticket) {
                    tracing::warn!(session = guard.id(), round, "feedback round failed: {e}");
                }
            });
            let body = json!({ "session_id": id, "round": round, "op_status": "pending" });
            Ok((StatusCode::ACCEPTED, Json(body)).into_response())
        }
    }
}

async fn accept(State(state): State<ApiState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let record = state.blocking(move |engine| engine.accept(&id)).await?;
    Ok(Json(session_view(&record)))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(
    State(state): State<ApiState>,
    Path(id): Path<String>,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query?;
    let events = state.blocking(move |engine| engine.store().events(&id)).await?;
    let fresh: Vec<_> = match q.since {
        Some(since) => events.into_iter().filter(|e| e.seq > since).collect(),
        None => events,
    };
    Ok(Json(json!({ "events": fresh })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionnaireBody {
    answers: Value,
}

async fn submit_questionnaire(
    State(state): State<ApiState>,
    Path(id): Path<String>,
    body: Result<Json<QuestionnaireBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    let stored = questionnaire::schema()
        .validate(&body.answers)
        .map_err(ApiError::Unprocessable)?;
    let event = state
        .blocking(move |engine| engine.record_questionnaire(&id, stored))
        .await?;
    Ok((StatusCode::CREATED, Json(json!({ "seq": event.seq }))))
}
