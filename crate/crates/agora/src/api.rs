//! HTTP/JSON control API. Each run owns one engine task; handlers talk to
//! it through an ordered command queue and read published snapshots.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use agora_core::identification::Verdict;
use agora_core::planner::EditOp;
use agora_core::AgentId;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot, watch};

use crate::engine::{Command, CommandError, Engine, RunConfig, RunMode, Status};
use crate::scenario::{load_scenario, parse_scenario, Scenario};

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub scenario_dir: Option<PathBuf>,
    /// Wall-clock length of one tick when converting idle timeouts.
    pub tick: Duration,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            scenario_dir: None,
            tick: Duration::from_millis(10),
        }
    }
}

type Reply = oneshot::Sender<Result<(), CommandError>>;

struct Published {
    lines: Vec<String>,
    snapshot: Value,
}

#[derive(Clone)]
struct RunHandle {
    commands: mpsc::UnboundedSender<(Command, Reply)>,
    published: Arc<RwLock<Published>>,
    changes: watch::Receiver<usize>,
}

pub struct AppState {
    config: ApiConfig,
    runs: Mutex<BTreeMap<String, RunHandle>>,
    counter: Mutex<u64>,
}

pub fn router(config: ApiConfig) -> Router {
    let state = Arc::new(AppState {
        config,
        runs: Mutex::new(BTreeMap::new()),
        counter: Mutex::new(0),
    });
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}/state", get(run_state))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/consumer-input", post(consumer_input))
        .route("/runs/{id}/expert-feedback", post(expert_feedback))
        .route("/runs/{id}/workflow-critique", post(workflow_critique))
        .with_state(state)
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict { reason: String, message: String },
    BadRequest(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(id) => (
                StatusCode::NOT_FOUND,
                json!({ "error": "not_found", "message": format!("unknown run `{id}`") }),
            ),
            ApiError::Conflict { reason, message } => (
                StatusCode::CONFLICT,
                json!({ "error": "conflict", "reason": reason, "message": message }),
            ),
            ApiError::BadRequest(message) => (
                StatusCode::BAD_REQUEST,
                json!({ "error": "bad_request", "message": message }),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        match e {
            CommandError::Conflict { reason, message } => ApiError::Conflict { reason, message },
            CommandError::Invalid(message) => ApiError::BadRequest(message),
        }
    }
}

/// Parses a JSON body strictly; every failure is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRun {
    scenario: Value,
    #[serde(default)]
    mode: RunMode,
    #[serde(default)]
    seed: Option<u64>,
}

fn resolve_scenario(
    config: &ApiConfig,
    value: Value,
) -> Result<(Scenario, Option<String>), ApiError> {
    match value {
        Value::String(name) => {
            let dir = config
                .scenario_dir
                .as_ref()
                .ok_or_else(|| ApiError::BadRequest("no scenario directory configured".into()))?;
            if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                return Err(ApiError::BadRequest(format!(
                    "invalid scenario name `{name}`"
                )));
            }
            let file = if name.ends_with(".json") {
                name.clone()
            } else {
                format!("{name}.json")
            };
            let scenario =
                load_scenario(&dir.join(&file)).map_err(|e| ApiError::BadRequest(e.to_string()))?;
            Ok((scenario, Some(file)))
        }
        Value::Object(_) => {
            let scenario = parse_scenario(&value.to_string())
                .map_err(|e| ApiError::BadRequest(e.to_string()))?;
            Ok((scenario, None))
        }
        _ => Err(ApiError::BadRequest(
            "scenario must be an object or a file name".into(),
        )),
    }
}

async fn create_run(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let request: CreateRun = parse_body(&body)?;
    let (scenario, hint) = resolve_scenario(&state.config, request.scenario)?;
    let run_id = {
        let mut counter = state.counter.lock().expect("counter lock");
        *counter += 1;
        format!("run-{}", *counter)
    };
    let config = RunConfig {
        run_id: run_id.clone(),
        seed: request.seed.unwrap_or(scenario.seed),
        mode: request.mode,
        scenario_hint: hint,
    };
    let engine = Engine::new(scenario, config).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let handle = spawn_engine(engine, state.config.tick);
    state
        .runs
        .lock()
        .expect("runs lock")
        .insert(run_id.clone(), handle);
    Ok((StatusCode::CREATED, Json(json!({ "run_id": run_id }))).into_response())
}

fn publish(engine: &Engine, published: &RwLock<Published>, changes: &watch::Sender<usize>) {
    let mut p = published.write().expect("published lock");
    p.lines = engine.lines().to_vec();
    p.snapshot = engine.snapshot();
    let n = p.lines.len();
    drop(p);
    changes.send_replace(n);
}

fn spawn_engine(mut engine: Engine, tick: Duration) -> RunHandle {
    let (tx, mut rx) = mpsc::unbounded_channel::<(Command, Reply)>();
    let published = Arc::new(RwLock::new(Published {
        lines: Vec::new(),
        snapshot: engine.snapshot(),
    }));
    let (changes_tx, changes_rx) = watch::channel(0usize);
    let shared = published.clone();
    tokio::spawn(async move {
        let mut status = engine.run_until_blocked();
        publish(&engine, &shared, &changes_tx);
        let mut idle_allowed = true;
        loop {
            let timeout = engine.idle_timeout().filter(|_| idle_allowed);
            let next = match (&status, timeout) {
                (Status::Parked, Some(ticks)) => {
                    let wait = tick.saturating_mul(u32::try_from(ticks).unwrap_or(u32::MAX));
                    match tokio::time::timeout(wait, rx.recv()).await {
                        Ok(next) => next,
                        Err(_) => {
                            if engine.apply(Command::Idle).is_ok() {
                                status = engine.run_until_blocked();
                                publish(&engine, &shared, &changes_tx);
                            } else {
                                idle_allowed = false;
                            }
                            continue;
                        }
                    }
                }
                _ => rx.recv().await,
            };
            let Some((command, reply)) = next else { break };
            let result = engine.apply(command);
            if result.is_ok() {
                status = engine.run_until_blocked();
                publish(&engine, &shared, &changes_tx);
            }
            let _ = reply.send(result);
        }
    });
    RunHandle {
        commands: tx,
        published,
        changes: changes_rx,
    }
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Value> {
    let runs = state.runs.lock().expect("runs lock");
    let list: Vec<Value> = runs
        .values()
        .map(|h| h.published.read().expect("published lock").snapshot.clone())
        .map(|s| {
            json!({
                "run_id": s["run_id"],
                "mode": s["mode"],
                "status": s["status"],
                "phase": s["phase"],
                "outcome": s["outcome"]["outcome"],
            })
        })
        .collect();
    Json(json!({ "runs": list }))
}

fn handle(state: &AppState, id: &str) -> Result<RunHandle, ApiError> {
    let runs = state.runs.lock().expect("runs lock");
    runs.get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(id.to_string()))
}

async fn run_state(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let h = handle(&state, &id)?;
    let snapshot = h.published.read().expect("published lock").snapshot.clone();
    Ok(Json(snapshot))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: Option<usize>,
    #[serde(default)]
    wait_ms: Option<u64>,
}

/// Lines with 1-based index greater than `since`. With `wait_ms`, blocks
/// until such a line exists or the wait elapses.
async fn run_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
) -> Result<Json<Value>, ApiError> {
    let RunHandle {
        published,
        mut changes,
        ..
    } = handle(&state, &id)?;
    let since = query.since.unwrap_or(0);
    if let Some(wait) = query.wait_ms {
        let _ = tokio::time::timeout(
            Duration::from_millis(wait),
            changes.wait_for(|n| *n > since),
        )
        .await;
    }
    let p = published.read().expect("published lock");
    let events: Vec<Value> = p
        .lines
        .iter()
        .enumerate()
        .skip(since)
        .map(|(i, line)| {
            json!({
                "index": i + 1,
                "line": serde_json::from_str::<Value>(line).unwrap_or(Value::Null),
            })
        })
        .collect();
    Ok(Json(
        json!({ "since": since, "next": p.lines.len(), "events": events }),
    ))
}

async fn send_command(
    state: &AppState,
    id: &str,
    command: Command,
) -> Result<Json<Value>, ApiError> {
    let RunHandle {
        commands,
        published,
        ..
    } = handle(state, id)?;
    let (reply_tx, reply_rx) = oneshot::channel();
    commands
        .send((command, reply_tx))
        .map_err(|_| ApiError::Conflict {
            reason: "RunTerminal".into(),
            message: "the run has stopped".into(),
        })?;
    let result = reply_rx.await.map_err(|_| ApiError::Conflict {
        reason: "RunTerminal".into(),
        message: "the run has stopped".into(),
    })?;
    result?;
    let snapshot = published.read().expect("published lock").snapshot.clone();
    Ok(Json(json!({ "accepted": true, "state": snapshot })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsumerInputBody {
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    #[serde(default)]
    confirm: Option<bool>,
    #[serde(default)]
    abandon: bool,
}

async fn consumer_input(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    handle(&state, &id)?;
    let b: ConsumerInputBody = parse_body(&body)?;
    let command = Command::ConsumerInput {
        attributes: b.attributes,
        confirm: b.confirm,
        abandon: b.abandon,
    };
    send_command(&state, &id, command).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertFeedbackBody {
    expert_id: AgentId,
    verdict: Value,
    #[serde(default)]
    payload: Option<Value>,
    #[serde(default)]
    comment: String,
}

/// Accepts either a full verdict (`"approve"`, `{"need_more_data":[..]}`)
/// or a verdict name with its content in `payload`.
fn verdict_from(verdict: Value, payload: Option<Value>) -> Result<Verdict, ApiError> {
    let value = match (verdict, payload) {
        (Value::String(name), Some(content)) if name != "approve" => json!({ name: content }),
        (v, _) => v,
    };
    serde_json::from_value(value).map_err(|e| ApiError::BadRequest(format!("verdict: {e}")))
}

async fn expert_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    handle(&state, &id)?;
    let b: ExpertFeedbackBody = parse_body(&body)?;
    let command = Command::ExpertFeedback {
        expert_id: b.expert_id,
        verdict: verdict_from(b.verdict, b.payload)?,
        comment: b.comment,
    };
    send_command(&state, &id, command).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CritiqueBody {
    expert_id: AgentId,
    #[serde(default)]
    edits: Vec<EditOp>,
}

async fn workflow_critique(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    handle(&state, &id)?;
    let b: CritiqueBody = parse_body(&body)?;
    let command = Command::WorkflowCritique {
        expert_id: b.expert_id,
        edits: b.edits,
    };
    send_command(&state, &id, command).await
}
