//! HTTP annotation API for human-oracle runs.
//!
//! One worker thread owns the [`Engine`]. HTTP handlers never touch it:
//! label submissions travel over a command channel and reads are served
//! from a snapshot the worker republishes after every change. The worker
//! persists its state after every accepted label, so a killed service
//! resumes with the same pending query pool.
//!
//! | method | path            | body / result                                  |
//! |--------|-----------------|------------------------------------------------|
//! | GET    | `/api/state`    | status, round, labeled count, pending, curve   |
//! | GET    | `/api/tasks`    | pending tasks by descending score, 409 if none |
//! | POST   | `/api/labels`   | [`LabelSubmission`] → [`Ack`]                  |
//! | GET    | `/api/curve.csv`| the learning curve in `curve.csv` format       |

use std::collections::BTreeMap;
use std::fs;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dropal::artifacts::{self, CurveRow};
use dropal::engine::{EngineError, EngineState, OracleMode, SubmitOutcome};
use dropal::{AlConfig, Dataset, Engine};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("the annotation service needs oracle = \"human\"; this config uses the simulated oracle")]
    NotHumanMode,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Artifact(#[from] artifacts::ArtifactError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    StateFile {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("saved state was written for a different configuration")]
    ConfigChanged,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub example_id: String,
    pub class_index: usize,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub example_id: String,
    pub class_index: usize,
    pub round: usize,
    /// Tasks of the round still unlabeled after this submission.
    pub remaining: usize,
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub example_id: String,
    /// The example text, or a short summary of its embedding when it has none.
    pub display_text: String,
    pub class_names: Vec<String>,
    pub round: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingLabels,
    Training,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub status: Status,
    /// Round awaiting labels, or the last completed round.
    pub round: usize,
    pub labeled_count: usize,
    pub pending: usize,
    pub q: usize,
    pub target: usize,
    pub curve: Vec<CurveRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
struct Snapshot {
    state: RunState,
    tasks: Option<Vec<AnnotationTask>>,
}

/// What the worker writes to disk.
#[derive(Serialize, Deserialize)]
struct Persisted {
    engine: EngineState,
    acks: BTreeMap<String, Ack>,
    notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// JSON file holding the engine state; resumed from when present.
    pub state_path: PathBuf,
    /// Run directory refreshed after every round.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum SubmitError {
    UnknownId(String),
    InvalidClass(String),
    NotPending(String),
    Internal(String),
}

enum Command {
    Submit(LabelSubmission, oneshot::Sender<Result<Ack, SubmitError>>),
    Shutdown,
}

/// Cheap handle shared by the HTTP handlers.
#[derive(Clone)]
pub struct ServiceHandle {
    commands: mpsc::Sender<Command>,
    snapshot: Arc<RwLock<Snapshot>>,
}

impl ServiceHandle {
    pub fn state(&self) -> RunState {
        self.snapshot.read().unwrap().state.clone()
    }

    pub fn tasks(&self) -> Option<Vec<AnnotationTask>> {
        self.snapshot.read().unwrap().tasks.clone()
    }

    /// Asks the worker to stop after its current command.
    pub fn shutdown(&self) {
        let _ = self.commands.send(Command::Shutdown);
    }
}

pub struct Worker {
    pub handle: ServiceHandle,
    thread: JoinHandle<()>,
}

impl Worker {
    /// Stops the worker and waits for it. State is already on disk.
    pub fn stop(self) {
        self.handle.shutdown();
        let _ = self.thread.join();
    }
}

fn display_text(ex: &dropal::Example) -> String {
    if let Some(t) = &ex.text {
        return t.clone();
    }
    let head: Vec<String> = ex.embedding.iter().take(4).map(|x| format!("{x:.3}")).collect();
    let more = if ex.embedding.len() > 4 { ", …" } else { "" };
    format!("[{}{more}] ({} dims)", head.join(", "), ex.embedding.len())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let io = |source| ServiceError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct WorkerState {
    engine: Engine,
    acks: BTreeMap<String, Ack>,
    notes: BTreeMap<String, String>,
    opts: ServiceOptions,
    snapshot: Arc<RwLock<Snapshot>>,
    failure: Option<String>,
}

impl WorkerState {
    fn persist(&self) -> Result<(), ServiceError> {
        let p = Persisted { engine: self.engine.state(), acks: self.acks.clone(), notes: self.notes.clone() };
        let json = serde_json::to_vec(&p).map_err(|source| ServiceError::StateFile { path: self.opts.state_path.clone(), source })?;
        write_atomically(&self.opts.state_path, &json)
    }

    fn write_artifacts(&self) -> Result<(), ServiceError> {
        if let Some(dir) = &self.opts.out_dir {
            artifacts::write_run_dir(dir, &self.engine)?;
        }
        Ok(())
    }

    fn publish(&self, training: bool) {
        let e = &self.engine;
        let pending = e.pending();
        let status = if self.failure.is_some() {
            Status::Failed
        } else if training {
            Status::Training
        } else if pending.is_some() {
            Status::AwaitingLabels
        } else {
            Status::Complete
        };
        let tasks = pending.filter(|_| !training).map(|p| {
            let names = e.class_names();
            p.unlabeled_tasks()
                .map(|t| AnnotationTask {
                    example_id: t.example_id.clone(),
                    display_text: display_text(e.dataset().get(&t.example_id).unwrap()),
                    class_names: names.clone(),
                    round: p.round,
                    score: t.score,
                })
                .collect()
        });
        let state = RunState {
            status,
            round: pending.map_or_else(|| e.records().last().map_or(0, |r| r.round), |p| p.round),
            labeled_count: e.pools().labeled.len(),
            pending: if training { 0 } else { pending.map_or(0, |p| p.remaining()) },
            q: e.q(),
            target: e.target(),
            curve: e.records().iter().map(CurveRow::from).collect(),
            error: self.failure.clone(),
        };
        *self.snapshot.write().unwrap() = Snapshot { state, tasks };
    }

    /// Brings the engine to a state where it either awaits labels or is done.
    fn advance(&mut self) -> Result<(), ServiceError> {
        if !self.engine.is_initialized() {
            self.publish(true);
            self.engine.initialize()?;
        }
        if self.engine.pending().is_none() && !self.engine.is_finished() {
            self.engine.begin_round()?;
        }
        self.persist()?;
        self.write_artifacts()?;
        self.publish(false);
        Ok(())
    }

    fn submit(&mut self, s: LabelSubmission) -> Result<Ack, SubmitError> {
        if let Some(ack) = s.idempotency_key.as_ref().and_then(|k| self.acks.get(k)) {
            return Ok(Ack { duplicate: true, ..ack.clone() });
        }
        let round = self.engine.pending().map(|p| p.round);
        let remaining = match self.engine.submit_label(&s.example_id, s.class_index) {
            Ok(SubmitOutcome::Recorded { remaining }) => remaining,
            Err(EngineError::UnknownId(id)) => return Err(SubmitError::UnknownId(id)),
            Err(e @ EngineError::InvalidLabel { .. }) => return Err(SubmitError::InvalidClass(e.to_string())),
            Err(e @ (EngineError::NotPending(_) | EngineError::NoPendingRound)) => {
                return Err(SubmitError::NotPending(e.to_string()))
            }
            Err(e) => return Err(SubmitError::Internal(e.to_string())),
        };
        let ack = Ack {
            example_id: s.example_id.clone(),
            class_index: s.class_index,
            round: round.unwrap_or_default(),
            remaining,
            duplicate: false,
        };
        if let Some(k) = s.idempotency_key {
            self.acks.insert(k, ack.clone());
        }
        if let Some(n) = s.note.filter(|n| !n.is_empty()) {
            self.notes.insert(s.example_id, n);
        }
        self.persist().map_err(|e| SubmitError::Internal(e.to_string()))?;
        self.publish(remaining == 0);
        Ok(ack)
    }

    fn finish_round(&mut self) {
        let result = self.engine.complete_round().map(|_| ()).map_err(ServiceError::from).and_then(|_| self.advance());
        if let Err(e) = result {
            self.failure = Some(e.to_string());
            self.publish(false);
        }
    }

    fn run(mut self, commands: mpsc::Receiver<Command>) {
        while let Ok(cmd) = commands.recv() {
            match cmd {
                Command::Shutdown => break,
                Command::Submit(s, reply) => {
                    let result = self.submit(s);
                    let round_done = matches!(result, Ok(Ack { remaining: 0, duplicate: false, .. }));
                    let _ = reply.send(result);
                    if round_done {
                        self.finish_round();
                    }
                }
            }
        }
    }
}

/// Loads or creates the engine, brings it to its first pending round and
/// starts the worker thread. Blocks while the seed model trains.
pub fn start_worker(dataset: Dataset, config: AlConfig, opts: ServiceOptions) -> Result<Worker, ServiceError> {
    if config.oracle != OracleMode::Human {
        return Err(ServiceError::NotHumanMode);
    }
    let (engine, acks, notes) = if opts.state_path.exists() {
        let text = fs::read_to_string(&opts.state_path).map_err(|source| ServiceError::Io { path: opts.state_path.clone(), source })?;
        let p: Persisted =
            serde_json::from_str(&text).map_err(|source| ServiceError::StateFile { path: opts.state_path.clone(), source })?;
        if p.engine.config != config {
            return Err(ServiceError::ConfigChanged);
        }
        (Engine::restore(dataset, p.engine)?, p.acks, p.notes)
    } else {
        (Engine::new(dataset, config)?, BTreeMap::new(), BTreeMap::new())
    };
    let snapshot = Arc::new(RwLock::new(Snapshot {
        state: RunState {
            status: Status::Training,
            round: 0,
            labeled_count: 0,
            pending: 0,
            q: engine.q(),
            target: engine.target(),
            curve: Vec::new(),
            error: None,
        },
        tasks: None,
    }));
    let mut state = WorkerState { engine, acks, notes, opts, snapshot: snapshot.clone(), failure: None };
    state.advance()?;
    let (tx, rx) = mpsc::channel();
    let thread = std::thread::Builder::new()
        .name("engine".into())
        .spawn(move || state.run(rx))
        .map_err(|source| ServiceError::Io { path: PathBuf::from("<thread>"), source })?;
    Ok(Worker { handle: ServiceHandle { commands: tx, snapshot }, thread })
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn get_state(State(h): State<ServiceHandle>) -> Json<RunState> {
    Json(h.state())
}

async fn get_tasks(State(h): State<ServiceHandle>) -> Response {
    match h.tasks() {
        Some(tasks) => Json(tasks).into_response(),
        None => error(StatusCode::CONFLICT, "no round is awaiting labels"),
    }
}

async fn post_label(State(h): State<ServiceHandle>, body: Result<Json<LabelSubmission>, JsonRejection>) -> Response {
    let Json(submission) = match body {
        Ok(b) => b,
        Err(rej) => return error(StatusCode::UNPROCESSABLE_ENTITY, rej.body_text()),
    };
    let (tx, rx) = oneshot::channel();
    if h.commands.send(Command::Submit(submission, tx)).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "engine has stopped");
    }
    match rx.await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(SubmitError::UnknownId(id))) => error(StatusCode::NOT_FOUND, format!("unknown example id {id:?}")),
        Ok(Err(SubmitError::InvalidClass(m))) => error(StatusCode::UNPROCESSABLE_ENTITY, m),
        Ok(Err(SubmitError::NotPending(m))) => error(StatusCode::CONFLICT, m),
        Ok(Err(SubmitError::Internal(m))) => error(StatusCode::INTERNAL_SERVER_ERROR, m),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "engine has stopped"),
    }
}

async fn get_curve(State(h): State<ServiceHandle>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], artifacts::curve_csv(&h.state().curve)).into_response()
}

pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/tasks", get(get_tasks))
        .route("/api/labels", post(post_label))
        .route("/api/curve.csv", get(get_curve))
        .with_state(handle)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    handle: ServiceHandle,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(handle)).with_graceful_shutdown(shutdown).await
}
