//! The control plane: a local HTTP service plus the `/stream` websocket.
//!
//! Handlers only touch in-memory state under a short-lived lock; anything
//! slow (opening sources, resolving models, joining the worker, exporting,
//! chatting) runs on the blocking pool so requests never wait on inference.
//!
//! Errors are returned as `{"error": {"code": ..., "message": ...}}` with a
//! stable `code`.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};

use scopeloop_core::adapters::registry::ModelRegistry;
use scopeloop_core::aggregate::export::export_session;
use scopeloop_core::aggregate::{AggregateError, Decision};
use scopeloop_core::frame::{open_source, select_region};
use scopeloop_core::{AggregateSession, CaptureRegion, FrameSourceKind, PendingEntry};

use crate::chat::{open_chat, ChatCommand, ChatError, ChatHandle, ChatMessage, ChatState};
use crate::config::{ConfigError, ConfigPatch, PipelineConfig};
use crate::metrics::LatencyStats;
use crate::stream::{error_json, frame_message, result_json};
use crate::worker::{
    spawn_worker, ErrorEvent, FrameCounters, ResultEvent, WorkerEvent, WorkerHandle, WorkerSpec,
};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, code, message)
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({"code": self.code, "message": self.message});
        if let Some(d) = self.details {
            err["details"] = d;
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::UnknownModel(_) => "UnknownModel",
            ConfigError::TaskMismatch { .. } => "TaskMismatch",
            ConfigError::InvalidThreshold(_) => "InvalidThreshold",
            ConfigError::InvalidAlpha(_) => "InvalidAlpha",
            ConfigError::InvalidOverlap { .. } => "InvalidOverlap",
            ConfigError::InvalidSource(_) => "InvalidSource",
        };
        ApiError::bad(code, e.to_string())
    }
}

impl From<AggregateError> for ApiError {
    fn from(e: AggregateError) -> Self {
        let (status, code) = match e {
            AggregateError::NoCurrentResult => (StatusCode::CONFLICT, "NoCurrentResult"),
            AggregateError::OverrideOnNonCountTask => (StatusCode::BAD_REQUEST, "OverrideOnNonCountTask"),
            AggregateError::NegativeOverride(_) => (StatusCode::BAD_REQUEST, "NegativeOverride"),
            AggregateError::NonPositiveArea(_) => (StatusCode::BAD_REQUEST, "NonPositiveArea"),
            AggregateError::RoiDimsChangedSinceCalibration { .. } => {
                (StatusCode::CONFLICT, "RoiDimsChangedSinceCalibration")
            }
            AggregateError::Uncalibrated => (StatusCode::CONFLICT, "Uncalibrated"),
            AggregateError::EmptySession => (StatusCode::CONFLICT, "EmptySession"),
            AggregateError::IoFailure(_) => (StatusCode::INTERNAL_SERVER_ERROR, "IoFailure"),
            AggregateError::MalformedExport(_) => (StatusCode::INTERNAL_SERVER_ERROR, "MalformedExport"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ChatError> for ApiError {
    fn from(e: ChatError) -> Self {
        let msg = e.to_string();
        match e {
            ChatError::UnknownModel(_) => ApiError::bad("UnknownChatModel", msg),
            ChatError::SpawnFailure(_) => ApiError::new(StatusCode::BAD_GATEWAY, "ChatSpawnFailure", msg),
            ChatError::HandshakeTimeout(_) => {
                ApiError::new(StatusCode::GATEWAY_TIMEOUT, "HandshakeTimeout", msg)
            }
            ChatError::ChannelBroken { partial, .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "ChannelBroken", msg)
                    .with_details(json!({ "partial": partial }))
            }
            ChatError::Model(_) => ApiError::new(StatusCode::BAD_GATEWAY, "ChatModelError", msg),
            ChatError::NotAUserMessage => ApiError::bad("BadRequest", msg),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
}

/// Parses a JSON body; an empty body reads as `{}`.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    serde_json::from_slice(raw).map_err(|e| ApiError::bad("BadRequest", format!("invalid JSON body: {e}")))
}

#[derive(Clone, Debug)]
pub enum StreamMessage {
    Text(Arc<str>),
    Binary(Arc<Vec<u8>>),
}

enum RunState {
    Idle,
    Starting,
    Running(WorkerHandle),
}

struct Control {
    config: PipelineConfig,
    run: RunState,
    generation: u64,
    last: Option<Arc<ResultEvent>>,
    latency: LatencyStats,
    cycles: u64,
    counters: FrameCounters,
    session: AggregateSession,
    pending: Option<PendingEntry>,
    chat: Option<ChatHandle>,
    last_error: Option<Arc<ErrorEvent>>,
}

impl Control {
    fn running(&self) -> bool {
        !matches!(self.run, RunState::Idle)
    }

    /// Signals the worker to stop and hands back its handle for joining.
    fn stop(&mut self) -> Option<WorkerHandle> {
        self.generation += 1;
        match std::mem::replace(&mut self.run, RunState::Idle) {
            RunState::Running(h) => {
                self.counters = h.counters();
                h.request_stop();
                Some(h)
            }
            _ => None,
        }
    }

    fn chat_open(&self) -> bool {
        self.chat.as_ref().is_some_and(|c| c.state() != ChatState::Closed)
    }
}

pub struct ServiceOptions {
    pub registry: ModelRegistry,
    pub config: PipelineConfig,
    pub export_dir: PathBuf,
    pub chat: ChatCommand,
    /// Crash log directory; the platform default when `None`.
    pub log_dir: Option<PathBuf>,
}

pub struct AppState {
    control: Mutex<Control>,
    registry: Arc<ModelRegistry>,
    stream: broadcast::Sender<StreamMessage>,
    export_dir: PathBuf,
    chat_command: ChatCommand,
    log_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(opts: ServiceOptions) -> Result<Arc<Self>, ConfigError> {
        opts.config.validate(&opts.registry)?;
        let (stream, _) = broadcast::channel(64);
        Ok(Arc::new(AppState {
            control: Mutex::new(Control {
                config: opts.config,
                run: RunState::Idle,
                generation: 0,
                last: None,
                latency: LatencyStats::default(),
                cycles: 0,
                counters: FrameCounters::default(),
                session: AggregateSession::default(),
                pending: None,
                chat: None,
                last_error: None,
            }),
            registry: Arc::new(opts.registry),
            stream,
            export_dir: opts.export_dir,
            chat_command: opts.chat,
            log_dir: opts.log_dir,
        }))
    }

    fn lock(&self) -> MutexGuard<'_, Control> {
        self.control.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn broadcast(&self, v: Value) {
        let _ = self.stream.send(StreamMessage::Text(v.to_string().into()));
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamMessage> {
        self.stream.subscribe()
    }

    /// Stops the worker and closes chat; blocks until both are gone.
    pub fn shutdown(&self) {
        let (worker, chat) = {
            let mut c = self.lock();
            (c.stop(), c.chat.take())
        };
        if let Some(h) = worker {
            h.join();
        }
        if let Some(ch) = chat {
            ch.close();
        }
    }
}

fn join_in_background(h: WorkerHandle) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || h.join())
}

async fn start_worker(state: Arc<AppState>) -> Result<Value, ApiError> {
    let (config, generation) = {
        let mut c = state.lock();
        if c.chat_open() {
            return Err(ApiError::conflict(
                "ChatActive",
                "inference cannot start while the chat assistant is open",
            ));
        }
        if c.running() {
            return Err(ApiError::conflict("AlreadyRunning", "inference is already running"));
        }
        c.run = RunState::Starting;
        c.generation += 1;
        (c.config.clone(), c.generation)
    };
    let registry = state.registry.clone();
    let cfg = config.clone();
    let opened = tokio::task::spawn_blocking(move || {
        let backend = registry
            .resolve_id::<f64>(&cfg.model_id)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ModelUnavailable", e.to_string()))?;
        let source = open_source(&cfg.source)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "SourceUnavailable", e.to_string()))?;
        Ok::<_, ApiError>((source, backend))
    })
    .await
    .map_err(internal)
    .and_then(|r| r);
    let (source, backend) = match opened {
        Ok(v) => v,
        Err(e) => {
            let mut c = state.lock();
            if c.generation == generation {
                c.run = RunState::Idle;
            }
            return Err(e);
        }
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let handle = spawn_worker(
        WorkerSpec {
            source,
            backend,
            settings: config.cycle_settings(),
            capture_interval: Duration::from_millis(config.capture_interval_ms),
            config_snapshot: serde_json::to_value(&config).unwrap_or(Value::Null),
            log_dir: state.log_dir.clone(),
        },
        tx,
    );
    {
        let mut c = state.lock();
        if c.generation != generation {
            // stopped while we were opening
            drop(c);
            join_in_background(handle);
            return Err(ApiError::conflict("NotRunning", "start was cancelled by a stop request"));
        }
        c.run = RunState::Running(handle);
        c.last_error = None;
        c.latency = LatencyStats::default();
    }
    tokio::spawn(pump(state.clone(), rx, generation));
    state.broadcast(json!({"type": "started", "generation": generation, "config": config}));
    Ok(json!({"running": true, "generation": generation}))
}

/// Moves worker events into control state and out to stream subscribers.
async fn pump(state: Arc<AppState>, mut rx: mpsc::UnboundedReceiver<WorkerEvent>, generation: u64) {
    while let Some(ev) = rx.recv().await {
        match ev {
            WorkerEvent::Result(r) => {
                let latency = {
                    let mut c = state.lock();
                    if c.generation != generation {
                        continue;
                    }
                    c.last = Some(r.clone());
                    c.latency.push(r.cycle_ms);
                    c.cycles += 1;
                    c.counters = r.counters;
                    c.latency.snapshot()
                };
                if state.stream.receiver_count() == 0 {
                    continue;
                }
                state.broadcast(result_json(&r, &latency));
                let annotated = r.annotated.clone();
                if let Ok(Ok(bytes)) = tokio::task::spawn_blocking(move || frame_message(&annotated)).await {
                    let _ = state.stream.send(StreamMessage::Binary(Arc::new(bytes)));
                }
            }
            WorkerEvent::Error(e) => {
                let current = {
                    let mut c = state.lock();
                    let current = c.generation == generation;
                    if current {
                        c.last_error = Some(e.clone());
                    }
                    current
                };
                if current {
                    state.broadcast(error_json(&e));
                }
            }
            WorkerEvent::Stopped => {
                let finished = {
                    let mut c = state.lock();
                    if c.generation == generation {
                        c.stop()
                    } else {
                        None
                    }
                };
                if let Some(h) = finished {
                    join_in_background(h);
                    state.broadcast(json!({"type": "stopped"}));
                }
                break;
            }
        }
    }
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>scopeloop</title></head>
<body>
<h1>scopeloop</h1>
<p>The control service is running. Endpoints: GET /models, GET|POST /config,
POST /region, POST /start, POST /stop, GET /aggregate, POST /aggregate/propose,
POST /aggregate/commit, POST /calibrate, POST /export, GET /metrics,
GET /stream (websocket), POST /chat/open, POST /chat/prompt, POST /chat/close.</p>
</body></html>
"#;

async fn models(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "models": st.registry.models() }))
}

async fn get_config(State(st): State<Arc<AppState>>) -> Json<Value> {
    let c = st.lock();
    Json(json!({"config": c.config, "running": c.running()}))
}

async fn post_config(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let patch: ConfigPatch = body(&raw)?;
    let (next, restart) = {
        let mut c = st.lock();
        let next = c.config.patched(&patch, &st.registry)?;
        let restart = c.config.needs_restart(&next) && matches!(c.run, RunState::Running(_));
        c.config = next.clone();
        let old = if restart {
            c.stop()
        } else {
            if let RunState::Running(h) = &c.run {
                h.update(next.cycle_settings());
            }
            None
        };
        (next, old)
    };
    let restarting = restart.is_some();
    if let Some(h) = restart {
        let st2 = st.clone();
        tokio::spawn(async move {
            // release the old backend before the new one loads
            let _ = join_in_background(h).await;
            if let Err(e) = start_worker(st2.clone()).await {
                st2.broadcast(json!({"type": "error", "code": e.code, "message": e.message}));
            }
        });
    }
    st.broadcast(json!({"type": "config", "config": next}));
    Ok(Json(json!({"config": next, "restarting": restarting})))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RegionBody {
    Edges {
        left: i32,
        top: i32,
        right: i32,
        bottom: i32,
    },
    Clicks {
        a: (i32, i32),
        b: (i32, i32),
    },
}

async fn region(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let r: RegionBody = body(&raw)?;
    let region: CaptureRegion = match r {
        RegionBody::Edges {
            left,
            top,
            right,
            bottom,
        } => select_region((left, top), (right, bottom)),
        RegionBody::Clicks { a, b } => select_region(a, b),
    }
    .map_err(|e| ApiError::bad("DegenerateRegion", e.to_string()))?;
    let (old, needs_recalibration) = {
        let mut c = st.lock();
        c.config.source = FrameSourceKind::Screen { region };
        let old = if matches!(c.run, RunState::Running(_)) {
            c.stop()
        } else {
            None
        };
        (old, c.session.needs_recalibration((region.width(), region.height())))
    };
    let restarting = old.is_some();
    if let Some(h) = old {
        let st2 = st.clone();
        tokio::spawn(async move {
            let _ = join_in_background(h).await;
            if let Err(e) = start_worker(st2.clone()).await {
                st2.broadcast(json!({"type": "error", "code": e.code, "message": e.message}));
            }
        });
    }
    Ok(Json(json!({
        "region": region,
        "width": region.width(),
        "height": region.height(),
        "needs_recalibration": needs_recalibration,
        "restarting": restarting,
    })))
}

async fn start(State(st): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    start_worker(st).await.map(Json)
}

async fn stop(State(st): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let h = {
        let mut c = st.lock();
        if !c.running() {
            return Err(ApiError::conflict("NotRunning", "inference is not running"));
        }
        c.stop()
    };
    if let Some(h) = h {
        join_in_background(h);
    }
    st.broadcast(json!({"type": "stopped"}));
    Ok(Json(json!({"running": false})))
}

fn aggregate_json(c: &Control) -> Value {
    let roi = c.last.as_ref().map(|r| r.raw.dims());
    json!({
        "entries": c.session.entries().len(),
        "totals": c.session.totals(),
        "calibration": c.session.calibration(),
        "density_per_mm2": c.session.density().ok(),
        "aggregate_ki67_index": c.session.totals().aggregate_ki67_index(),
        "needs_recalibration": roi.is_some_and(|d| c.session.needs_recalibration(d)),
        "pending": c.pending.as_ref().map(|p| &p.prompt),
    })
}

async fn aggregate_view(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(aggregate_json(&st.lock()))
}

async fn propose(State(st): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let mut c = st.lock();
    let last = c.last.clone();
    let pending = match &last {
        Some(r) => c
            .session
            .propose(r.raw.clone(), r.annotated.clone(), Some(&r.result), &r.model_id)?,
        None => c.session.propose(
            Arc::new(scopeloop_core::Frame::filled(1, 1, scopeloop_core::PixelFormat::Rgb, [0; 3])),
            Arc::new(scopeloop_core::Frame::filled(1, 1, scopeloop_core::PixelFormat::Rgb, [0; 3])),
            None,
            "",
        )?,
    };
    let out = json!({
        "prompt": pending.prompt,
        "task": pending.task.export_name(),
        "model_id": pending.model_id,
        "seq": last.as_ref().map(|r| r.seq),
    });
    c.pending = Some(pending);
    Ok(Json(out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitBody {
    decision: Decision,
    #[serde(default, rename = "override")]
    override_count: Option<i64>,
}

async fn commit(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let b: CommitBody = body(&raw)?;
    let mut c = st.lock();
    let pending = c
        .pending
        .take()
        .ok_or_else(|| ApiError::conflict("NoPendingEntry", "nothing has been proposed"))?;
    match c.session.commit(pending.clone(), b.decision, b.override_count) {
        Ok(id) => {
            let mut out = aggregate_json(&c);
            out["entry_id"] = json!(id);
            Ok(Json(out))
        }
        Err(e) => {
            c.pending = Some(pending);
            Err(e.into())
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateBody {
    area_mm2: f64,
    #[serde(default)]
    roi: Option<(u32, u32)>,
}

async fn calibrate(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let b: CalibrateBody = body(&raw)?;
    let mut c = st.lock();
    let roi = b
        .roi
        .or_else(|| c.last.as_ref().map(|r| r.raw.dims()))
        .or_else(|| c.config.region().map(|r| (r.width(), r.height())))
        .ok_or_else(|| ApiError::conflict("NoRoi", "no region or analyzed frame to calibrate against"))?;
    let cal = c.session.calibrate(b.area_mm2, roi)?;
    Ok(Json(json!({
        "calibration": cal,
        "reference_box": scopeloop_core::aggregate::reference_box(roi),
    })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExportBody {
    #[serde(default)]
    dir: Option<PathBuf>,
}

async fn export(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let b: ExportBody = body(&raw)?;
    let session = st.lock().session.clone();
    let dir = b.dir.unwrap_or_else(|| st.export_dir.clone());
    let manifest = tokio::task::spawn_blocking(move || export_session(&session, &dir))
        .await
        .map_err(internal)??;
    Ok(Json(json!({
        "dir": manifest.dir,
        "csv": manifest.csv,
        "images": manifest.images,
    })))
}

async fn metrics(State(st): State<Arc<AppState>>) -> Json<Value> {
    let c = st.lock();
    let counters = match &c.run {
        RunState::Running(h) => h.counters(),
        _ => c.counters,
    };
    Json(json!({
        "running": c.running(),
        "latency": c.latency.snapshot(),
        "cycles": c.cycles,
        "frames": counters,
        "last_error": c.last_error.as_deref(),
    }))
}

async fn stream_ws(ws: WebSocketUpgrade, State(st): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| ws_session(socket, st))
}

async fn ws_session(mut socket: WebSocket, st: Arc<AppState>) {
    let mut rx = st.subscribe();
    let hello = {
        let c = st.lock();
        json!({"type": "hello", "config": c.config, "running": c.running()})
    };
    if socket.send(Message::Text(hello.to_string())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => {
                let out = match msg {
                    Ok(StreamMessage::Text(t)) => Message::Text(t.to_string()),
                    Ok(StreamMessage::Binary(b)) => Message::Binary(b.as_ref().clone()),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        Message::Text(json!({"type": "lagged", "skipped": n}).to_string())
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                if socket.send(out).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ChatOpenBody {
    #[serde(default)]
    model: Option<String>,
}

async fn chat_open(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let b: ChatOpenBody = body(&raw)?;
    let model = b.model.unwrap_or_else(|| crate::chat::child::MOCK_MODEL.to_string());
    let stopped = {
        let mut c = st.lock();
        if c.chat_open() {
            return Err(ApiError::conflict("ChatActive", "the chat assistant is already open"));
        }
        c.stop()
    };
    let inference_stopped = stopped.is_some();
    if let Some(h) = stopped {
        st.broadcast(json!({"type": "stopped"}));
        let _ = join_in_background(h).await;
    }
    let cmd = st.chat_command.clone();
    let handle = tokio::task::spawn_blocking(move || open_chat(&model, &cmd))
        .await
        .map_err(internal)??;
    let out = json!({"model": handle.model(), "inference_stopped": inference_stopped});
    let mut c = st.lock();
    if c.chat_open() {
        drop(c);
        tokio::task::spawn_blocking(move || handle.close());
        return Err(ApiError::conflict("ChatActive", "the chat assistant is already open"));
    }
    c.chat = Some(handle);
    Ok(Json(out))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ChatPromptBody {
    #[serde(default)]
    text: String,
    #[serde(default)]
    image_b64: Option<String>,
    /// Attach the raw frame of the latest result.
    #[serde(default)]
    attach_frame: bool,
}

async fn chat_prompt(State(st): State<Arc<AppState>>, raw: Bytes) -> Result<Json<Value>, ApiError> {
    let b: ChatPromptBody = body(&raw)?;
    let (handle, frame) = {
        let c = st.lock();
        let h = c
            .chat
            .clone()
            .filter(|h| h.state() != ChatState::Closed)
            .ok_or_else(|| ApiError::conflict("NoChat", "the chat assistant is not open"))?;
        (h, b.attach_frame.then(|| c.last.as_ref().map(|r| r.raw.clone())).flatten())
    };
    let image = match (b.image_b64, frame) {
        (Some(s), _) => Some(
            base64::engine::general_purpose::STANDARD
                .decode(s)
                .map_err(|e| ApiError::bad("BadRequest", format!("image_b64: {e}")))?,
        ),
        (None, Some(f)) => Some(f.encode_png().map_err(internal)?),
        (None, None) => None,
    };
    let st2 = st.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let msg = ChatMessage::user(b.text, image);
        let mut text = String::new();
        let mut chunks = 0usize;
        for chunk in handle.send_prompt(&msg)? {
            let chunk = chunk?;
            if chunk.terminal {
                st2.broadcast(json!({"type": "chat_done", "text": text}));
            } else {
                chunks += 1;
                text.push_str(&chunk.text);
                st2.broadcast(json!({"type": "chat_token", "text": chunk.text}));
            }
        }
        Ok::<_, ChatError>((text, chunks))
    })
    .await
    .map_err(internal)?;
    match outcome {
        Ok((text, chunks)) => Ok(Json(json!({"text": text, "chunks": chunks}))),
        Err(e) => {
            st.broadcast(json!({"type": "chat_error", "message": e.to_string()}));
            Err(e.into())
        }
    }
}

async fn chat_close(State(st): State<Arc<AppState>>) -> Json<Value> {
    let handle = st.lock().chat.take();
    let was_open = handle.is_some();
    if let Some(h) = handle {
        let _ = tokio::task::spawn_blocking(move || h.close()).await;
    }
    Json(json!({"closed": true, "was_open": was_open}))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/models", get(models))
        .route("/config", get(get_config).post(post_config))
        .route("/region", post(region))
        .route("/start", post(start))
        .route("/stop", post(stop))
        .route("/aggregate", get(aggregate_view))
        .route("/aggregate/propose", post(propose))
        .route("/aggregate/commit", post(commit))
        .route("/calibrate", post(calibrate))
        .route("/export", post(export))
        .route("/metrics", get(metrics))
        .route("/stream", get(stream_ws))
        .route("/chat/open", post(chat_open))
        .route("/chat/prompt", post(chat_prompt))
        .route("/chat/close", post(chat_close))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
