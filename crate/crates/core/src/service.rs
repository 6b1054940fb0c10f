//! HTTP control surface and WebSocket frame stream over a [`Monitor`].
//!
//! | method | path            | monitor operation          |
//! |--------|-----------------|----------------------------|
//! | POST   | `/client/start` | `client_start(sensor)`     |
//! | POST   | `/client/stop`  | `client_stop()`            |
//! | POST   | `/view/start`   | `view_start()`             |
//! | POST   | `/view/stop`    | `view_stop()`              |
//! | PUT    | `/threshold`    | `set_threshold(Some(..))`  |
//! | DELETE | `/threshold`    | `set_threshold(None)`      |
//! | GET    | `/status`       | `status()`                 |
//! | POST   | `/latency`      | `probe_latency(..)`        |
//! | GET    | `/stream`       | WebSocket frame stream     |
//!
//! Stream frames are `{"seq": n, "type": "window"|"alarm"|"status", "payload": ..}`
//! with `seq` counting up from 1 on every connection.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};

use crate::monitor::{
    ChannelOffsets, Monitor, MonitorError, MonitorEvent, ProbeOptions, StatusReport,
    ThresholdConfig, WindowSnapshot,
};

/// Frame period for window snapshots (20 Hz).
pub const WINDOW_FRAME_PERIOD: Duration = Duration::from_millis(50);
/// Frames a client may fall behind (2 s of window frames) before it is dropped.
pub const CLIENT_BACKLOG_FRAMES: usize = 40;
/// A single socket write stalling this long drops the client.
pub const CLIENT_SEND_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Window,
    Alarm,
    Status,
}

/// A frame before its per-client sequence number is assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: FrameKind,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPayload {
    pub t: Vec<f64>,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub gz: Vec<f64>,
    pub offsets: ChannelOffsets,
}

impl From<&WindowSnapshot> for WindowPayload {
    fn from(s: &WindowSnapshot) -> Self {
        Self {
            t: s.samples.iter().map(|x| x.t).collect(),
            gx: s.samples.iter().map(|x| x.gx).collect(),
            gy: s.samples.iter().map(|x| x.gy).collect(),
            gz: s.samples.iter().map(|x| x.gz).collect(),
            offsets: s.offsets,
        }
    }
}

impl Frame {
    pub fn window(snapshot: &WindowSnapshot) -> Self {
        Self {
            kind: FrameKind::Window,
            payload: serde_json::to_value(WindowPayload::from(snapshot))
                .expect("window payload serializes"),
        }
    }

    pub fn from_event(ev: &MonitorEvent, monitor: &Monitor) -> Self {
        match ev {
            MonitorEvent::Alarm(a) => Self {
                kind: FrameKind::Alarm,
                payload: serde_json::to_value(a).expect("alarm serializes"),
            },
            MonitorEvent::State(_) => Self::status(&monitor.status()),
        }
    }

    pub fn status(report: &StatusReport) -> Self {
        Self {
            kind: FrameKind::Status,
            payload: serde_json::to_value(report).expect("status serializes"),
        }
    }
}

/// Fan-out of frames to stream clients with bounded per-client queues.
#[derive(Default)]
pub struct FrameHub {
    clients: Mutex<Vec<(u64, mpsc::Sender<Frame>)>>,
    next_id: AtomicU64,
}

impl FrameHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self) -> (u64, mpsc::Receiver<Frame>) {
        let (tx, rx) = mpsc::channel(CLIENT_BACKLOG_FRAMES);
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.lock().push((id, tx));
        (id, rx)
    }

    pub fn unregister(&self, id: u64) {
        self.lock().retain(|(cid, _)| *cid != id);
    }

    pub fn client_count(&self) -> usize {
        self.lock().len()
    }

    /// Queues `frame` for every client; a client whose queue is full or
    /// closed is removed, which ends its stream.
    pub fn publish(&self, frame: &Frame) {
        self.lock()
            .retain(|(id, tx)| match tx.try_send(frame.clone()) {
                Ok(()) => true,
                Err(mpsc::error::TrySendError::Full(_)) => {
                    tracing::info!(client = id, "dropping stream client with full backlog");
                    false
                }
                Err(mpsc::error::TrySendError::Closed(_)) => false,
            });
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<(u64, mpsc::Sender<Frame>)>> {
        self.clients.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Publishes a window frame every [`WINDOW_FRAME_PERIOD`] and an alarm or
/// status frame for each monitor event. Pending events are flushed before
/// each window frame, so an alarm never trails the window showing it.
pub async fn broadcast_frames(monitor: Monitor, hub: Arc<FrameHub>) {
    let mut events = monitor.subscribe();
    let mut tick = tokio::time::interval(WINDOW_FRAME_PERIOD);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                loop {
                    match events.try_recv() {
                        Ok(ev) => hub.publish(&Frame::from_event(&ev, &monitor)),
                        Err(broadcast::error::TryRecvError::Lagged(n)) => {
                            tracing::warn!(skipped = n, "event stream lagged");
                        }
                        Err(_) => break,
                    }
                }
                hub.publish(&Frame::window(&monitor.snapshot()));
            }
            ev = events.recv() => match ev {
                Ok(ev) => hub.publish(&Frame::from_event(&ev, &monitor)),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(skipped = n, "event stream lagged");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    monitor: Monitor,
    hub: Arc<FrameHub>,
    control: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(monitor: Monitor) -> Self {
        Self {
            monitor,
            hub: Arc::new(FrameHub::new()),
            control: Arc::new(tokio::sync::Mutex::new(())),
        }
    }

    pub fn hub(&self) -> Arc<FrameHub> {
        self.hub.clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: message.into(),
        }
    }
}

impl From<MonitorError> for ApiError {
    fn from(e: MonitorError) -> Self {
        let (status, kind) = match &e {
            MonitorError::State { .. } => (StatusCode::CONFLICT, "state"),
            MonitorError::Connect { .. } => (StatusCode::BAD_GATEWAY, "connect"),
            MonitorError::ProbeFailed { .. } => (StatusCode::GATEWAY_TIMEOUT, "probe"),
            MonitorError::InvalidThreshold(_) => (StatusCode::BAD_REQUEST, "threshold"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": {"kind": self.kind, "message": self.message}})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a blocking monitor operation with control requests serialized.
async fn control<F>(state: &AppState, op: F) -> ApiResult<StatusReport>
where
    F: FnOnce(&Monitor) -> Result<(), MonitorError> + Send + 'static,
{
    let _guard = state.control.lock().await;
    let monitor = state.monitor.clone();
    tokio::task::spawn_blocking(move || {
        op(&monitor)?;
        Ok(Json(monitor.status()))
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal",
        message: e.to_string(),
    })?
}

#[derive(Debug, Deserialize)]
pub struct StartRequest {
    pub sensor: String,
}

#[derive(Debug, Deserialize)]
pub struct ThresholdRequest {
    pub limit_g: f64,
    pub rearm_margin_g: Option<f64>,
    pub rearm_hold_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct LatencyRequest {
    pub trials: Option<usize>,
}

async fn client_start(
    State(state): State<AppState>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> ApiResult<StatusReport> {
    let Json(req) = body?;
    if req.sensor.trim().is_empty() {
        return Err(ApiError::bad_request("sensor address is empty"));
    }
    control(&state, move |m| m.client_start(&req.sensor).map(drop)).await
}

async fn client_stop(State(state): State<AppState>) -> ApiResult<StatusReport> {
    control(&state, |m| m.client_stop().map(drop)).await
}

async fn view_start(State(state): State<AppState>) -> ApiResult<StatusReport> {
    control(&state, |m| m.view_start().map(drop)).await
}

async fn view_stop(State(state): State<AppState>) -> ApiResult<StatusReport> {
    control(&state, |m| m.view_stop().map(drop)).await
}

async fn set_threshold(
    State(state): State<AppState>,
    body: Result<Json<ThresholdRequest>, JsonRejection>,
) -> ApiResult<StatusReport> {
    let Json(req) = body?;
    let cfg = ThresholdConfig::with_hysteresis(
        req.limit_g,
        req.rearm_margin_g.unwrap_or(0.1),
        req.rearm_hold_s.unwrap_or(1.0),
    )?;
    control(&state, move |m| {
        m.set_threshold(Some(cfg));
        Ok(())
    })
    .await
}

async fn clear_threshold(State(state): State<AppState>) -> ApiResult<StatusReport> {
    control(&state, |m| {
        m.set_threshold(None);
        Ok(())
    })
    .await
}

async fn status(State(state): State<AppState>) -> Json<StatusReport> {
    Json(state.monitor.status())
}

async fn latency(
    State(state): State<AppState>,
    body: Option<Json<LatencyRequest>>,
) -> ApiResult<StatusReport> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let opts = ProbeOptions {
        trials: req.trials.unwrap_or(ProbeOptions::default().trials),
        ..ProbeOptions::default()
    };
    control(&state, move |m| m.probe_latency(&opts).map(drop)).await
}

async fn stream(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| stream_client(socket, state))
}

async fn stream_client(mut socket: WebSocket, state: AppState) {
    let (id, mut frames) = state.hub.register();
    let mut seq = 0u64;
    let initial = Frame::status(&state.monitor.status());
    let mut pending = Some(initial);
    loop {
        let frame = match pending.take() {
            Some(f) => f,
            None => tokio::select! {
                f = frames.recv() => match f {
                    Some(f) => f,
                    None => break,
                },
                msg = socket.recv() => match msg {
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                },
            },
        };
        seq += 1;
        let text = serde_json::to_string(&StreamFrame {
            seq,
            kind: frame.kind,
            payload: frame.payload,
        })
        .expect("frame serializes");
        match tokio::time::timeout(
            CLIENT_SEND_TIMEOUT,
            socket.send(WsMessage::Text(text.into())),
        )
        .await
        {
            Ok(Ok(())) => {}
            _ => break,
        }
    }
    state.hub.unregister(id);
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/client/start", post(client_start))
        .route("/client/stop", post(client_stop))
        .route("/view/start", post(view_start))
        .route("/view/stop", post(view_stop))
        .route("/threshold", put(set_threshold).delete(clear_threshold))
        .route("/status", get(status))
        .route("/latency", post(latency))
        .route("/stream", get(stream))
        .with_state(state)
}

/// Serves the API and the frame broadcaster until the listener fails.
pub async fn serve_api(listener: tokio::net::TcpListener, monitor: Monitor) -> std::io::Result<()> {
    serve_api_until(listener, monitor, std::future::pending()).await
}

/// Like [`serve_api`], returning once `shutdown` resolves and open requests finish.
pub async fn serve_api_until<F>(
    listener: tokio::net::TcpListener,
    monitor: Monitor,
    shutdown: F,
) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    let state = AppState::new(monitor.clone());
    let broadcaster = tokio::spawn(broadcast_frames(monitor, state.hub()));
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    broadcaster.abort();
    result
}
