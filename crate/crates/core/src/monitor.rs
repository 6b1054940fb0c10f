//! Monitoring client.
//!
//! A [`Monitor`] owns at most one sensor connection and moves through three
//! states:
//!
//! ```text
//! DISCONNECTED --client_start--> CONNECTED --view_start--> VIEWING
//!      ^                          |    ^                      |
//!      +-------client_stop--------+    +------view_stop-------+
//! ```
//!
//! `client_stop` is also accepted from VIEWING, and a lost socket drops the
//! monitor back to DISCONNECTED. Incoming samples reach the [`PlotWindow`]
//! only while VIEWING. Stopping the view or the client flattens the window
//! to zeros.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::emulator::Axis;
use crate::wire::{self, Message};
use crate::STANDARD_GRAVITY;

pub const DEFAULT_WINDOW_CAPACITY: usize = 100;
pub const DEFAULT_LATENCY_TRIALS: usize = 12;
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("sample at t={t} precedes last stored t={last}")]
    TimeRegression { t: f64, last: f64 },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("cannot connect to {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("{op} not allowed while {state}")]
    State {
        op: &'static str,
        state: ConnectionState,
    },
    #[error("latency probe failed: {failed} of {trials} trials timed out")]
    ProbeFailed { failed: usize, trials: usize },
    #[error("session line {line}: {reason}")]
    SessionFormat { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Converts m/s² to G.
pub fn to_g(a: f64) -> Result<f64, MonitorError> {
    if a.is_finite() {
        Ok(a / STANDARD_GRAVITY)
    } else {
        Err(MonitorError::NonFinite(a))
    }
}

/// One reading in G, timed from the start of the current view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GSample {
    pub t: f64,
    pub gx: f64,
    pub gy: f64,
    pub gz: f64,
}

impl GSample {
    pub fn new(t: f64, gx: f64, gy: f64, gz: f64) -> Self {
        Self { t, gx, gy, gz }
    }

    pub fn from_accel(t: f64, ax: f64, ay: f64, az: f64) -> Result<Self, MonitorError> {
        Ok(Self::new(t, to_g(ax)?, to_g(ay)?, to_g(az)?))
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.gx,
            Axis::Y => self.gy,
            Axis::Z => self.gz,
        }
    }
}

/// Display offsets in G; they shift rendered lines only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOffsets {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for ChannelOffsets {
    fn default() -> Self {
        Self {
            x: 2.0,
            y: -2.0,
            z: 0.0,
        }
    }
}

/// Rolling window of the most recent samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotWindow {
    capacity: usize,
    samples: VecDeque<GSample>,
    offsets: ChannelOffsets,
}

impl Default for PlotWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_CAPACITY)
    }
}

impl PlotWindow {
    pub fn new(capacity: usize) -> Self {
        Self::with_offsets(capacity, ChannelOffsets::default())
    }

    pub fn with_offsets(capacity: usize, offsets: ChannelOffsets) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            offsets,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn offsets(&self) -> ChannelOffsets {
        self.offsets
    }

    pub fn samples(&self) -> impl Iterator<Item = &GSample> {
        self.samples.iter()
    }

    pub fn push(&mut self, sample: GSample) -> Result<(), MonitorError> {
        if let Some(last) = self.samples.back() {
            if sample.t < last.t {
                return Err(MonitorError::TimeRegression {
                    t: sample.t,
                    last: last.t,
                });
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        Ok(())
    }

    /// Zeroes every stored value, keeping sample times.
    pub fn flatten(&mut self) {
        for s in &mut self.samples {
            s.gx = 0.0;
            s.gy = 0.0;
            s.gz = 0.0;
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn render(&self) -> RenderModel {
        let line = |f: fn(&GSample) -> f64, off: f64| -> Vec<(f64, f64)> {
            self.samples.iter().map(|s| (s.t, f(s) + off)).collect()
        };
        RenderModel {
            x: line(|s| s.gx, self.offsets.x),
            y: line(|s| s.gy, self.offsets.y),
            z: line(|s| s.gz, self.offsets.z),
        }
    }
}

/// Three polylines of `(t, value + offset)` vertices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderModel {
    pub x: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
    pub z: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Alarm when |value| exceeds this, in G.
    pub limit: f64,
    /// Re-arm once |value| stays at or below `limit - rearm_margin` ...
    pub rearm_margin: f64,
    /// ... for this many seconds.
    pub rearm_hold: f64,
}

impl ThresholdConfig {
    pub fn new(limit: f64) -> Result<Self, MonitorError> {
        Self::with_hysteresis(limit, 0.1, 1.0)
    }

    pub fn with_hysteresis(limit: f64, margin: f64, hold: f64) -> Result<Self, MonitorError> {
        if !(limit.is_finite() && margin >= 0.0 && limit > margin && hold >= 0.0) {
            return Err(MonitorError::InvalidThreshold(format!(
                "need limit > margin >= 0 and hold >= 0 (limit {limit}, margin {margin}, hold {hold})"
            )));
        }
        Ok(Self {
            limit,
            rearm_margin: margin,
            rearm_hold: hold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub t: f64,
    pub channel: Axis,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ChannelAlarm {
    armed: bool,
    quiet_since: Option<f64>,
}

impl Default for ChannelAlarm {
    fn default() -> Self {
        Self {
            armed: true,
            quiet_since: None,
        }
    }
}

/// Per-channel hysteresis state for [`check_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlarmState {
    channels: [ChannelAlarm; 3],
}

impl AlarmState {
    pub fn is_armed(&self, axis: Axis) -> bool {
        self.channels[axis as usize].armed
    }
}

const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

/// Fires once per excursion above the limit. A channel re-arms only after
/// staying at or below `limit - rearm_margin` for `rearm_hold` seconds.
pub fn check_threshold(
    sample: &GSample,
    cfg: &ThresholdConfig,
    state: &mut AlarmState,
) -> Vec<AlarmEvent> {
    let mut events = Vec::new();
    for (axis, ch) in AXES.iter().zip(state.channels.iter_mut()) {
        let v = sample.get(*axis);
        if ch.armed {
            if v.abs() > cfg.limit {
                events.push(AlarmEvent {
                    t: sample.t,
                    channel: *axis,
                    value: v,
                });
                ch.armed = false;
                ch.quiet_since = None;
            }
        } else if v.abs() <= cfg.limit - cfg.rearm_margin {
            let since = *ch.quiet_since.get_or_insert(sample.t);
            if sample.t - since >= cfg.rearm_hold {
                ch.armed = true;
                ch.quiet_since = None;
            }
        } else {
            ch.quiet_since = None;
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Round-trip times of the successful trials, in seconds.
    pub trials: Vec<f64>,
    pub failed: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
    pub one_way_estimate: f64,
}

impl LatencyReport {
    fn from_trials(trials: Vec<f64>, failed: usize) -> Self {
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let min = trials.iter().copied().fold(f64::INFINITY, f64::min);
        let max = trials.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let std = (trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            // mean of a list can round just outside [min, max]
            mean: mean.clamp(min, max),
            min,
            max,
            std,
            one_way_estimate: mean / 2.0,
            trials,
            failed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub trials: usize,
    pub spacing: Duration,
    pub timeout: Duration,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            trials: DEFAULT_LATENCY_TRIALS,
            spacing: Duration::from_millis(100),
            timeout: Duration::from_secs(5),
        }
    }
}

type PongRx = mpsc::Receiver<(String, Instant)>;

fn run_probe(
    opts: &ProbeOptions,
    mut send: impl FnMut(&str) -> std::io::Result<()>,
    pongs: &PongRx,
) -> Result<LatencyReport, MonitorError> {
    if opts.trials == 0 {
        return Err(MonitorError::ProbeFailed {
            failed: 0,
            trials: 0,
        });
    }
    let tag = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    let mut rtts = Vec::with_capacity(opts.trials);
    let mut failed = 0;
    for i in 0..opts.trials {
        if i > 0 {
            thread::sleep(opts.spacing);
        }
        let nonce = format!("lat{tag:08x}-{i}");
        let line = wire::encode_ping(&nonce).expect("generated nonce is valid");
        let sent = Instant::now();
        send(&line)?;
        let deadline = sent + opts.timeout;
        let arrival = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match pongs.recv_timeout(left) {
                Ok((n, at)) if n == nonce => break Some(at),
                Ok(_) => continue,
                Err(_) => break None,
            }
        };
        match arrival {
            Some(at) => rtts.push(at.duration_since(sent).as_secs_f64()),
            None => failed += 1,
        }
    }
    if failed * 2 >= opts.trials || rtts.is_empty() {
        return Err(MonitorError::ProbeFailed {
            failed,
            trials: opts.trials,
        });
    }
    Ok(LatencyReport::from_trials(rtts, failed))
}

fn connect(addr: &str) -> Result<TcpStream, MonitorError> {
    let err = |reason: String| MonitorError::Connect {
        addr: addr.to_string(),
        reason,
    };
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| err(e.to_string()))?
        .collect();
    let mut last = String::from("no addresses resolved");
    for a in addrs {
        match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(err(last))
}

/// Round-trip probe over a dedicated connection. DATA lines are discarded.
pub fn measure_latency(addr: &str, opts: &ProbeOptions) -> Result<LatencyReport, MonitorError> {
    let stream = connect(addr)?;
    let (tx, rx) = mpsc::channel();
    let reader = stream.try_clone()?;
    let handle = thread::spawn(move || {
        let mut lines = BufReader::new(reader);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match lines.read_until(b'\n', &mut buf) {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
            if let Ok(Message::Pong(n)) = wire::parse_bytes(&buf) {
                if tx.send((n, Instant::now())).is_err() {
                    break;
                }
            }
        }
    });
    let mut writer = stream.try_clone()?;
    let report = run_probe(opts, |line| writer.write_all(line.as_bytes()), &rx);
    let _ = stream.shutdown(Shutdown::Both);
    let _ = handle.join();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub sensor: String,
    pub rate_hz: f64,
    pub started_unix_ms: i64,
    pub threshold_g: Option<f64>,
}

impl SessionMeta {
    pub fn now(sensor: impl Into<String>, rate_hz: f64, threshold_g: Option<f64>) -> Self {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0);
        Self {
            sensor: sensor.into(),
            rate_hz,
            started_unix_ms,
            threshold_g,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: SessionMeta,
}

/// JSONL session writer: a metadata header then one line per sample.
pub struct SessionRecorder<W: Write> {
    out: BufWriter<W>,
    written: u64,
}

impl<W: Write> SessionRecorder<W> {
    pub fn new(sink: W, meta: &SessionMeta) -> Result<Self, MonitorError> {
        if meta.rate_hz.is_nan() || meta.rate_hz <= 0.0 {
            return Err(MonitorError::SessionFormat {
                line: 1,
                reason: format!("sample rate {} must be positive", meta.rate_hz),
            });
        }
        let mut out = BufWriter::new(sink);
        serde_json::to_writer(&mut out, &MetaLine { meta: meta.clone() })
            .map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(Self { out, written: 0 })
    }

    pub fn append(&mut self, sample: &GSample) -> Result<(), MonitorError> {
        serde_json::to_writer(&mut self.out, sample).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn flush(&mut self) -> Result<(), MonitorError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, MonitorError> {
        self.flush()?;
        self.out
            .into_inner()
            .map_err(|e| MonitorError::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub samples: Vec<GSample>,
}

impl Session {
    pub fn channel(&self, axis: Axis) -> Vec<f64> {
        self.samples.iter().map(|s| s.get(axis)).collect()
    }
}

/// Reads a session written by [`SessionRecorder`]. Line numbers in errors
/// are 1-based.
pub fn load_session(source: impl BufRead) -> Result<Session, MonitorError> {
    let mut lines = source.lines().enumerate();
    let (_, header) = lines.next().ok_or(MonitorError::SessionFormat {
        line: 1,
        reason: "missing metadata header".into(),
    })?;
    let meta = serde_json::from_str::<MetaLine>(&header?)
        .map_err(|e| MonitorError::SessionFormat {
            line: 1,
            reason: format!("bad metadata header: {e}"),
        })?
        .meta;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: GSample = serde_json::from_str(&line).map_err(|e| MonitorError::SessionFormat {
            line: i + 1,
            reason: e.to_string(),
        })?;
        samples.push(s);
    }
    Ok(Session { meta, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConnectionState {
    Disconnected,
    Connected,
    Viewing,
}

impl std::fmt::Display for ConnectionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConnectionState::Disconnected => "DISCONNECTED",
            ConnectionState::Connected => "CONNECTED",
            ConnectionState::Viewing => "VIEWING",
        })
    }
}

/// Pushed to subscribers from the ingest thread and control operations.
#[derive(Debug, Clone, PartialEq)]
pub enum MonitorEvent {
    Alarm(AlarmEvent),
    State(ConnectionState),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusReport {
    pub state: ConnectionState,
    pub sensor: Option<String>,
    pub samples_received: u64,
    pub threshold_g: Option<f64>,
    pub last_alarm: Option<AlarmEvent>,
    pub latency: Option<LatencyReport>,
}

/// Consistent copy of the window plus stream counters.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSnapshot {
    pub samples: Vec<GSample>,
    pub offsets: ChannelOffsets,
    /// DATA lines received on the current connection, viewed or not.
    pub received: u64,
}

impl WindowSnapshot {
    pub fn render(&self) -> RenderModel {
        let mut w = PlotWindow::with_offsets(self.samples.len().max(1), self.offsets);
        w.samples.extend(self.samples.iter().copied());
        w.render()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    pub window_capacity: usize,
    pub offsets: ChannelOffsets,
    /// Nominal sensor rate written to session headers.
    pub nominal_rate_hz: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window_capacity: DEFAULT_WINDOW_CAPACITY,
            offsets: ChannelOffsets::default(),
            nominal_rate_hz: crate::emulator::DEFAULT_SAMPLE_RATE,
        }
    }
}

struct Ingest {
    window: PlotWindow,
    received: u64,
    viewing: bool,
    view_started: Instant,
    alarm_state: AlarmState,
    threshold: Option<ThresholdConfig>,
    last_alarm: Option<AlarmEvent>,
    recorder: Option<SessionRecorder<Box<dyn Write + Send>>>,
}

struct Shared {
    ingest: Mutex<Ingest>,
    events: broadcast::Sender<MonitorEvent>,
    pongs: Mutex<Option<mpsc::Sender<(String, Instant)>>>,
}

impl Shared {
    fn read(&self) -> MutexGuard<'_, Ingest> {
        self.ingest.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> MutexGuard<'_, Ingest> {
        self.read()
    }

    fn emit(&self, ev: MonitorEvent) {
        // no receivers is fine
        let _ = self.events.send(ev);
    }

    fn on_data(&self, ax: f64, ay: f64, az: f64) {
        let mut ing = self.write();
        ing.received += 1;
        if !ing.viewing {
            return;
        }
        let t = ing.view_started.elapsed().as_secs_f64();
        let Ok(sample) = GSample::from_accel(t, ax, ay, az) else {
            return;
        };
        if let Some(cfg) = ing.threshold {
            let events = check_threshold(&sample, &cfg, &mut ing.alarm_state);
            for ev in events {
                ing.last_alarm = Some(ev);
                // alarm goes out before the sample is visible in snapshots
                self.emit(MonitorEvent::Alarm(ev));
            }
        }
        if let Err(e) = ing.window.push(sample) {
            tracing::warn!(error = %e, "dropping sample");
            return;
        }
        if let Some(rec) = ing.recorder.as_mut() {
            if let Err(e) = rec.append(&sample) {
                tracing::error!(error = %e, "recording failed, stopping recorder");
                ing.recorder = None;
            }
        }
    }
}

struct Connection {
    sensor: String,
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
    lost: Arc<AtomicBool>,
    stopping: Arc<AtomicBool>,
}

struct Control {
    state: ConnectionState,
    conn: Option<Connection>,
    last_sensor: Option<String>,
    latency: Option<LatencyReport>,
}

enum Start {
    Connect,
    View,
    Record(Box<dyn Write + Send>),
}

/// Thread-safe monitoring client; clones share one connection.
#[derive(Clone)]
pub struct Monitor {
    shared: Arc<Shared>,
    control: Arc<Mutex<Control>>,
    cfg: MonitorConfig,
}

impl Default for Monitor {
    fn default() -> Self {
        Self::new(MonitorConfig::default())
    }
}

impl Monitor {
    pub fn new(cfg: MonitorConfig) -> Self {
        let (events, _) = broadcast::channel(1024);
        Self {
            shared: Arc::new(Shared {
                ingest: Mutex::new(Ingest {
                    window: PlotWindow::with_offsets(cfg.window_capacity, cfg.offsets),
                    received: 0,
                    viewing: false,
                    view_started: Instant::now(),
                    alarm_state: AlarmState::default(),
                    threshold: None,
                    last_alarm: None,
                    recorder: None,
                }),
                events,
                pongs: Mutex::new(None),
            }),
            control: Arc::new(Mutex::new(Control {
                state: ConnectionState::Disconnected,
                conn: None,
                last_sensor: None,
                latency: None,
            })),
            cfg,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn subscribe(&self) -> broadcast::Receiver<MonitorEvent> {
        self.shared.events.subscribe()
    }

    /// Locks control and folds in a socket loss noticed by the reader.
    fn control(&self) -> MutexGuard<'_, Control> {
        let mut ctl = self.control.lock().unwrap_or_else(|e| e.into_inner());
        let lost = ctl
            .conn
            .as_ref()
            .is_some_and(|c| c.lost.load(Ordering::SeqCst));
        if lost {
            let mut conn = ctl.conn.take().expect("checked above");
            if let Some(h) = conn.reader.take() {
                let _ = h.join();
            }
            ctl.state = ConnectionState::Disconnected;
        }
        ctl
    }

    pub fn state(&self) -> ConnectionState {
        self.control().state
    }

    pub fn client_start(&self, addr: &str) -> Result<ConnectionState, MonitorError> {
        self.start(addr, Start::Connect)
    }

    /// `client_start` and `view_start` in one step, so no sample arriving on
    /// the new connection misses the window.
    pub fn client_start_viewing(&self, addr: &str) -> Result<ConnectionState, MonitorError> {
        self.start(addr, Start::View)
    }

    /// `client_start_viewing` with a recorder attached before the first
    /// sample can arrive.
    pub fn client_start_recording(
        &self,
        addr: &str,
        sink: Box<dyn Write + Send>,
    ) -> Result<ConnectionState, MonitorError> {
        self.start(addr, Start::Record(sink))
    }

    fn start(&self, addr: &str, mode: Start) -> Result<ConnectionState, MonitorError> {
        let mut ctl = self.control();
        if ctl.state != ConnectionState::Disconnected {
            return Err(MonitorError::State {
                op: "client_start",
                state: ctl.state,
            });
        }
        let stream = connect(addr)?;
        let read_half = stream.try_clone()?;
        let view = !matches!(mode, Start::Connect);
        {
            let mut ing = self.shared.write();
            if let Start::Record(sink) = mode {
                let meta = SessionMeta::now(
                    addr,
                    self.cfg.nominal_rate_hz,
                    ing.threshold.map(|t| t.limit),
                );
                ing.recorder = Some(SessionRecorder::new(sink, &meta)?);
            }
            ing.received = 0;
            if view {
                Self::begin_view(&mut ing);
            }
        }
        let lost = Arc::new(AtomicBool::new(false));
        let stopping = Arc::new(AtomicBool::new(false));
        let reader = {
            let shared = self.shared.clone();
            let (lost, stopping) = (lost.clone(), stopping.clone());
            thread::spawn(move || read_loop(read_half, &shared, &lost, &stopping))
        };
        ctl.conn = Some(Connection {
            sensor: addr.to_string(),
            stream,
            reader: Some(reader),
            lost,
            stopping,
        });
        ctl.last_sensor = Some(addr.to_string());
        ctl.state = ConnectionState::Connected;
        self.shared.emit(MonitorEvent::State(ctl.state));
        if view {
            ctl.state = ConnectionState::Viewing;
            self.shared.emit(MonitorEvent::State(ctl.state));
        }
        Ok(ctl.state)
    }

    fn begin_view(ing: &mut Ingest) {
        ing.window.clear();
        ing.alarm_state = AlarmState::default();
        ing.view_started = Instant::now();
        ing.viewing = true;
    }

    pub fn client_stop(&self) -> Result<ConnectionState, MonitorError> {
        let mut ctl = self.control();
        if ctl.state == ConnectionState::Disconnected {
            return Err(MonitorError::State {
                op: "client_stop",
                state: ctl.state,
            });
        }
        let mut conn = ctl.conn.take().expect("connected state has a connection");
        conn.stopping.store(true, Ordering::SeqCst);
        let _ = conn.stream.shutdown(Shutdown::Both);
        if let Some(h) = conn.reader.take() {
            let _ = h.join();
        }
        {
            let mut ing = self.shared.write();
            ing.viewing = false;
            ing.window.flatten();
            if let Some(rec) = ing.recorder.as_mut() {
                rec.flush()?;
            }
        }
        ctl.state = ConnectionState::Disconnected;
        self.shared.emit(MonitorEvent::State(ctl.state));
        Ok(ctl.state)
    }

    pub fn view_start(&self) -> Result<ConnectionState, MonitorError> {
        let mut ctl = self.control();
        if ctl.state != ConnectionState::Connected {
            return Err(MonitorError::State {
                op: "view_start",
                state: ctl.state,
            });
        }
        Self::begin_view(&mut self.shared.write());
        ctl.state = ConnectionState::Viewing;
        self.shared.emit(MonitorEvent::State(ctl.state));
        Ok(ctl.state)
    }

    pub fn view_stop(&self) -> Result<ConnectionState, MonitorError> {
        let mut ctl = self.control();
        if ctl.state != ConnectionState::Viewing {
            return Err(MonitorError::State {
                op: "view_stop",
                state: ctl.state,
            });
        }
        {
            let mut ing = self.shared.write();
            ing.viewing = false;
            ing.window.flatten();
        }
        ctl.state = ConnectionState::Connected;
        self.shared.emit(MonitorEvent::State(ctl.state));
        Ok(ctl.state)
    }

    pub fn set_threshold(&self, cfg: Option<ThresholdConfig>) {
        let mut ing = self.shared.write();
        ing.threshold = cfg;
        ing.alarm_state = AlarmState::default();
    }

    pub fn threshold(&self) -> Option<ThresholdConfig> {
        self.shared.read().threshold
    }

    pub fn snapshot(&self) -> WindowSnapshot {
        let ing = self.shared.read();
        WindowSnapshot {
            samples: ing.window.samples().copied().collect(),
            offsets: ing.window.offsets(),
            received: ing.received,
        }
    }

    pub fn status(&self) -> StatusReport {
        let ctl = self.control();
        let ing = self.shared.read();
        StatusReport {
            state: ctl.state,
            sensor: ctl
                .conn
                .as_ref()
                .map(|c| c.sensor.clone())
                .or_else(|| ctl.last_sensor.clone()),
            samples_received: ing.received,
            threshold_g: ing.threshold.map(|t| t.limit),
            last_alarm: ing.last_alarm,
            latency: ctl.latency.clone(),
        }
    }

    /// Starts appending every pushed sample to `sink`. Requires VIEWING.
    pub fn start_recording(&self, sink: Box<dyn Write + Send>) -> Result<(), MonitorError> {
        let ctl = self.control();
        if ctl.state != ConnectionState::Viewing {
            return Err(MonitorError::State {
                op: "record_session",
                state: ctl.state,
            });
        }
        let sensor = ctl
            .conn
            .as_ref()
            .map(|c| c.sensor.clone())
            .unwrap_or_default();
        let mut ing = self.shared.write();
        let meta = SessionMeta::now(
            sensor,
            self.cfg.nominal_rate_hz,
            ing.threshold.map(|t| t.limit),
        );
        ing.recorder = Some(SessionRecorder::new(sink, &meta)?);
        Ok(())
    }

    /// Flushes and detaches the recorder, returning the sample count written.
    pub fn stop_recording(&self) -> Result<u64, MonitorError> {
        let rec = self.shared.write().recorder.take();
        match rec {
            Some(rec) => {
                let n = rec.written();
                rec.finish()?;
                Ok(n)
            }
            None => Ok(0),
        }
    }

    /// Latency probe over the live connection.
    pub fn probe_latency(&self, opts: &ProbeOptions) -> Result<LatencyReport, MonitorError> {
        let mut writer = {
            let ctl = self.control();
            match &ctl.conn {
                Some(c) => c.stream.try_clone()?,
                None => {
                    return Err(MonitorError::State {
                        op: "measure_latency",
                        state: ctl.state,
                    })
                }
            }
        };
        let (tx, rx) = mpsc::channel();
        *self.shared.pongs.lock().unwrap_or_else(|e| e.into_inner()) = Some(tx);
        let report = run_probe(opts, |line| writer.write_all(line.as_bytes()), &rx);
        *self.shared.pongs.lock().unwrap_or_else(|e| e.into_inner()) = None;
        let report = report?;
        self.control().latency = Some(report.clone());
        Ok(report)
    }
}

fn read_loop(stream: TcpStream, shared: &Shared, lost: &AtomicBool, stopping: &AtomicBool) {
    let mut lines = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match lines.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        match wire::parse_bytes(&buf) {
            Ok(Message::Data { ax, ay, az }) => shared.on_data(ax, ay, az),
            Ok(Message::Pong(nonce)) => {
                let at = Instant::now();
                if let Some(tx) = shared
                    .pongs
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .as_ref()
                {
                    let _ = tx.send((nonce, at));
                }
            }
            Ok(Message::Ping(_)) => {}
            Err(e) => tracing::warn!(error = %e, "bad line from sensor"),
        }
    }
    if !stopping.load(Ordering::SeqCst) {
        tracing::info!("sensor connection lost");
        {
            let mut ing = shared.write();
            ing.viewing = false;
            ing.window.flatten();
            if let Some(rec) = ing.recorder.as_mut() {
                let _ = rec.flush();
            }
        }
        lost.store(true, Ordering::SeqCst);
        shared.emit(MonitorEvent::State(ConnectionState::Disconnected));
    }
}
