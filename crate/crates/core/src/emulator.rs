//! Stand-in for a wireless accelerometer mounted on a shaker.
//!
//! [`synth_sample`] produces a deterministic triaxial reading for any time
//! `t`, and [`EmulatorServer`] streams readings from a [`SampleSource`] over
//! TCP using the line protocol in [`crate::wire`], one client at a time.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{self, AccelSample, Message};
use crate::STANDARD_GRAVITY;

pub const DEFAULT_PORT: u16 = 8290;
pub const DEFAULT_SAMPLE_RATE: f64 = 20.0;
pub const MAX_DWELL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("invalid waveform config: {0}")]
    InvalidConfig(String),
    #[error("sample time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis {other:?}, expected x, y or z")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    /// Hz, in (0, 10].
    pub frequency: f64,
    /// Peak amplitude in G.
    pub amplitude: f64,
    /// Fraction of each half-period spent paused at the extreme.
    pub dwell_fraction: f64,
    /// Gaussian noise standard deviation in G, on every axis.
    pub noise_std: f64,
    pub axis: Axis,
    pub seed: u64,
    pub sample_rate: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            frequency: 1.0,
            amplitude: 1.0,
            dwell_fraction: 0.0,
            noise_std: 0.0,
            axis: Axis::Z,
            seed: 0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<(), EmulatorError> {
        let bad = |m: String| Err(EmulatorError::InvalidConfig(m));
        if !(self.frequency > 0.0 && self.frequency <= 10.0) {
            return bad(format!("frequency {} Hz outside (0, 10]", self.frequency));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude {} G must be positive", self.amplitude));
        }
        if !(0.0..=MAX_DWELL_FRACTION).contains(&self.dwell_fraction) {
            return bad(format!(
                "dwell fraction {} outside [0, {MAX_DWELL_FRACTION}]",
                self.dwell_fraction
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} G must be >= 0", self.noise_std));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate >= 2.0 * self.frequency) {
            return bad(format!(
                "sample rate {} Hz below Nyquist for {} Hz",
                self.sample_rate, self.frequency
            ));
        }
        Ok(())
    }
}

/// Unit-amplitude sine whose phase holds at ±1 for `dwell` of every
/// half-period. The moving parts are time-compressed so the period stays
/// one cycle. `cycles` is `f * t`.
pub fn dwell_sine(cycles: f64, dwell: f64) -> f64 {
    if dwell == 0.0 {
        return (2.0 * std::f64::consts::PI * cycles).sin();
    }
    let u = cycles.rem_euclid(1.0);
    let (s, sign) = if u < 0.5 {
        (2.0 * u, 1.0)
    } else {
        (2.0 * u - 1.0, -1.0)
    };
    let rise = (1.0 - dwell) / 2.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta = if s < rise {
        half_pi * s / rise
    } else if s < rise + dwell {
        half_pi
    } else {
        half_pi + half_pi * (s - rise - dwell) / rise
    };
    sign * theta.sin()
}

/// Deterministic reading at time `t`, in m/s².
pub fn synth_sample(cfg: &WaveformConfig, t: f64) -> Result<AccelSample, EmulatorError> {
    if t.is_nan() || t < 0.0 {
        return Err(EmulatorError::NegativeTime(t));
    }
    let mut g = [0.0; 3];
    if cfg.noise_std > 0.0 {
        for (ch, v) in g.iter_mut().enumerate() {
            *v = cfg.noise_std * gaussian(cfg.seed, t, ch as u64);
        }
    }
    let driven = match cfg.axis {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    };
    g[driven] += cfg.amplitude * dwell_sine(cfg.frequency * t, cfg.dwell_fraction);
    Ok(AccelSample::new(
        t,
        g[0] * STANDARD_GRAVITY,
        g[1] * STANDARD_GRAVITY,
        g[2] * STANDARD_GRAVITY,
    ))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw keyed on (seed, t, channel).
fn gaussian(seed: u64, t: f64, channel: u64) -> f64 {
    let key = splitmix64(splitmix64(seed ^ splitmix64(t.to_bits())) ^ channel);
    ChaCha8Rng::seed_from_u64(key).sample(StandardNormal)
}

/// Feeds samples to a streaming session. Each client gets a fresh source.
pub trait SampleSource: Send {
    /// Emission rate in samples per second.
    fn rate(&self) -> f64;
    /// `None` ends the session.
    fn next_sample(&mut self) -> Option<AccelSample>;
}

/// Synthesized waveform, sample `n` taken at `n / sample_rate`.
#[derive(Debug, Clone)]
pub struct WaveformSource {
    cfg: WaveformConfig,
    next: u64,
    limit: Option<u64>,
}

impl WaveformSource {
    pub fn new(cfg: WaveformConfig) -> Result<Self, EmulatorError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            next: 0,
            limit: None,
        })
    }

    /// Stops after `n` samples.
    pub fn with_limit(mut self, n: u64) -> Self {
        self.limit = Some(n);
        self
    }
}

impl SampleSource for WaveformSource {
    fn rate(&self) -> f64 {
        self.cfg.sample_rate
    }

    fn next_sample(&mut self) -> Option<AccelSample> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return None;
        }
        let t = self.next as f64 / self.cfg.sample_rate;
        self.next += 1;
        synth_sample(&self.cfg, t).ok()
    }
}

/// Plays back a fixed sequence at `rate`.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    samples: Vec<AccelSample>,
    rate: f64,
    next: usize,
}

impl ReplaySource {
    pub fn new(samples: Vec<AccelSample>, rate: f64) -> Self {
        Self {
            samples,
            rate,
            next: 0,
        }
    }
}

impl SampleSource for ReplaySource {
    fn rate(&self) -> f64 {
        self.rate
    }

    fn next_sample(&mut self) -> Option<AccelSample> {
        let s = self.samples.get(self.next).copied();
        self.next += 1;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub bind: String,
    /// Exit after the first client session ends.
    pub single_session: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: format!("0.0.0.0:{DEFAULT_PORT}"),
            single_session: false,
        }
    }
}

impl ServerConfig {
    pub fn on(bind: impl Into<String>) -> Self {
        Self {
            bind: bind.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub sessions: AtomicU64,
    pub refused: AtomicU64,
    /// DATA lines written in the current (or last) session.
    pub lines_sent: AtomicU64,
    pub pongs_sent: AtomicU64,
}

pub struct EmulatorServer {
    listener: TcpListener,
    single_session: bool,
}

type SourceFactory = Box<dyn Fn() -> Box<dyn SampleSource> + Send + Sync>;

impl EmulatorServer {
    pub fn bind(cfg: &ServerConfig) -> Result<Self, EmulatorError> {
        let listener = TcpListener::bind(&cfg.bind).map_err(|source| EmulatorError::Bind {
            addr: cfg.bind.clone(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            single_session: cfg.single_session,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Starts accepting on a background thread.
    pub fn spawn<F, S>(self, factory: F) -> ServerHandle
    where
        F: Fn() -> S + Send + Sync + 'static,
        S: SampleSource + 'static,
    {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(ServerStats::default());
        let factory: SourceFactory = Box::new(move || Box::new(factory()));
        let thread = {
            let stop = stop.clone();
            let stats = stats.clone();
            thread::spawn(move || self.accept_loop(factory, stop, stats))
        };
        ServerHandle {
            addr,
            stop,
            stats,
            thread: Some(thread),
        }
    }

    /// Serves until `stop` is set (or after one session in single-session mode).
    pub fn run<F, S>(self, factory: F, stop: Arc<AtomicBool>) -> ServerStats
    where
        F: Fn() -> S + Send + Sync + 'static,
        S: SampleSource + 'static,
    {
        let stats = Arc::new(ServerStats::default());
        self.accept_loop(Box::new(move || Box::new(factory())), stop, stats.clone());
        Arc::try_unwrap(stats).unwrap_or_default()
    }

    fn accept_loop(self, factory: SourceFactory, stop: Arc<AtomicBool>, stats: Arc<ServerStats>) {
        let busy = Arc::new(AtomicBool::new(false));
        let mut active: Option<JoinHandle<()>> = None;
        while !stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    if !wait_idle(&busy, REFUSE_GRACE) {
                        tracing::info!(%peer, "refusing second client");
                        stats.refused.fetch_add(1, Ordering::Relaxed);
                        let _ = stream.shutdown(Shutdown::Both);
                        continue;
                    }
                    if let Some(h) = active.take() {
                        let _ = h.join();
                    }
                    tracing::info!(%peer, "client connected");
                    busy.store(true, Ordering::SeqCst);
                    stats.sessions.fetch_add(1, Ordering::Relaxed);
                    stats.lines_sent.store(0, Ordering::Relaxed);
                    let source = factory();
                    let (stop, stats, busy) = (stop.clone(), stats.clone(), busy.clone());
                    active = Some(thread::spawn(move || {
                        if let Err(e) = serve_client(stream, source, &stop, &stats) {
                            tracing::info!(%peer, error = %e, "client dropped");
                        }
                        busy.store(false, Ordering::SeqCst);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if self.single_session
                        && stats.sessions.load(Ordering::Relaxed) > 0
                        && !busy.load(Ordering::SeqCst)
                    {
                        break;
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
        if let Some(h) = active {
            let _ = h.join();
        }
    }
}

/// Lets a session whose client just left finish before a new client is judged
/// simultaneous with it.
const REFUSE_GRACE: Duration = Duration::from_millis(100);

fn wait_idle(busy: &AtomicBool, grace: Duration) -> bool {
    let deadline = Instant::now() + grace;
    while busy.load(Ordering::SeqCst) {
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(2));
    }
    true
}

fn write_line(writer: &Mutex<TcpStream>, line: &str) -> std::io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
    w.write_all(line.as_bytes())
}

fn serve_client(
    stream: TcpStream,
    mut source: Box<dyn SampleSource>,
    stop: &AtomicBool,
    stats: &ServerStats,
) -> Result<(), EmulatorError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let closed = Arc::new(AtomicBool::new(false));
    let (hangup_tx, hangup) = std::sync::mpsc::channel::<()>();

    let reader = {
        let writer = writer.clone();
        let closed = closed.clone();
        let read_half = stream.try_clone()?;
        let pongs = Arc::new(AtomicU64::new(0));
        let pongs_out = pongs.clone();
        let handle = thread::spawn(move || {
            let mut lines = BufReader::new(read_half);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                match lines.read_until(b'\n', &mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {}
                }
                match wire::parse_bytes(&buf) {
                    Ok(Message::Ping(nonce)) => {
                        let pong = wire::encode_pong(&nonce).expect("nonce validated on parse");
                        if write_line(&writer, &pong).is_err() {
                            break;
                        }
                        pongs.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(other) => tracing::debug!(?other, "ignoring client line"),
                    Err(e) => tracing::debug!(error = %e, "bad client line"),
                }
            }
            closed.store(true, Ordering::SeqCst);
            drop(hangup_tx);
        });
        (handle, pongs_out)
    };

    let interval = 1.0 / source.rate();
    let start = Instant::now();
    let mut n: u64 = 0;
    let result = loop {
        if stop.load(Ordering::SeqCst) || closed.load(Ordering::SeqCst) {
            break Ok(());
        }
        let Some(sample) = source.next_sample() else {
            break Ok(());
        };
        let due = start + Duration::from_secs_f64(n as f64 * interval);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            // wakes early when the reader drops its sender on hangup
            let _ = hangup.recv_timeout(wait);
            if closed.load(Ordering::SeqCst) {
                break Ok(());
            }
        }
        let line = match wire::encode_sample(sample.ax, sample.ay, sample.az) {
            Ok(l) => l,
            Err(e) => {
                tracing::warn!(error = %e, "skipping unencodable sample");
                n += 1;
                continue;
            }
        };
        if let Err(e) = write_line(&writer, &line) {
            break Err(e.into());
        }
        stats.lines_sent.fetch_add(1, Ordering::Relaxed);
        n += 1;
    };

    let _ = stream.shutdown(Shutdown::Both);
    let (handle, pongs) = reader;
    let _ = handle.join();
    stats
        .pongs_sent
        .fetch_add(pongs.load(Ordering::Relaxed), Ordering::Relaxed);
    result
}

/// Background server; stopping joins the accept thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Waits for a single-session server to finish on its own.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use std::io::Read;

    fn cfg(f: f64, dwell: f64, noise: f64) -> WaveformConfig {
        WaveformConfig {
            frequency: f,
            amplitude: 1.0,
            dwell_fraction: dwell,
            noise_std: noise,
            axis: Axis::Z,
            seed: 7,
            sample_rate: 20.0,
        }
    }

    #[test]
    fn sine_peak_and_zero() {
        let c = cfg(1.0, 0.0, 0.0);
        let s = synth_sample(&c, 0.25).unwrap();
        assert!((s.az - 9.80665).abs() < 1e-12);
        assert_eq!((s.ax, s.ay), (0.0, 0.0));
        let s = synth_sample(&c, 0.5).unwrap();
        assert!(s.az.abs() < 1e-9);
        assert!(synth_sample(&c, -0.1).is_err());
    }

    #[test]
    fn validation() {
        assert!(cfg(1.0, 0.0, 0.0).validate().is_ok());
        assert!(cfg(0.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(11.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(1.0, 0.25, 0.0).validate().is_err());
        assert!(cfg(1.0, 0.0, -1.0).validate().is_err());
        let mut c = cfg(3.0, 0.0, 0.0);
        c.sample_rate = 5.0;
        assert!(c.validate().is_err());
        assert_eq!("Y".parse::<Axis>().unwrap(), Axis::Y);
        assert!("w".parse::<Axis>().is_err());
    }

    #[test]
    fn noiseless_matches_pure_sine() {
        let c = cfg(2.5, 0.0, 0.0);
        for n in 0..400 {
            let t = n as f64 / 20.0;
            let expected = 9.80665 * (2.0 * PI * 2.5 * t).sin();
            assert!((synth_sample(&c, t).unwrap().az - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn dwell_holds_extremes_and_keeps_period() {
        let d = 0.2;
        // plateau around the quarter-period
        assert_eq!(dwell_sine(0.25, d), 1.0);
        assert_eq!(dwell_sine(0.23, d), 1.0);
        assert_eq!(dwell_sine(0.75, d), -1.0);
        assert!(dwell_sine(0.0, d).abs() < 1e-12);
        assert!(dwell_sine(0.5, d).abs() < 1e-12);
        for k in 0..100 {
            let u = k as f64 * 0.0137;
            assert!((dwell_sine(u, d) - dwell_sine(u + 1.0, d)).abs() < 1e-9);
            assert!((dwell_sine(u, d) + dwell_sine(u + 0.5, d)).abs() < 1e-9);
        }
    }

    #[test]
    fn dwell_autocorrelation_peaks_at_period() {
        let c = cfg(2.0, 0.15, 0.0);
        let x: Vec<f64> = (0..400)
            .map(|n| synth_sample(&c, n as f64 / 20.0).unwrap().az)
            .collect();
        let acf = |lag: usize| -> f64 {
            x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / (x.len() - lag) as f64
        };
        let best = (5..16).max_by(|&a, &b| acf(a).total_cmp(&acf(b))).unwrap();
        assert_eq!(best, 10);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let c = cfg(1.5, 0.1, 0.05);
        let a: Vec<_> = (0..50)
            .map(|n| synth_sample(&c, n as f64 / 20.0).unwrap())
            .collect();
        let b: Vec<_> = (0..50)
            .map(|n| synth_sample(&c, n as f64 / 20.0).unwrap())
            .collect();
        assert_eq!(a, b);
        let mut other = c.clone();
        other.seed = 8;
        assert_ne!(synth_sample(&other, 0.3).unwrap(), a[6]);
        // noise-only axes have roughly the requested spread
        let xs: Vec<f64> = (0..4000)
            .map(|n| synth_sample(&c, n as f64 / 20.0).unwrap().ax / STANDARD_GRAVITY)
            .collect();
        let var = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.005);
    }

    #[test]
    fn replay_source_runs_out() {
        let mut s = ReplaySource::new(vec![AccelSample::new(0.0, 1.0, 2.0, 3.0)], 20.0);
        assert!(s.next_sample().is_some());
        assert!(s.next_sample().is_none());
        let mut w = WaveformSource::new(cfg(1.0, 0.0, 0.0))
            .unwrap()
            .with_limit(2);
        assert!(w.next_sample().is_some() && w.next_sample().is_some());
        assert!(w.next_sample().is_none());
    }

    #[test]
    fn bind_failure_reports_address() {
        let first = EmulatorServer::bind(&ServerConfig::on("127.0.0.1:0")).unwrap();
        let taken = first.local_addr().to_string();
        match EmulatorServer::bind(&ServerConfig::on(taken.clone())) {
            Err(EmulatorError::Bind { addr, .. }) => assert_eq!(addr, taken),
            other => panic!("expected bind error, got {:?}", other.err()),
        }
    }

    #[test]
    fn single_session_server_exits_after_source_ends() {
        let server = EmulatorServer::bind(&ServerConfig {
            bind: "127.0.0.1:0".into(),
            single_session: true,
        })
        .unwrap();
        let c = cfg(1.0, 0.0, 0.0);
        let handle = server.spawn(move || WaveformSource::new(c.clone()).unwrap().with_limit(5));
        let mut s = TcpStream::connect(handle.local_addr()).unwrap();
        let mut text = String::new();
        s.read_to_string(&mut text).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), "0.0000 0.0000 0.0000");
        handle.join();
    }
}
