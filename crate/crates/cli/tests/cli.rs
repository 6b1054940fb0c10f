use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;
use vibewatch::monitor::{load_session, GSample, SessionMeta, SessionRecorder};
use vibewatch::wire::{encode_sample, parse_line, Message};
use vibewatch::STANDARD_GRAVITY;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vibewatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("run vibewatch")
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// A long-running subcommand; the address is scraped from its first stderr line.
struct Daemon {
    child: Child,
    addr: String,
    stderr: Option<JoinHandle<String>>,
}

impl Daemon {
    fn start(args: &[&str]) -> Self {
        let mut child = bin()
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn vibewatch");
        let mut err = BufReader::new(child.stderr.take().unwrap());
        let mut first = String::new();
        err.read_line(&mut first).unwrap();
        let addr = first
            .split_whitespace()
            .find_map(|w| {
                let w = w.trim_start_matches("http://");
                w.parse::<std::net::SocketAddr>().ok()
            })
            .unwrap_or_else(|| panic!("no address in {first:?}"))
            .to_string();
        let stderr = std::thread::spawn(move || {
            let mut rest = String::new();
            let _ = err.read_to_string(&mut rest);
            rest
        });
        Self {
            child,
            addr,
            stderr: Some(stderr),
        }
    }

    fn terminate(mut self) -> (std::process::ExitStatus, String) {
        let status = Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status()
            .unwrap();
        assert!(status.success());
        self.wait()
    }

    fn wait(&mut self) -> (std::process::ExitStatus, String) {
        let status = self.child.wait().unwrap();
        let mut out = String::new();
        self.child
            .stdout
            .take()
            .unwrap()
            .read_to_string(&mut out)
            .unwrap();
        let _ = self.stderr.take().map(|h| h.join());
        (status, out)
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn emulator(extra: &[&str]) -> Daemon {
    let mut args = vec!["emulate", "--host", "127.0.0.1", "--port", "0"];
    args.extend_from_slice(extra);
    Daemon::start(&args)
}

fn write_session(path: &Path, n: usize, freq: f64) -> Vec<GSample> {
    let samples: Vec<GSample> = (0..n)
        .map(|i| {
            let t = i as f64 / 20.0;
            let az = (2.0 * std::f64::consts::PI * freq * t).sin() * STANDARD_GRAVITY;
            // quantized exactly as a live capture would be
            let line = encode_sample(0.0, 0.1, az).unwrap();
            let Message::Data { ax, ay, az } = parse_line(&line).unwrap() else {
                unreachable!()
            };
            GSample::from_accel(t, ax, ay, az).unwrap()
        })
        .collect();
    let meta = SessionMeta::now("test:0", 20.0, None);
    let mut rec = SessionRecorder::new(std::fs::File::create(path).unwrap(), &meta).unwrap();
    for s in &samples {
        rec.append(s).unwrap();
    }
    rec.finish().unwrap();
    samples
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["gaze", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    for sub in [
        "emulate", "monitor", "latency", "analyze", "gaze", "serve", "replay",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn invalid_flag_values_are_usage_errors() {
    assert_eq!(run(&["emulate", "--dwell", "0.9"]).status.code(), Some(2));
    assert_eq!(run(&["emulate", "--rate", "0"]).status.code(), Some(2));
    assert_eq!(run(&["emulate", "--axis", "w"]).status.code(), Some(2));
    assert_eq!(
        run(&["latency", "--sensor", "x:1", "--trials", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["monitor", "--sensor", "x:1", "--threshold", "-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["gaze", "--input", "x", "--reference", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_gaze_file_is_runtime_error() {
    let out = run(&["gaze", "--input", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = run(&["--output", "json", "gaze", "--input", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
}

#[test]
fn gaze_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("trace.json");
    let pts: Vec<Value> = (0..=300)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 100.0;
            serde_json::json!({"t_ms": i * 30, "x": 0.24 * a.cos(), "y": 0.24 * a.sin(), "z": 1.0})
        })
        .collect();
    std::fs::write(&input, serde_json::to_string(&pts).unwrap()).unwrap();
    let csv = dir.path().join("path.csv");
    let out = run(&[
        "--output",
        "json",
        "gaze",
        "--input",
        input.to_str().unwrap(),
        "--reference",
        "0,0",
        "--path-csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json_stdout(&out);
    assert!((r["metrics"]["dispersion"].as_f64().unwrap() - 0.24).abs() < 1e-9);
    assert!((r["metrics"]["sampling_rate"].as_f64().unwrap() - 1000.0 / 30.0).abs() < 1e-6);
    assert!(r["points_kept"].as_u64().unwrap() < 301);
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(
        csv.lines().count(),
        r["points_kept"].as_u64().unwrap() as usize + 1
    );

    let text = run(&["gaze", "--input", input.to_str().unwrap()]);
    assert_eq!(text.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&text.stdout).contains("dispersion"));
}

#[test]
fn analyze_reports_delay_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_session(&a, 600, 1.5);
    write_session(&b, 600, 2.0);
    let psd = dir.path().join("ref.csv");
    let out = run(&[
        "--output",
        "json",
        "analyze",
        "--ref",
        a.to_str().unwrap(),
        "--subject",
        b.to_str().unwrap(),
        "--ref-psd",
        psd.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json_stdout(&out);
    assert_eq!(r["reference"]["dominant_hz"], 1.5);
    assert_eq!(r["subject"]["dominant_hz"], 2.0);
    assert_eq!(r["sync_offset_hz"], 0.5);
    assert_eq!(r["resolution_hz"], 0.0625);
    let csv = std::fs::read_to_string(psd).unwrap();
    assert_eq!(csv.lines().count(), 1 + 161);
    assert!(!dir.path().join("b.csv").exists());

    let same = run(&[
        "analyze",
        "--ref",
        a.to_str().unwrap(),
        "--subject",
        a.to_str().unwrap(),
    ]);
    assert_eq!(same.status.code(), Some(0));
    let text = String::from_utf8_lossy(&same.stdout);
    assert!(
        text.contains("delay       +0.0000 s over 10 pair(s)"),
        "{text}"
    );
    assert!(text.contains("sync offset 0.0000 Hz"), "{text}");
}

#[test]
fn analyze_rejects_short_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    write_session(&a, 100, 1.5);
    let out = run(&[
        "analyze",
        "--ref",
        a.to_str().unwrap(),
        "--subject",
        a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replay_then_capture_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("orig.jsonl");
    let samples = write_session(&original, 400, 1.5);
    let replay = Daemon::start(&[
        "replay",
        "--session",
        original.to_str().unwrap(),
        "--host",
        "127.0.0.1",
        "--port",
        "0",
        "--speed",
        "20",
    ]);
    let captured = dir.path().join("capture.jsonl");
    let out = run(&[
        "--output",
        "json",
        "monitor",
        "--sensor",
        &replay.addr,
        "--record",
        captured.to_str().unwrap(),
        "--duration",
        "30",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json_stdout(&out);
    assert_eq!(summary["ended"], "disconnected");
    assert_eq!(summary["samples_recorded"], 400);

    let mut replay = replay;
    let (status, report) = replay.wait();
    assert!(status.success());
    assert!(report.contains("1 session(s)"), "{report}");

    let got = load_session(BufReader::new(std::fs::File::open(&captured).unwrap())).unwrap();
    assert_eq!(got.samples.len(), 400);
    for (a, b) in samples.iter().zip(&got.samples) {
        assert_eq!((a.gx, a.gy, a.gz), (b.gx, b.gy, b.gz));
    }

    let out = run(&[
        "--output",
        "json",
        "analyze",
        "--ref",
        original.to_str().unwrap(),
        "--subject",
        captured.to_str().unwrap(),
    ]);
    let r = json_stdout(&out);
    assert_eq!(r["delay_s"], 0.0);
    assert_eq!(r["sync_offset_hz"], 0.0);
}

#[test]
fn replay_to_busy_port_fails() {
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("orig.jsonl");
    write_session(&original, 10, 1.5);
    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = run(&[
        "replay",
        "--session",
        original.to_str().unwrap(),
        "--host",
        "127.0.0.1",
        "--port",
        &port,
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_session_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"nope\": 1}\n").unwrap();
    let out = run(&["replay", "--session", bad.to_str().unwrap(), "--port", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn latency_against_emulator() {
    let emu = emulator(&[]);
    let out = run(&[
        "--output", "json", "latency", "--sensor", &emu.addr, "--trials", "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = json_stdout(&out);
    assert_eq!(r["trials"].as_array().unwrap().len(), 3);
    assert_eq!(r["failed"], 0);
}

#[test]
fn monitor_flushes_recording_on_signal() {
    let emu = emulator(&["--amp", "1.5", "--freq", "1"]);
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.jsonl");
    let mon = Daemon::start(&[
        "--output",
        "json",
        "monitor",
        "--sensor",
        &emu.addr,
        "--threshold",
        "1.2",
        "--record",
        rec.to_str().unwrap(),
    ]);
    std::thread::sleep(Duration::from_millis(2000));
    let (status, out) = mon.terminate();
    assert!(status.success(), "{status:?}");

    let lines: Vec<Value> = out
        .lines()
        .filter(|l| l.starts_with("{\"alarm\""))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty(), "1.5 G against 1.2 G must alarm: {out}");
    let summary_start = out.find("{\n").expect("summary document");
    let summary: Value = serde_json::from_str(&out[summary_start..]).unwrap();
    assert_eq!(summary["ended"], "signal");
    let recorded = summary["samples_recorded"].as_u64().unwrap();
    assert!(recorded >= 30, "{recorded}");

    let session = load_session(BufReader::new(std::fs::File::open(&rec).unwrap())).unwrap();
    assert_eq!(session.samples.len() as u64, recorded);
    assert_eq!(session.meta.threshold_g, Some(1.2));
}

#[test]
fn emulator_once_exits_after_client_leaves() {
    let mut emu = emulator(&["--once", "--samples", "10"]);
    let mut s = TcpStream::connect(&emu.addr).unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    assert_eq!(body.lines().count(), 10);
    let (status, report) = emu.wait();
    assert!(status.success());
    assert!(report.contains("1 session(s)"), "{report}");
}

#[test]
fn serve_answers_status_and_stops_on_signal() {
    let svc = Daemon::start(&["--output", "json", "serve", "--bind", "127.0.0.1:0"]);
    let mut s = TcpStream::connect(&svc.addr).unwrap();
    write!(
        s,
        "GET /status HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"state\":\"DISCONNECTED\""), "{resp}");

    let (status, out) = svc.terminate();
    assert!(status.success(), "{status:?}");
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["final_state"], "DISCONNECTED");
}

#[test]
fn serve_with_unreachable_sensor_fails() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let out = run(&[
        "serve",
        "--bind",
        "127.0.0.1:0",
        "--sensor",
        &format!("127.0.0.1:{port}"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
