mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::{line_reader, read_line, spawn_emulator, spawn_emulator_limited, waveform};
use vibewatch::monitor::{
    load_session, measure_latency, ConnectionState, Monitor, MonitorError, ProbeOptions,
};
use vibewatch::wire::{parse_line, Message};

#[test]
fn emulator_paces_twenty_lines_per_second() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let (_s, mut r) = line_reader(&emu.local_addr().to_string());
    let start = Instant::now();
    let mut n = 0;
    while start.elapsed() < Duration::from_secs(5) {
        let line = read_line(&mut r).expect("stream open");
        assert!(
            matches!(parse_line(&line), Ok(Message::Data { .. })),
            "{line:?}"
        );
        n += 1;
    }
    assert!((98..=102).contains(&n), "{n} lines in 5 s");
}

#[test]
fn ping_is_answered_with_pong() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let (mut s, mut r) = line_reader(&emu.local_addr().to_string());
    s.write_all(b"PING q-17\n").unwrap();
    loop {
        let line = read_line(&mut r).expect("stream open");
        match parse_line(&line).unwrap() {
            Message::Data { .. } => continue,
            Message::Pong(n) => {
                assert_eq!(n, "q-17");
                break;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn second_connection_is_closed() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let addr = emu.local_addr().to_string();
    let (_s, mut first) = line_reader(&addr);
    assert!(read_line(&mut first).is_some());
    let (_s2, mut second) = line_reader(&addr);
    assert_eq!(read_line(&mut second), None);
    assert!(read_line(&mut first).is_some());
}

#[test]
fn monitor_lifecycle_and_view_gating() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let addr = emu.local_addr().to_string();
    let m = Monitor::default();

    assert_eq!(m.client_start(&addr).unwrap(), ConnectionState::Connected);
    std::thread::sleep(Duration::from_millis(500));
    let snap = m.snapshot();
    assert!(snap.received > 0);
    assert!(
        snap.samples.is_empty(),
        "not viewing, window must stay empty"
    );

    assert_eq!(m.view_start().unwrap(), ConnectionState::Viewing);
    std::thread::sleep(Duration::from_millis(5300));
    let snap = m.snapshot();
    assert_eq!(snap.samples.len(), 100);
    assert!(snap.samples.iter().any(|s| s.gz.abs() > 0.5));

    assert_eq!(m.view_stop().unwrap(), ConnectionState::Connected);
    let snap = m.snapshot();
    assert_eq!(snap.samples.len(), 100);
    assert!(snap
        .samples
        .iter()
        .all(|s| s.gx == 0.0 && s.gy == 0.0 && s.gz == 0.0));

    m.view_start().unwrap();
    std::thread::sleep(Duration::from_millis(400));
    assert!(
        !m.snapshot().samples.is_empty(),
        "data resumes after view restart"
    );

    assert_eq!(m.client_stop().unwrap(), ConnectionState::Disconnected);
    assert!(m.snapshot().samples.iter().all(|s| s.gz == 0.0));
    assert!(matches!(m.client_stop(), Err(MonitorError::State { .. })));

    assert_eq!(m.client_start(&addr).unwrap(), ConnectionState::Connected);
    assert!(matches!(
        m.client_start(&addr),
        Err(MonitorError::State { .. })
    ));
    m.client_stop().unwrap();
}

#[test]
fn closed_port_is_a_connect_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let m = Monitor::default();
    let err = m.client_start(&format!("127.0.0.1:{port}")).unwrap_err();
    assert!(matches!(err, MonitorError::Connect { .. }), "{err}");
    assert_eq!(m.state(), ConnectionState::Disconnected);
}

#[test]
fn socket_loss_returns_to_disconnected() {
    let emu = spawn_emulator_limited(waveform(1.5, 1.0, 0.0), Some(5));
    let m = Monitor::default();
    m.client_start_viewing(&emu.local_addr().to_string())
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while m.state() != ConnectionState::Disconnected {
        assert!(Instant::now() < deadline, "loss never observed");
        std::thread::sleep(Duration::from_millis(50));
    }
    assert_eq!(m.snapshot().received, 5);
    assert!(matches!(m.view_start(), Err(MonitorError::State { .. })));
}

#[test]
fn latency_probe_against_loopback() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let r = measure_latency(&emu.local_addr().to_string(), &ProbeOptions::default()).unwrap();
    assert_eq!(r.trials.len(), 12);
    assert_eq!(r.failed, 0);
    assert!(r.min <= r.mean && r.mean <= r.max);
    assert!(r.mean < 0.05, "mean {}", r.mean);
    assert!((r.one_way_estimate - r.mean / 2.0).abs() < 1e-15);
}

#[test]
fn latency_probe_over_live_connection() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let m = Monitor::default();
    assert!(matches!(
        m.probe_latency(&ProbeOptions::default()),
        Err(MonitorError::State { .. })
    ));
    m.client_start_viewing(&emu.local_addr().to_string())
        .unwrap();
    let opts = ProbeOptions {
        trials: 4,
        ..ProbeOptions::default()
    };
    let r = m.probe_latency(&opts).unwrap();
    assert_eq!(r.trials.len(), 4);
    assert_eq!(m.status().latency.unwrap().trials.len(), 4);
    std::thread::sleep(Duration::from_millis(200));
    assert!(
        !m.snapshot().samples.is_empty(),
        "data keeps flowing during the probe"
    );
}

#[test]
fn recorded_session_loads_back() {
    let emu = spawn_emulator(waveform(2.0, 1.0, 0.05));
    let m = Monitor::default();
    m.client_start_viewing(&emu.local_addr().to_string())
        .unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    m.start_recording(Box::new(file.reopen().unwrap())).unwrap();
    std::thread::sleep(Duration::from_millis(1500));
    let written = m.stop_recording().unwrap();
    m.client_stop().unwrap();

    let session = load_session(std::io::BufReader::new(file.reopen().unwrap())).unwrap();
    assert_eq!(session.samples.len() as u64, written);
    assert!(written >= 25, "{written}");
    assert_eq!(session.meta.rate_hz, 20.0);
    assert!(session.samples.windows(2).all(|w| w[0].t <= w[1].t));
}

#[test]
fn recording_requires_viewing() {
    let m = Monitor::default();
    let err = m.start_recording(Box::new(Vec::new())).unwrap_err();
    assert!(matches!(err, MonitorError::State { .. }));
}

#[test]
fn rapid_reconnect_is_not_refused() {
    let emu = spawn_emulator(waveform(1.5, 1.0, 0.0));
    let addr = emu.local_addr().to_string();
    let m = Monitor::default();
    for _ in 0..10 {
        m.client_start(&addr).unwrap();
        let before = m.snapshot().received;
        std::thread::sleep(Duration::from_millis(150));
        assert_eq!(
            m.state(),
            ConnectionState::Connected,
            "connection was refused"
        );
        assert!(m.snapshot().received > before);
        m.client_stop().unwrap();
    }
}

#[test]
fn recording_from_connect_captures_every_sample() {
    for _ in 0..3 {
        let emu = spawn_emulator_limited(waveform(1.5, 1.0, 0.0), Some(40));
        let m = Monitor::default();
        let file = tempfile::NamedTempFile::new().unwrap();
        m.client_start_recording(
            &emu.local_addr().to_string(),
            Box::new(file.reopen().unwrap()),
        )
        .unwrap();
        assert_eq!(m.state(), ConnectionState::Viewing);
        let deadline = Instant::now() + Duration::from_secs(10);
        while m.state() != ConnectionState::Disconnected {
            assert!(Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(20));
        }
        assert_eq!(m.stop_recording().unwrap(), 40);
        let session = load_session(std::io::BufReader::new(file.reopen().unwrap())).unwrap();
        assert_eq!(session.samples.len(), 40);
        assert_eq!(session.meta.sensor, emu.local_addr().to_string());
    }
}
