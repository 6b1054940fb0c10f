use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use tokio::sync::broadcast::error::TryRecvError;

use vibewatch::monitor::{
    measure_latency, AlarmEvent, ConnectionState, LatencyReport, Monitor, MonitorEvent,
    ProbeOptions, ThresholdConfig,
};

use crate::output::{self, Format};
use crate::{shutdown_flag, CliError, CliResult};

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Sensor address, host:port.
    #[arg(long)]
    sensor: String,
    /// Alarm threshold in G.
    #[arg(long)]
    threshold: Option<f64>,
    /// Append viewed samples to this session file (JSON lines).
    #[arg(long)]
    record: Option<PathBuf>,
    /// Stop after this many seconds instead of waiting for a signal.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Debug, Serialize)]
struct MonitorSummary {
    sensor: String,
    ended: &'static str,
    elapsed_s: f64,
    samples_received: u64,
    samples_recorded: Option<u64>,
    alarms: usize,
}

#[derive(Serialize)]
struct AlarmLine<'a> {
    alarm: &'a AlarmEvent,
}

pub fn monitor(args: MonitorArgs, fmt: Format) -> CliResult {
    let threshold = args
        .threshold
        .map(ThresholdConfig::new)
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(d) = args.duration {
        if !(d.is_finite() && d > 0.0) {
            return Err(CliError::Usage(format!(
                "--duration must be positive, got {d}"
            )));
        }
    }
    let sink = match &args.record {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };

    let m = Monitor::default();
    m.set_threshold(threshold);
    let mut events = m.subscribe();
    match sink {
        Some(sink) => m.client_start_recording(&args.sensor, Box::new(sink)),
        None => m.client_start_viewing(&args.sensor),
    }
    .with_context(|| format!("connecting to {}", args.sensor))?;
    eprintln!("monitoring {}", args.sensor);

    let started = Instant::now();
    let stop = shutdown_flag();
    let mut alarms = 0;
    let ended = loop {
        loop {
            match events.try_recv() {
                Ok(MonitorEvent::Alarm(a)) => {
                    alarms += 1;
                    output::event(fmt, &AlarmLine { alarm: &a }, |l| {
                        format!(
                            "alarm t={:.3}s channel={} value={:.4} G",
                            l.alarm.t,
                            format!("{:?}", l.alarm.channel).to_lowercase(),
                            l.alarm.value
                        )
                    });
                }
                Ok(MonitorEvent::State(_)) | Err(TryRecvError::Lagged(_)) => {}
                Err(_) => break,
            }
        }
        if stop.load(Ordering::SeqCst) {
            break "signal";
        }
        if args
            .duration
            .is_some_and(|d| started.elapsed().as_secs_f64() >= d)
        {
            break "duration";
        }
        if m.state() == ConnectionState::Disconnected {
            break "disconnected";
        }
        std::thread::sleep(Duration::from_millis(20));
    };

    let samples_received = m.snapshot().received;
    let recorded = if args.record.is_some() {
        Some(m.stop_recording().context("finishing recording")?)
    } else {
        None
    };
    if m.state() != ConnectionState::Disconnected {
        m.client_stop().context("disconnecting")?;
    }
    let summary = MonitorSummary {
        sensor: args.sensor,
        ended,
        elapsed_s: started.elapsed().as_secs_f64(),
        samples_received,
        samples_recorded: recorded,
        alarms,
    };
    output::emit(fmt, &summary, |s| {
        let mut t = format!(
            "{} samples from {} in {:.1} s ({}), {} alarm(s)",
            s.samples_received, s.sensor, s.elapsed_s, s.ended, s.alarms
        );
        if let Some(n) = s.samples_recorded {
            t.push_str(&format!(", {n} recorded"));
        }
        t
    });
    Ok(())
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Sensor address, host:port.
    #[arg(long)]
    sensor: String,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u32).range(1..))]
    trials: u32,
}

pub fn latency(args: LatencyArgs, fmt: Format) -> CliResult {
    let opts = ProbeOptions {
        trials: args.trials as usize,
        ..ProbeOptions::default()
    };
    let report =
        measure_latency(&args.sensor, &opts).with_context(|| format!("probing {}", args.sensor))?;
    output::emit(fmt, &report, latency_text);
    Ok(())
}

fn latency_text(r: &LatencyReport) -> String {
    let ms = |s: f64| s * 1e3;
    format!(
        "{} trials ({} failed): mean {:.3} ms, min {:.3} ms, max {:.3} ms, std {:.3} ms, one-way ~{:.3} ms",
        r.trials.len(),
        r.failed,
        ms(r.mean),
        ms(r.min),
        ms(r.max),
        ms(r.std),
        ms(r.one_way_estimate)
    )
}
