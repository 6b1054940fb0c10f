use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::atomic::Ordering;

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use vibewatch::emulator::{
    Axis, EmulatorServer, ReplaySource, ServerConfig, ServerStats, WaveformConfig, WaveformSource,
    DEFAULT_PORT,
};
use vibewatch::monitor::load_session;
use vibewatch::wire::AccelSample;
use vibewatch::STANDARD_GRAVITY;

use crate::output::{self, Format};
use crate::{shutdown_flag, CliError, CliResult};

#[derive(Debug, Args)]
pub struct EmulateArgs {
    /// Oscillation frequency in Hz.
    #[arg(long, default_value_t = 1.5)]
    freq: f64,
    /// Peak amplitude in G.
    #[arg(long, default_value_t = 1.0)]
    amp: f64,
    /// Fraction of each half-period spent paused at the extreme.
    #[arg(long, default_value_t = 0.0)]
    dwell: f64,
    /// Gaussian noise standard deviation in G, on all three channels.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Driven axis.
    #[arg(long, default_value = "z", value_parser = parse_axis)]
    axis: Axis,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Interface to listen on.
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    /// Samples per second.
    #[arg(long, default_value_t = 20.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// End each client session after this many samples.
    #[arg(long)]
    samples: Option<u64>,
    /// Exit after the first client disconnects.
    #[arg(long)]
    once: bool,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
        .map_err(|_| format!("expected x, y or z, got {s:?}"))
}

#[derive(Debug, Serialize)]
struct ServeReport {
    addr: String,
    sessions: u64,
    refused: u64,
    lines_sent: u64,
    pongs_sent: u64,
}

impl ServeReport {
    fn new(addr: String, stats: &ServerStats) -> Self {
        Self {
            addr,
            sessions: stats.sessions.load(Ordering::Relaxed),
            refused: stats.refused.load(Ordering::Relaxed),
            lines_sent: stats.lines_sent.load(Ordering::Relaxed),
            pongs_sent: stats.pongs_sent.load(Ordering::Relaxed),
        }
    }

    fn text(&self) -> String {
        format!(
            "served {}: {} session(s), {} refused, {} lines in last session, {} pongs",
            self.addr, self.sessions, self.refused, self.lines_sent, self.pongs_sent
        )
    }
}

pub fn emulate(args: EmulateArgs, fmt: Format) -> CliResult {
    let cfg = WaveformConfig {
        frequency: args.freq,
        amplitude: args.amp,
        dwell_fraction: args.dwell,
        noise_std: args.noise,
        axis: args.axis,
        seed: args.seed,
        sample_rate: args.rate,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let server = EmulatorServer::bind(&ServerConfig {
        bind: format!("{}:{}", args.host, args.port),
        single_session: args.once,
    })
    .context("starting emulator")?;
    let addr = server.local_addr().to_string();
    eprintln!("emulator listening on {addr}");
    let limit = args.samples;
    let stats = server.run(
        move || {
            let src = WaveformSource::new(cfg.clone()).expect("validated above");
            match limit {
                Some(n) => src.with_limit(n),
                None => src,
            }
        },
        shutdown_flag(),
    );
    output::emit(fmt, &ServeReport::new(addr, &stats), ServeReport::text);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Session file written by `monitor --record`.
    #[arg(long)]
    session: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    /// Playback speed relative to the recorded rate.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

pub fn replay(args: ReplayArgs, fmt: Format) -> CliResult {
    if !(args.speed.is_finite() && args.speed > 0.0) {
        return Err(CliError::Usage(format!(
            "--speed must be positive, got {}",
            args.speed
        )));
    }
    let file =
        File::open(&args.session).with_context(|| format!("opening {}", args.session.display()))?;
    let session = load_session(BufReader::new(file))
        .with_context(|| format!("reading {}", args.session.display()))?;
    let samples: Vec<AccelSample> = session
        .samples
        .iter()
        .map(|s| {
            AccelSample::new(
                s.t,
                s.gx * STANDARD_GRAVITY,
                s.gy * STANDARD_GRAVITY,
                s.gz * STANDARD_GRAVITY,
            )
        })
        .collect();
    let rate = session.meta.rate_hz * args.speed;
    let server = EmulatorServer::bind(&ServerConfig {
        bind: format!("{}:{}", args.host, args.port),
        single_session: true,
    })
    .context("starting replay server")?;
    let addr = server.local_addr().to_string();
    eprintln!(
        "replaying {} samples at {rate} S/s on {addr}",
        samples.len()
    );
    let stats = server.run(
        move || ReplaySource::new(samples.clone(), rate),
        shutdown_flag(),
    );
    output::emit(fmt, &ServeReport::new(addr, &stats), ServeReport::text);
    Ok(())
}
