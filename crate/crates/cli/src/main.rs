use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use clap::{Parser, Subcommand, ValueEnum};

mod analyze;
mod gaze;
mod monitor;
mod output;
mod serve;
mod stream;

use output::Format;

/// Vibration monitoring with an emulated accelerometer.
#[derive(Debug, Parser)]
#[command(name = "vibewatch", version)]
struct Cli {
    /// Report format on standard output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    output: Format,

    /// Diagnostics verbosity on standard error.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the sensor emulator (TCP line protocol).
    Emulate(stream::EmulateArgs),
    /// Connect to a sensor, watch for threshold breaches, optionally record.
    Monitor(monitor::MonitorArgs),
    /// Round-trip latency probe against a sensor.
    Latency(monitor::LatencyArgs),
    /// Compare a subject session against a reference session.
    Analyze(analyze::AnalyzeArgs),
    /// Dispersion and extent metrics for a gaze trace.
    Gaze(gaze::GazeArgs),
    /// HTTP control service and WebSocket stream.
    Serve(serve::ServeArgs),
    /// Serve a recorded session over the sensor protocol, once.
    Replay(stream::ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for tracing::Level {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Error => Self::ERROR,
            LogLevel::Warn => Self::WARN,
            LogLevel::Info => Self::INFO,
            LogLevel::Debug => Self::DEBUG,
            LogLevel::Trace => Self::TRACE,
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Flag values that parse but are invalid; exit 2.
    Usage(String),
    /// Exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

pub type CliResult = Result<(), CliError>;

/// Set on SIGINT/SIGTERM; long-running commands poll it.
pub fn shutdown_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| Arc::new(AtomicBool::new(false)))
        .clone()
}

fn install_signal_handler() {
    let flag = shutdown_flag();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        tracing::warn!(error = %e, "cannot install signal handler");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::from(cli.log_level))
        .init();
    install_signal_handler();

    let fmt = cli.output;
    let result = match cli.command {
        Command::Emulate(a) => stream::emulate(a, fmt),
        Command::Monitor(a) => monitor::monitor(a, fmt),
        Command::Latency(a) => monitor::latency(a, fmt),
        Command::Analyze(a) => analyze::analyze(a, fmt),
        Command::Gaze(a) => gaze::gaze(a, fmt),
        Command::Serve(a) => serve::serve(a, fmt),
        Command::Replay(a) => stream::replay(a, fmt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            output::error(fmt, "usage", &msg);
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            output::error(fmt, "runtime", &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
