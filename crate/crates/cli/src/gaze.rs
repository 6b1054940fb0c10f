use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use vibewatch::gaze::{gaze_metrics, load_gaze_trace, trim_endpoints, GazeMetrics};

use crate::output::{self, Format};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct GazeArgs {
    /// Gaze trace: JSON array of {t_ms, x, y, z} in meters.
    #[arg(long)]
    input: PathBuf,
    /// Fixation target "x,y" for dispersion [default: centroid].
    #[arg(long, value_parser = parse_point)]
    reference: Option<(f64, f64)>,
    /// Seconds dropped from the start.
    #[arg(long, default_value_t = 0.5)]
    lead: f64,
    /// Seconds dropped from the end.
    #[arg(long, default_value_t = 0.5)]
    tail: f64,
    /// Write the trimmed path as CSV.
    #[arg(long)]
    path_csv: Option<PathBuf>,
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("bad coordinate {v:?}"))
    };
    Ok((parse(x)?, parse(y)?))
}

#[derive(Debug, Serialize)]
struct GazeReport {
    input: String,
    points_loaded: usize,
    dropped_out_of_order: usize,
    points_kept: usize,
    metrics: GazeMetrics,
}

pub fn gaze(args: GazeArgs, fmt: Format) -> CliResult {
    for (flag, v) in [("--lead", args.lead), ("--tail", args.tail)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CliError::Usage(format!(
                "{flag} must be non-negative, got {v}"
            )));
        }
    }
    let file =
        File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let loaded = load_gaze_trace(BufReader::new(file))
        .with_context(|| format!("reading {}", args.input.display()))?;
    let trimmed = trim_endpoints(&loaded.trace, args.lead, args.tail).context("trimming")?;
    let metrics = gaze_metrics(&trimmed, args.reference).context("computing metrics")?;
    if let Some(p) = &args.path_csv {
        std::fs::write(p, trimmed.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let report = GazeReport {
        input: args.input.display().to_string(),
        points_loaded: loaded.trace.len() + loaded.dropped_out_of_order,
        dropped_out_of_order: loaded.dropped_out_of_order,
        points_kept: trimmed.len(),
        metrics,
    };
    output::emit(fmt, &report, |r| {
        let m = &r.metrics;
        format!(
            "{} points kept of {} ({} out of order)\ncentroid    ({:.4}, {:.4}) m\ndispersion  {:.4} m from ({:.4}, {:.4})\nextent      {:.4} m\npath length {:.4} m\nduration    {:.3} s\nrate        {}",
            r.points_kept,
            r.points_loaded,
            r.dropped_out_of_order,
            m.centroid.0,
            m.centroid.1,
            m.dispersion,
            m.reference.0,
            m.reference.1,
            m.extent,
            m.path_length,
            m.duration,
            output::opt(m.sampling_rate, " Hz")
        )
    });
    Ok(())
}
