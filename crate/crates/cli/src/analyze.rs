use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use vibewatch::analysis::{
    amplitude_std, detect_peaks, dominant_frequency, time_delay, welch_psd, DelayConfig,
    SignalTrace, Spectrum,
};
use vibewatch::emulator::Axis;
use vibewatch::monitor::{load_session, Session};

use crate::output::{self, Format};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Reference session (e.g. the shaker).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Subject session compared against the reference.
    #[arg(long)]
    subject: PathBuf,
    #[arg(long, default_value = "z", value_parser = parse_axis)]
    channel: Axis,
    /// Welch segment length in units of 16 x sample rate.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    segment_multiple: u32,
    /// Peak pairs averaged for the delay.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pairs: u32,
    /// Minimum peak spacing in seconds [default: half the reference period].
    #[arg(long)]
    min_separation: Option<f64>,
    /// Minimum peak prominence in G [default: half the estimated amplitude of each trace].
    #[arg(long)]
    min_prominence: Option<f64>,
    /// Write the reference PSD as freq,power CSV.
    #[arg(long)]
    ref_psd: Option<PathBuf>,
    /// Write the subject PSD as freq,power CSV.
    #[arg(long)]
    subject_psd: Option<PathBuf>,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
        .map_err(|_| format!("expected x, y or z, got {s:?}"))
}

#[derive(Debug, Serialize)]
struct TraceReport {
    file: String,
    samples: usize,
    rate_hz: f64,
    dominant_hz: f64,
    peaks: usize,
    min_prominence_g: f64,
    amplitude_mean_g: f64,
    amplitude_std_g: f64,
    amplitude_short_data: bool,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    channel: Axis,
    segment_multiple: u32,
    resolution_hz: f64,
    min_separation_s: f64,
    reference: TraceReport,
    subject: TraceReport,
    delay_s: f64,
    pairs_used: usize,
    delay_short_data: bool,
    sync_offset_hz: f64,
}

fn load(path: &Path) -> anyhow::Result<Session> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_session(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// sqrt(2) * std: the amplitude of a sinusoid with that spread.
fn amplitude_estimate(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (2.0 * var).sqrt()
}

pub fn analyze(args: AnalyzeArgs, fmt: Format) -> CliResult {
    for (flag, v) in [
        ("--min-separation", args.min_separation),
        ("--min-prominence", args.min_prominence),
    ] {
        if let Some(v) = v {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Usage(format!(
                    "{flag} must be non-negative, got {v}"
                )));
            }
        }
    }
    let mult = args.segment_multiple as usize;
    let ref_session = load(&args.reference)?;
    let sub_session = load(&args.subject)?;
    let trace = |s: &Session, p: &Path| {
        SignalTrace::new(s.channel(args.channel), s.meta.rate_hz)
            .with_context(|| format!("{} has no usable samples", p.display()))
    };
    let ref_trace = trace(&ref_session, &args.reference)?;
    let sub_trace = trace(&sub_session, &args.subject)?;

    let spectrum = |t: &SignalTrace, p: &Path| -> anyhow::Result<(Spectrum, f64)> {
        let s = welch_psd(t, mult).with_context(|| format!("PSD of {}", p.display()))?;
        let f = dominant_frequency(&s).with_context(|| format!("PSD of {}", p.display()))?;
        Ok((s, f))
    };
    let (ref_psd, f_ref) = spectrum(&ref_trace, &args.reference)?;
    let (sub_psd, f_sub) = spectrum(&sub_trace, &args.subject)?;
    let min_sep = args.min_separation.unwrap_or(0.5 / f_ref);

    let peaks = |t: &SignalTrace, p: &Path| -> anyhow::Result<_> {
        let prom = args
            .min_prominence
            .unwrap_or_else(|| 0.5 * amplitude_estimate(t.values()));
        let peaks =
            detect_peaks(t, min_sep, prom).with_context(|| format!("peaks of {}", p.display()))?;
        let amp = amplitude_std(&peaks, args.pairs as usize)
            .with_context(|| format!("no peaks found in {}", p.display()))?;
        Ok((peaks, prom, amp))
    };
    let (ref_peaks, ref_prom, ref_amp) = peaks(&ref_trace, &args.reference)?;
    let (sub_peaks, sub_prom, sub_amp) = peaks(&sub_trace, &args.subject)?;
    let delay = time_delay(
        &ref_peaks,
        &sub_peaks,
        &DelayConfig {
            pairs: args.pairs as usize,
            ..DelayConfig::default()
        },
    )
    .context("pairing peaks")?;

    for (path, psd) in [(&args.ref_psd, &ref_psd), (&args.subject_psd, &sub_psd)] {
        if let Some(path) = path {
            std::fs::write(path, psd.to_csv())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }

    let report = AnalyzeReport {
        channel: args.channel,
        segment_multiple: args.segment_multiple,
        resolution_hz: ref_psd.resolution,
        min_separation_s: min_sep,
        reference: TraceReport {
            file: args.reference.display().to_string(),
            samples: ref_trace.len(),
            rate_hz: ref_trace.sample_rate(),
            dominant_hz: f_ref,
            peaks: ref_peaks.len(),
            min_prominence_g: ref_prom,
            amplitude_mean_g: ref_amp.mean,
            amplitude_std_g: ref_amp.std,
            amplitude_short_data: ref_amp.short_data,
        },
        subject: TraceReport {
            file: args.subject.display().to_string(),
            samples: sub_trace.len(),
            rate_hz: sub_trace.sample_rate(),
            dominant_hz: f_sub,
            peaks: sub_peaks.len(),
            min_prominence_g: sub_prom,
            amplitude_mean_g: sub_amp.mean,
            amplitude_std_g: sub_amp.std,
            amplitude_short_data: sub_amp.short_data,
        },
        delay_s: delay.delay,
        pairs_used: delay.pairs_used,
        delay_short_data: delay.short_data,
        sync_offset_hz: (f_sub - f_ref).abs(),
    };
    output::emit(fmt, &report, report_text);
    Ok(())
}

fn report_text(r: &AnalyzeReport) -> String {
    let line = |name: &str, t: &TraceReport| {
        format!(
            "{name:<9} {} samples @ {} Hz, dominant {:.4} Hz, {} peaks, amplitude {:.4} +/- {:.4} G{}",
            t.samples,
            t.rate_hz,
            t.dominant_hz,
            t.peaks,
            t.amplitude_mean_g,
            t.amplitude_std_g,
            if t.amplitude_short_data { " (short data)" } else { "" }
        )
    };
    format!(
        "{}\n{}\ndelay       {:+.4} s over {} pair(s){}\nsync offset {:.4} Hz (resolution {:.4} Hz)",
        line("reference", &r.reference),
        line("subject", &r.subject),
        r.delay_s,
        r.pairs_used,
        if r.delay_short_data { " (short data)" } else { "" },
        r.sync_offset_hz,
        r.resolution_hz
    )
}
