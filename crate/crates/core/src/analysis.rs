//! Batch analysis of recorded vibration traces.
//!
//! Covers the quantities used to compare a subject trace against a reference
//! (shaker) trace: peak times and amplitudes, mean peak-to-peak delay, Welch
//! power spectral density, dominant frequency and synchronization offset.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Welch segments are a multiple of this many seconds of data.
pub const SEGMENT_SECONDS_UNIT: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("sample rate must be positive and finite, got {0}")]
    BadSampleRate(f64),
    #[error("trace contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("trace too short: {len} samples, need at least {required}")]
    TooShort { len: usize, required: usize },
    #[error("segment multiple must be at least 1")]
    BadSegmentMultiple,
    #[error("peak list is empty")]
    NoPeaks,
    #[error("peak times must be strictly increasing and amplitudes finite")]
    BadPeakList,
    #[error("no subject peak lies within {max_gap} s of a reference peak")]
    NoMatchedPairs { max_gap: f64 },
    #[error("pair count must be at least 1")]
    BadPairCount,
    #[error("spectrum has no power outside the 0 Hz bin")]
    NoSpectralPeak,
}

/// Uniformly sampled signal; sample `i` sits at `t0 + i / sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    values: Vec<f64>,
    sample_rate: f64,
    t0: f64,
}

impl SignalTrace {
    pub fn new(values: Vec<f64>, sample_rate: f64) -> Result<Self, AnalysisError> {
        Self::with_start(values, sample_rate, 0.0)
    }

    pub fn with_start(values: Vec<f64>, sample_rate: f64, t0: f64) -> Result<Self, AnalysisError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(AnalysisError::BadSampleRate(sample_rate));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite(i));
        }
        Ok(Self {
            values,
            sample_rate,
            t0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Time of a (possibly fractional) sample index.
    pub fn time_at(&self, index: f64) -> f64 {
        self.t0 + index / self.sample_rate
    }

    pub fn times(&self) -> Vec<f64> {
        build_time_vector(self.len(), self.sample_rate, self.t0).expect("rate validated")
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn build_time_vector(n: usize, fs: f64, t0: f64) -> Result<Vec<f64>, AnalysisError> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(AnalysisError::BadSampleRate(fs));
    }
    Ok((0..n).map(|i| t0 + i as f64 / fs).collect())
}

/// Peak times (strictly increasing) with their amplitudes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    times: Vec<f64>,
    amplitudes: Vec<f64>,
}

impl PeakList {
    pub fn new(times: Vec<f64>, amplitudes: Vec<f64>) -> Result<Self, AnalysisError> {
        if times.len() != amplitudes.len()
            || times
                .windows(2)
                .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
            || times.iter().chain(&amplitudes).any(|v| !v.is_finite())
        {
            return Err(AnalysisError::BadPeakList);
        }
        Ok(Self { times, amplitudes })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            times: self.times.iter().map(|t| t + delta).collect(),
            amplitudes: self.amplitudes.clone(),
        }
    }
}

struct Candidate {
    /// Midpoint index, fractional for even-width plateaus.
    position: f64,
    height: f64,
}

/// Finds local maxima with at least `min_prominence` height over the
/// surrounding bases, keeping only the tallest peak within any
/// `min_separation` seconds. Flat tops are reported at their midpoint.
pub fn detect_peaks(
    trace: &SignalTrace,
    min_separation: f64,
    min_prominence: f64,
) -> Result<PeakList, AnalysisError> {
    let x = trace.values();
    let n = x.len();
    if n < 3 {
        return Err(AnalysisError::TooShort {
            len: n,
            required: 3,
        });
    }

    let mut candidates = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if x[i] > x[i - 1] {
            // walk across a possible plateau
            let mut right = i;
            while right + 1 < n && x[right + 1] == x[i] {
                right += 1;
            }
            if right + 1 < n && x[right + 1] < x[i] {
                let prominence = prominence(x, i, right);
                if prominence >= min_prominence {
                    candidates.push(Candidate {
                        position: (i + right) as f64 / 2.0,
                        height: x[i],
                    });
                }
            }
            i = right + 1;
        } else {
            i += 1;
        }
    }

    // tallest first; ties resolved toward the earlier peak
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .height
            .total_cmp(&candidates[a].height)
            .then(a.cmp(&b))
    });
    let min_gap_samples = min_separation.max(0.0) * trace.sample_rate();
    let mut keep = vec![true; candidates.len()];
    for &idx in &order {
        if !keep[idx] {
            continue;
        }
        let pos = candidates[idx].position;
        for (other, cand) in candidates.iter().enumerate() {
            if other != idx && keep[other] && (cand.position - pos).abs() < min_gap_samples {
                keep[other] = false;
            }
        }
    }

    let (times, amplitudes) = candidates
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(c, _)| (trace.time_at(c.position), c.height))
        .unzip();
    PeakList::new(times, amplitudes)
}

/// Topographic prominence of the peak spanning `left..=right`.
fn prominence(x: &[f64], left: usize, right: usize) -> f64 {
    let peak = x[left];
    let mut left_base = peak;
    for &v in x[..left].iter().rev() {
        if v > peak {
            break;
        }
        left_base = left_base.min(v);
    }
    let mut right_base = peak;
    for &v in &x[right + 1..] {
        if v > peak {
            break;
        }
        right_base = right_base.min(v);
    }
    peak - left_base.max(right_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayConfig {
    /// Number of matched peak pairs averaged.
    pub pairs: usize,
    /// Largest |t_subject - t_ref| accepted as a pair. `None` uses half the
    /// median spacing of the reference peaks.
    pub max_pair_gap: Option<f64>,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            max_pair_gap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Mean of `t_subject - t_ref`; positive when the subject lags.
    pub delay: f64,
    pub pairs_used: usize,
    /// Fewer than the requested number of pairs were available.
    pub short_data: bool,
}

/// Mean peak-to-peak delay of `subject` relative to `reference` over the
/// first `cfg.pairs` matched peak pairs.
pub fn time_delay(
    reference: &PeakList,
    subject: &PeakList,
    cfg: &DelayConfig,
) -> Result<DelayEstimate, AnalysisError> {
    if cfg.pairs == 0 {
        return Err(AnalysisError::BadPairCount);
    }
    if reference.is_empty() || subject.is_empty() {
        return Err(AnalysisError::NoPeaks);
    }
    let max_gap = cfg
        .max_pair_gap
        .unwrap_or_else(|| median_spacing(reference.times()).map_or(f64::INFINITY, |p| p / 2.0));

    let refs = reference.times();
    let mut claimed = vec![false; refs.len()];
    let mut diffs = Vec::with_capacity(cfg.pairs);
    for &ts in subject.times() {
        // nearest reference peak; ties go to the earlier one
        let idx = refs.partition_point(|&r| r < ts);
        let nearest = [idx.checked_sub(1), (idx < refs.len()).then_some(idx)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (refs[a] - ts).abs().total_cmp(&(refs[b] - ts).abs()));
        let Some(j) = nearest else { continue };
        if claimed[j] || (ts - refs[j]).abs() > max_gap {
            continue;
        }
        claimed[j] = true;
        diffs.push(ts - refs[j]);
        if diffs.len() == cfg.pairs {
            break;
        }
    }

    if diffs.is_empty() {
        return Err(AnalysisError::NoMatchedPairs { max_gap });
    }
    Ok(DelayEstimate {
        delay: diffs.iter().sum::<f64>() / diffs.len() as f64,
        pairs_used: diffs.len(),
        short_data: diffs.len() < cfg.pairs,
    })
}

fn median_spacing(times: &[f64]) -> Option<f64> {
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    Some(if gaps.len() % 2 == 1 {
        gaps[mid]
    } else {
        (gaps[mid - 1] + gaps[mid]) / 2.0
    })
}

/// One-sided power spectral density on a uniform grid `0..=fs/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    /// Bin spacing in Hz.
    pub resolution: f64,
    pub segments: usize,
}

impl Spectrum {
    /// Rectangle-rule integral of the density, i.e. total signal power.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq,power\n");
        for (f, p) in self.freqs.iter().zip(&self.power) {
            out.push_str(&format!("{f},{p}\n"));
        }
        out
    }
}

/// Welch segment length in samples for a given rate and multiple.
pub fn segment_length(sample_rate: f64, segment_multiple: usize) -> usize {
    segment_multiple * SEGMENT_SECONDS_UNIT * sample_rate.round() as usize
}

/// Welch estimate: mean removal, Hann-windowed segments of
/// `segment_multiple * 16 * fs` samples with 50% overlap, averaged
/// periodograms scaled to a density.
pub fn welch_psd(trace: &SignalTrace, segment_multiple: usize) -> Result<Spectrum, AnalysisError> {
    if segment_multiple == 0 {
        return Err(AnalysisError::BadSegmentMultiple);
    }
    let fs = trace.sample_rate();
    let seg_len = segment_length(fs, segment_multiple);
    let n = trace.len();
    if seg_len < 2 || n < seg_len {
        return Err(AnalysisError::TooShort {
            len: n,
            required: seg_len.max(2),
        });
    }

    let mean = trace.values().iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = trace.values().iter().map(|v| v - mean).collect();

    let window = hann_periodic(seg_len);
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let step = seg_len / 2;
    let segments = (n - seg_len) / step + 1;

    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg_len);
    let bins = seg_len / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); seg_len];
    for s in 0..segments {
        let chunk = &centered[s * step..s * step + seg_len];
        for ((slot, x), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *slot = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
    }

    let scale = 1.0 / (fs * window_power * segments as f64);
    for (k, p) in power.iter_mut().enumerate() {
        *p *= scale;
        // fold negative frequencies; DC and Nyquist appear once
        let nyquist = seg_len.is_multiple_of(2) && k == bins - 1;
        if k != 0 && !nyquist {
            *p *= 2.0;
        }
    }

    Ok(Spectrum {
        freqs: (0..bins).map(|k| k as f64 * fs / seg_len as f64).collect(),
        power,
        resolution: fs / seg_len as f64,
        segments,
    })
}

fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Frequency of the strongest non-DC bin; ties go to the lower frequency.
pub fn dominant_frequency(spectrum: &Spectrum) -> Result<f64, AnalysisError> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in spectrum.power.iter().enumerate().skip(1) {
        if p > 0.0 && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    best.map(|(k, _)| spectrum.freqs[k])
        .ok_or(AnalysisError::NoSpectralPeak)
}

/// Absolute difference of the dominant frequencies of two traces.
pub fn sync_offset(
    reference: &SignalTrace,
    subject: &SignalTrace,
    segment_multiple: usize,
) -> Result<f64, AnalysisError> {
    let f_ref = dominant_frequency(&welch_psd(reference, segment_multiple)?)?;
    let f_sub = dominant_frequency(&welch_psd(subject, segment_multiple)?)?;
    Ok((f_sub - f_ref).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeStats {
    /// Population standard deviation.
    pub std: f64,
    pub mean: f64,
    pub count: usize,
    pub short_data: bool,
}

/// Spread of the first `n` peak amplitudes.
pub fn amplitude_std(peaks: &PeakList, n: usize) -> Result<AmplitudeStats, AnalysisError> {
    if peaks.is_empty() || n == 0 {
        return Err(AnalysisError::NoPeaks);
    }
    let amps = &peaks.amplitudes()[..n.min(peaks.len())];
    let count = amps.len();
    let mean = amps.iter().sum::<f64>() / count as f64;
    let var = amps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count as f64;
    Ok(AmplitudeStats {
        std: var.sqrt(),
        mean,
        count,
        short_data: count < n,
    })
}
