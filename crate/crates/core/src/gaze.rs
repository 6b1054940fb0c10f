//! Gaze-trace ingestion and dispersion metrics.
//!
//! Traces are 2D positions on a working plane one meter in front of the
//! viewer. Depth is kept on ingest but ignored by every metric.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Above this many points `gaze_metrics` switches from the exact pairwise
/// scan to the convex-hull diameter.
pub const BRUTE_FORCE_EXTENT_LIMIT: usize = 20_000;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("malformed gaze JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("gaze point {index}: {reason}")]
    BadPoint { index: usize, reason: String },
    #[error("insufficient points: {have}, need at least {need}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("trace lasts {duration} s, shorter than trim window {window} s")]
    TooShortToTrim { duration: f64, window: f64 },
    #[error("trace has zero duration")]
    ZeroDuration,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    /// Milliseconds since trace start.
    pub t_ms: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazePoint {
    pub fn new(t_ms: f64, x: f64, y: f64) -> Self {
        Self { t_ms, x, y, z: 1.0 }
    }

    fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeTrace {
    pub points: Vec<GazePoint>,
    pub source: Option<String>,
}

impl GazeTrace {
    pub fn new(points: Vec<GazePoint>) -> Self {
        Self {
            points,
            source: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Seconds between first and last point.
    pub fn duration(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => (b.t_ms - a.t_ms) / 1000.0,
            _ => 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.t_ms, p.x, p.y));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub trace: GazeTrace,
    /// Points discarded because their timestamp went backwards.
    pub dropped_out_of_order: usize,
}

/// Reads a JSON array of `{"t_ms", "x", "y", "z"}` objects.
pub fn load_gaze_trace(mut source: impl Read) -> Result<LoadedTrace, GazeError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text)?;

    let mut points: Vec<GazePoint> = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for (index, value) in raw.into_iter().enumerate() {
        let p: GazePoint = serde_json::from_value(value).map_err(|e| GazeError::BadPoint {
            index,
            reason: e.to_string(),
        })?;
        if ![p.t_ms, p.x, p.y, p.z].iter().all(|v| v.is_finite()) {
            return Err(GazeError::BadPoint {
                index,
                reason: "non-finite value".into(),
            });
        }
        if points.last().is_some_and(|last| p.t_ms < last.t_ms) {
            dropped += 1;
            continue;
        }
        points.push(p);
    }
    if dropped > 0 {
        tracing::warn!(dropped, "dropped out-of-order gaze points");
    }
    if points.len() < 2 {
        return Err(GazeError::InsufficientPoints {
            have: points.len(),
            need: 2,
        });
    }
    Ok(LoadedTrace {
        trace: GazeTrace::new(points),
        dropped_out_of_order: dropped,
    })
}

/// Removes the first `lead` and last `tail` seconds and rebases time so the
/// first kept point is at 0. Points exactly `lead` seconds in are kept.
pub fn trim_endpoints(trace: &GazeTrace, lead: f64, tail: f64) -> Result<GazeTrace, GazeError> {
    let duration = trace.duration();
    if duration.is_nan() || duration <= lead + tail {
        return Err(GazeError::TooShortToTrim {
            duration,
            window: lead + tail,
        });
    }
    let start = trace.points[0].t_ms;
    let kept: Vec<GazePoint> = trace
        .points
        .iter()
        .filter(|p| {
            let tau = (p.t_ms - start) / 1000.0;
            tau >= lead && tau <= duration - tail
        })
        .copied()
        .collect();
    if kept.len() < 2 {
        return Err(GazeError::InsufficientPoints {
            have: kept.len(),
            need: 2,
        });
    }
    let base = kept[0].t_ms;
    Ok(GazeTrace {
        points: kept
            .into_iter()
            .map(|p| GazePoint {
                t_ms: p.t_ms - base,
                ..p
            })
            .collect(),
        source: trace.source.clone(),
    })
}

pub fn estimate_sampling_rate(trace: &GazeTrace) -> Result<f64, GazeError> {
    if trace.len() < 2 {
        return Err(GazeError::InsufficientPoints {
            have: trace.len(),
            need: 2,
        });
    }
    let duration = trace.duration();
    if duration <= 0.0 {
        return Err(GazeError::ZeroDuration);
    }
    Ok((trace.len() - 1) as f64 / duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeMetrics {
    pub centroid: (f64, f64),
    pub reference: (f64, f64),
    /// Largest distance from the reference point.
    pub dispersion: f64,
    /// Largest distance between any two points.
    pub extent: f64,
    pub path_length: f64,
    /// `None` when all points share one timestamp.
    pub sampling_rate: Option<f64>,
    pub duration: f64,
}

/// Dispersion, extent and path statistics of a trace. `reference` defaults
/// to the centroid.
pub fn gaze_metrics(
    trace: &GazeTrace,
    reference: Option<(f64, f64)>,
) -> Result<GazeMetrics, GazeError> {
    let n = trace.len();
    if n < 2 {
        return Err(GazeError::InsufficientPoints { have: n, need: 2 });
    }
    let pts: Vec<(f64, f64)> = trace.points.iter().map(GazePoint::xy).collect();
    // mean offset from the first point, exact when all points coincide
    let origin = pts[0];
    let centroid = (
        origin.0 + pts.iter().map(|p| p.0 - origin.0).sum::<f64>() / n as f64,
        origin.1 + pts.iter().map(|p| p.1 - origin.1).sum::<f64>() / n as f64,
    );
    let reference = reference.unwrap_or(centroid);
    let dispersion = pts.iter().map(|&p| dist(p, reference)).fold(0.0, f64::max);
    let extent = if n <= BRUTE_FORCE_EXTENT_LIMIT {
        extent_brute_force(&pts)
    } else {
        extent_hull(&pts)
    };
    let path_length = pts.windows(2).map(|w| dist(w[0], w[1])).sum();

    Ok(GazeMetrics {
        centroid,
        reference,
        dispersion,
        extent,
        path_length,
        sampling_rate: estimate_sampling_rate(trace).ok(),
        duration: trace.duration(),
    })
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Exact O(n²) maximum pairwise distance.
pub fn extent_brute_force(points: &[(f64, f64)]) -> f64 {
    let mut best = 0.0f64;
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            best = best.max(dist(a, b));
        }
    }
    best
}

/// Maximum pairwise distance via convex hull and rotating calipers.
pub fn extent_hull(points: &[(f64, f64)]) -> f64 {
    let hull = convex_hull(points);
    let m = hull.len();
    match m {
        0 | 1 => return 0.0,
        2 => return dist(hull[0], hull[1]),
        _ => {}
    }
    let mut best = 0.0f64;
    let mut j = 1;
    for i in 0..m {
        let a = hull[i];
        let b = hull[(i + 1) % m];
        // advance the antipodal vertex while it moves away from edge a-b
        while cross(a, b, hull[(j + 1) % m]).abs() > cross(a, b, hull[j]).abs() {
            j = (j + 1) % m;
        }
        best = best.max(dist(a, hull[j])).max(dist(b, hull[j]));
        // collinear-with-edge neighbour can tie on height
        best = best
            .max(dist(a, hull[(j + 1) % m]))
            .max(dist(b, hull[(j + 1) % m]));
    }
    best
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}
