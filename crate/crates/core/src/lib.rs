//! Real-time vibration monitoring with an emulated wireless accelerometer.
//!
//! The crate is split by role:
//!
//! - [`wire`]: the newline-delimited text protocol between sensor and client
//! - [`emulator`]: synthesized shaker signal served over TCP
//! - [`monitor`]: the client with its rolling plot window, alarms and recording
//! - [`analysis`]: peak delay, Welch PSD and amplitude statistics
//! - [`gaze`]: eye-tracking trace metrics
//! - [`service`]: HTTP control endpoints and a WebSocket frame stream

pub mod analysis;
pub mod emulator;
pub mod gaze;
pub mod monitor;
pub mod service;
pub mod wire;

/// Standard gravity, m/s² per G.
pub const STANDARD_GRAVITY: f64 = 9.80665;

pub use analysis::{PeakList, SignalTrace, Spectrum};
pub use gaze::{GazeMetrics, GazePoint, GazeTrace};
pub use monitor::{ConnectionState, GSample, Monitor, MonitorConfig, PlotWindow};
pub use wire::AccelSample;
