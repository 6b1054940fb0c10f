//! Line protocol between the sensor emulator and the monitor client.
//!
//! Every message is one UTF-8 line terminated by `\n`:
//!
//! ```text
//! <ax> <ay> <az>     acceleration sample in m/s², 4 fractional digits
//! PING <nonce>       latency probe, sent by the client
//! PONG <nonce>       probe echo, sent by the emulator
//! ```
//!
//! Timestamps are not carried on the wire; the receiver assigns them.

use std::fmt;

use thiserror::Error;

/// Longest nonce accepted in a PING/PONG line.
pub const MAX_NONCE_LEN: usize = 32;

/// One timestamped triaxial reading in m/s².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelSample {
    /// Seconds since stream start.
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl AccelSample {
    pub fn new(t: f64, ax: f64, ay: f64, az: f64) -> Self {
        Self { t, ax, ay, az }
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.ay.is_finite() && self.az.is_finite()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid nonce {0:?}: must be 1-{MAX_NONCE_LEN} non-whitespace characters")]
    BadNonce(String),
    #[error("malformed line {line:?}: {reason}")]
    Parse { line: String, reason: String },
}

impl WireError {
    fn parse(line: &str, reason: impl Into<String>) -> Self {
        WireError::Parse {
            line: line.to_string(),
            reason: reason.into(),
        }
    }
}

/// A decoded protocol line.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Data { ax: f64, ay: f64, az: f64 },
    Ping(String),
    Pong(String),
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Data { ax, ay, az } => write!(f, "{ax:.4} {ay:.4} {az:.4}"),
            Message::Ping(n) => write!(f, "PING {n}"),
            Message::Pong(n) => write!(f, "PONG {n}"),
        }
    }
}

/// Encodes one acceleration triple as a DATA line, including the trailing newline.
pub fn encode_sample(ax: f64, ay: f64, az: f64) -> Result<String, WireError> {
    for v in [ax, ay, az] {
        if !v.is_finite() {
            return Err(WireError::NonFinite(v));
        }
    }
    Ok(format!("{ax:.4} {ay:.4} {az:.4}\n"))
}

pub fn encode_ping(nonce: &str) -> Result<String, WireError> {
    validate_nonce(nonce)?;
    Ok(format!("PING {nonce}\n"))
}

pub fn encode_pong(nonce: &str) -> Result<String, WireError> {
    validate_nonce(nonce)?;
    Ok(format!("PONG {nonce}\n"))
}

pub fn validate_nonce(nonce: &str) -> Result<(), WireError> {
    let ok = !nonce.is_empty()
        && nonce.len() <= MAX_NONCE_LEN
        && !nonce.chars().any(|c| c.is_whitespace() || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(WireError::BadNonce(nonce.to_string()))
    }
}

/// Parses one line. A single trailing `\n` (or `\r\n`) is stripped first.
pub fn parse_line(line: &str) -> Result<Message, WireError> {
    let body = line
        .strip_suffix('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .unwrap_or(line);
    if body.contains('\n') {
        return Err(WireError::parse(line, "embedded newline"));
    }
    let fields: Vec<&str> = body.split_ascii_whitespace().collect();
    match fields.as_slice() {
        ["PING", nonce] => {
            validate_nonce(nonce).map_err(|_| WireError::parse(line, "invalid nonce"))?;
            Ok(Message::Ping(nonce.to_string()))
        }
        ["PONG", nonce] => {
            validate_nonce(nonce).map_err(|_| WireError::parse(line, "invalid nonce"))?;
            Ok(Message::Pong(nonce.to_string()))
        }
        [x, y, z] => {
            let mut vals = [0.0; 3];
            for (slot, field) in vals.iter_mut().zip([x, y, z]) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| WireError::parse(line, format!("non-numeric field {field:?}")))?;
                if !v.is_finite() {
                    return Err(WireError::parse(
                        line,
                        format!("non-finite field {field:?}"),
                    ));
                }
                *slot = v;
            }
            Ok(Message::Data {
                ax: vals[0],
                ay: vals[1],
                az: vals[2],
            })
        }
        _ => Err(WireError::parse(
            line,
            format!(
                "expected 3 numeric fields or PING/PONG, got {} fields",
                fields.len()
            ),
        )),
    }
}

/// Parses raw bytes off the socket; invalid UTF-8 is a parse error.
pub fn parse_bytes(line: &[u8]) -> Result<Message, WireError> {
    match std::str::from_utf8(line) {
        Ok(s) => parse_line(s),
        Err(_) => Err(WireError::parse(
            &String::from_utf8_lossy(line),
            "invalid UTF-8",
        )),
    }
}
