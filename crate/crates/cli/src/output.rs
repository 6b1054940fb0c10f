use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

/// Writes a report to stdout: `text` verbatim, or the value as one JSON document.
pub fn emit<T: Serialize>(fmt: Format, value: &T, text: impl FnOnce(&T) -> String) {
    match fmt {
        Format::Text => println!("{}", text(value)),
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(value).expect("reports serialize")
        ),
    }
}

/// One line per event, for streaming commands.
pub fn event<T: Serialize>(fmt: Format, value: &T, text: impl FnOnce(&T) -> String) {
    match fmt {
        Format::Text => println!("{}", text(value)),
        Format::Json => println!(
            "{}",
            serde_json::to_string(value).expect("events serialize")
        ),
    }
}

pub fn error(fmt: Format, kind: &str, message: &str) {
    match fmt {
        Format::Text => eprintln!("error: {message}"),
        Format::Json => eprintln!("{}", json!({"error": {"kind": kind, "message": message}})),
    }
}

pub fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}{unit}"))
}
