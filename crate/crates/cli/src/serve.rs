use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use vibewatch::monitor::{ConnectionState, Monitor};
use vibewatch::service::serve_api_until;

use crate::output::{self, Format};
use crate::{shutdown_flag, CliResult};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address for HTTP and the /stream WebSocket.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Connect to this sensor at startup.
    #[arg(long)]
    sensor: Option<String>,
}

#[derive(Debug, Serialize)]
struct ServeSummary {
    addr: String,
    final_state: ConnectionState,
    samples_received: u64,
}

pub fn serve(args: ServeArgs, fmt: Format) -> CliResult {
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    let monitor = Monitor::default();
    if let Some(sensor) = &args.sensor {
        monitor
            .client_start(sensor)
            .with_context(|| format!("connecting to {sensor}"))?;
    }
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(&args.bind))
        .with_context(|| format!("binding {}", args.bind))?;
    let addr = listener
        .local_addr()
        .context("reading bound address")?
        .to_string();
    eprintln!("control service on http://{addr} (stream at ws://{addr}/stream)");

    let stop = shutdown_flag();
    let shutdown = async move {
        while !stop.load(Ordering::SeqCst) {
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    };
    rt.block_on(serve_api_until(listener, monitor.clone(), shutdown))
        .context("serving")?;
    rt.shutdown_timeout(Duration::from_secs(1));

    if monitor.state() != ConnectionState::Disconnected {
        monitor.client_stop().context("disconnecting")?;
    }
    let summary = ServeSummary {
        addr,
        final_state: monitor.state(),
        samples_received: monitor.snapshot().received,
    };
    output::emit(fmt, &summary, |s| {
        format!("served {}, {} samples received", s.addr, s.samples_received)
    });
    Ok(())
}
