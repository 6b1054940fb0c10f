#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::time::Duration;

use vibewatch::emulator::{
    Axis, EmulatorServer, ServerConfig, ServerHandle, WaveformConfig, WaveformSource,
};

pub fn waveform(frequency: f64, amplitude: f64, noise_std: f64) -> WaveformConfig {
    WaveformConfig {
        frequency,
        amplitude,
        dwell_fraction: 0.0,
        noise_std,
        axis: Axis::Z,
        seed: 7,
        sample_rate: 20.0,
    }
}

pub fn spawn_emulator(cfg: WaveformConfig) -> ServerHandle {
    spawn_emulator_limited(cfg, None)
}

pub fn spawn_emulator_limited(cfg: WaveformConfig, limit: Option<u64>) -> ServerHandle {
    let server = EmulatorServer::bind(&ServerConfig::on("127.0.0.1:0")).expect("bind emulator");
    server.spawn(move || {
        let src = WaveformSource::new(cfg.clone()).expect("valid waveform");
        match limit {
            Some(n) => src.with_limit(n),
            None => src,
        }
    })
}

pub fn line_reader(addr: &str) -> (TcpStream, BufReader<TcpStream>) {
    let stream = TcpStream::connect(addr).expect("connect");
    stream
        .set_read_timeout(Some(Duration::from_secs(3)))
        .unwrap();
    let reader = BufReader::new(stream.try_clone().unwrap());
    (stream, reader)
}

pub fn read_line(reader: &mut BufReader<TcpStream>) -> Option<String> {
    let mut line = String::new();
    match reader.read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line),
    }
}
