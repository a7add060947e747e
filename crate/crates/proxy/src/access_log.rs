use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::IpAddr;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::config::AccessLogTarget;

/// One proxied exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessEntry {
    pub timestamp: SystemTime,
    pub client_ip: IpAddr,
    pub method: String,
    pub path: String,
    pub status: u16,
    pub server: Option<String>,
    pub response_time: Duration,
}

impl AccessEntry {
    /// `timestamp client_ip method path status server response_ms`, with
    /// `-` for absent fields.
    pub fn format(&self) -> String {
        let ts = self.timestamp.duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64();
        let dash = |s: &str| if s.is_empty() { "-".to_string() } else { s.replace(' ', "%20") };
        format!(
            "{ts:.3} {} {} {} {} {} {:.3}",
            self.client_ip,
            dash(&self.method),
            dash(&self.path),
            self.status,
            self.server.as_deref().unwrap_or("-"),
            self.response_time.as_secs_f64() * 1000.0,
        )
    }
}

pub enum AccessLog {
    Off,
    Stdout,
    File(Mutex<File>),
}

impl AccessLog {
    pub fn open(target: &AccessLogTarget) -> io::Result<Self> {
        Ok(match target {
            AccessLogTarget::Off => AccessLog::Off,
            AccessLogTarget::Stdout => AccessLog::Stdout,
            AccessLogTarget::File(p) => AccessLog::File(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        })
    }

    pub fn record(&self, entry: &AccessEntry) {
        let line = match self {
            AccessLog::Off => return,
            _ => entry.format(),
        };
        let result = match self {
            AccessLog::Stdout => writeln!(io::stdout().lock(), "{line}"),
            AccessLog::File(f) => writeln!(f.lock().expect("access log lock"), "{line}"),
            AccessLog::Off => Ok(()),
        };
        if let Err(e) = result {
            log::error!("access log write failed: {e}");
        }
    }
}
