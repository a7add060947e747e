//! HTTP/1.1 reverse proxy that routes through the balancelab dispatcher.
//!
//! One request per client connection, relayed to the chosen backend with
//! `Connection: close`. Health checks mark backends up and down in the same
//! pool the dispatcher selects from.

pub mod access_log;
pub mod config;
pub mod health;
pub mod http;
pub mod loopback;
pub mod server;

pub use config::{AccessLogTarget, BackendConfig, HealthConfig, ProxyConfig};
pub use server::{serve, start, ProxyError, ProxyHandle, ProxyStats};
