//! The selection methods: the eleven built-in HAProxy balance algorithms plus
//! the CPU-threshold-filtered random variant.
//!
//! Every selector sees only up servers. Selectors that keep state between
//! calls (round-robin cursors, the `first` cursor, the leastconn tie-break)
//! store it in the [`BackendPool`]; the random family takes the caller's RNG.

mod first;
mod hashed;
mod leastconn;
mod random;
mod roundrobin;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::pool::BackendPool;
use crate::request::Request;
use crate::server::ServerId;

pub use first::select_first;
pub use hashed::{
    query_param, select_header, select_rdp_cookie, select_source, select_uri, select_url_param, uri_key,
};
pub use leastconn::select_leastconn;
pub use random::{select_cpu_random, select_random};
pub use roundrobin::{select_roundrobin, select_static_rr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no up server in pool")]
    EmptyPool,
    #[error("every up server is at maxconn")]
    AllServersFull,
    #[error("invalid algorithm config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlgorithmKind {
    Random,
    First,
    LeastConn,
    Source,
    RoundRobin,
    StaticRr,
    Uri,
    Header,
    RdpCookie,
    UrlParam,
    CpuRandom,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 11] = [
        AlgorithmKind::Random,
        AlgorithmKind::First,
        AlgorithmKind::LeastConn,
        AlgorithmKind::Source,
        AlgorithmKind::RoundRobin,
        AlgorithmKind::StaticRr,
        AlgorithmKind::Uri,
        AlgorithmKind::Header,
        AlgorithmKind::RdpCookie,
        AlgorithmKind::UrlParam,
        AlgorithmKind::CpuRandom,
    ];

    /// Stable identifier used in config files, CLI flags and CSV output.
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Random => "random",
            AlgorithmKind::First => "first",
            AlgorithmKind::LeastConn => "leastconn",
            AlgorithmKind::Source => "source",
            AlgorithmKind::RoundRobin => "roundrobin",
            AlgorithmKind::StaticRr => "static_rr",
            AlgorithmKind::Uri => "uri",
            AlgorithmKind::Header => "header",
            AlgorithmKind::RdpCookie => "rdp_cookie",
            AlgorithmKind::UrlParam => "url_param",
            AlgorithmKind::CpuRandom => "cpu_random",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = SelectError;

    /// Accepts the stable names, plus HAProxy's hyphenated spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| SelectError::InvalidConfig(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    /// Servers drawn per decision by `random` and `cpu_random`.
    pub power_n: u32,
    pub uri_use_path: bool,
    pub uri_use_query: bool,
    /// Directory components of the path kept in the `uri` key; 0 keeps all.
    pub uri_depth: u32,
    pub header_name: Option<String>,
    pub param_name: Option<String>,
    pub cpu_threshold: f64,
    pub rng_seed: u64,
}

impl AlgorithmConfig {
    pub fn new(kind: AlgorithmKind) -> Self {
        AlgorithmConfig {
            kind,
            power_n: 2,
            uri_use_path: true,
            uri_use_query: false,
            uri_depth: 0,
            header_name: None,
            param_name: None,
            cpu_threshold: 0.8,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_power_n(mut self, n: u32) -> Self {
        self.power_n = n;
        self
    }

    pub fn with_header(mut self, name: impl Into<String>) -> Self {
        self.header_name = Some(name.into());
        self
    }

    pub fn with_param(mut self, name: impl Into<String>) -> Self {
        self.param_name = Some(name.into());
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.cpu_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |msg: &str| Err(SelectError::InvalidConfig(msg.to_string()));
        if self.power_n < 1 {
            return bad("power_n must be >= 1");
        }
        match self.kind {
            AlgorithmKind::Uri if !self.uri_use_path && !self.uri_use_query => {
                bad("uri needs uri_use_path or uri_use_query")
            }
            AlgorithmKind::Header if self.header_name.as_deref().is_none_or(str::is_empty) => {
                bad("header needs a non-empty header_name")
            }
            AlgorithmKind::CpuRandom if !(self.cpu_threshold > 0.0 && self.cpu_threshold <= 1.0) => {
                bad("cpu_threshold must lie in (0, 1]")
            }
            _ => Ok(()),
        }
    }
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self::new(AlgorithmKind::RoundRobin)
    }
}

/// A selector's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub server: ServerId,
    /// A hash method found no key and fell back to round-robin, or
    /// `cpu_random` found no server under its threshold.
    pub fallback_used: bool,
}

impl Selection {
    fn direct(server: ServerId) -> Self {
        Selection { server, fallback_used: false }
    }

    fn fallback(server: ServerId) -> Self {
        Selection { server, fallback_used: true }
    }
}

/// Runs the selector named by `config.kind`.
pub fn select<R: Rng + ?Sized>(
    pool: &mut BackendPool,
    request: &Request,
    config: &AlgorithmConfig,
    rng: &mut R,
) -> Result<Selection, SelectError> {
    use AlgorithmKind::*;
    match config.kind {
        Random => select_random(pool, config.power_n, rng).map(Selection::direct),
        First => select_first(pool).map(Selection::direct),
        LeastConn => select_leastconn(pool).map(Selection::direct),
        Source => select_source(pool, request).map(Selection::direct),
        RoundRobin => select_roundrobin(pool).map(Selection::direct),
        StaticRr => select_static_rr(pool).map(Selection::direct),
        Uri => select_uri(pool, request, config).map(Selection::direct),
        Header => {
            let name = config.header_name.as_deref().unwrap_or_default();
            select_header(pool, request, name)
        }
        RdpCookie => select_rdp_cookie(pool, request),
        UrlParam => select_url_param(pool, request, config.param_name.as_deref()),
        CpuRandom => select_cpu_random(pool, config.cpu_threshold, config.power_n, rng),
    }
}
