use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use balancelab_core::config::{parse_balance, ConfigError, Document, Section};
use balancelab_core::{AlgorithmConfig, BackendPool, MaxConn, ServerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub name: String,
    pub address: SocketAddr,
    pub weight: u32,
    pub maxconn: MaxConn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthConfig {
    pub interval: Duration,
    /// Each probe gap is drawn uniformly from `interval * (1 ± pct/100)`.
    pub spread_checks_pct: f64,
    /// Consecutive failures that take a server down.
    pub fall: u32,
    /// Consecutive successes that bring it back.
    pub rise: u32,
    pub timeout: Duration,
    pub seed: u64,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            interval: Duration::from_secs(2),
            spread_checks_pct: 0.0,
            fall: 3,
            rise: 2,
            timeout: Duration::from_secs(1),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AccessLogTarget {
    Off,
    Stdout,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub listen: SocketAddr,
    /// Global cap on connections being proxied at once.
    pub maxconn: u32,
    /// Runtime worker threads.
    pub workers: u32,
    pub balance: AlgorithmConfig,
    pub servers: Vec<BackendConfig>,
    pub health: HealthConfig,
    pub access_log: AccessLogTarget,
    pub connect_timeout: Duration,
    /// Longest wait for in-flight connections on shutdown.
    pub drain_timeout: Duration,
}

pub fn default_workers() -> u32 {
    std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1)
}

impl ProxyConfig {
    pub fn new(listen: SocketAddr, servers: Vec<BackendConfig>) -> Self {
        ProxyConfig {
            listen,
            maxconn: 2000,
            workers: default_workers(),
            balance: AlgorithmConfig::default(),
            servers,
            health: HealthConfig::default(),
            access_log: AccessLogTarget::Off,
            connect_timeout: Duration::from_secs(2),
            drain_timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.servers.is_empty() {
            return bad("the proxy needs at least one server".into());
        }
        if self.maxconn == 0 {
            return bad("maxconn must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=50.0).contains(&self.health.spread_checks_pct) {
            return bad("spread_checks_pct must lie in [0, 50]".into());
        }
        if self.health.interval.is_zero() || self.health.fall == 0 || self.health.rise == 0 {
            return bad("health_interval_s, fall and rise must be positive".into());
        }
        self.balance
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pool().map(|_| ())
    }

    /// Backend ids are 1-based in declaration order.
    pub fn pool(&self) -> Result<BackendPool, ConfigError> {
        let specs = self
            .servers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut spec = ServerSpec::new(i as u32 + 1, s.name.clone()).with_weight(s.weight);
                spec.maxconn = s.maxconn;
                spec
            })
            .collect();
        BackendPool::new(specs).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reads `[proxy]` and `[balance]` from a config document.
    pub fn from_document(doc: &Document) -> Result<Self, ConfigError> {
        let section = doc
            .section("proxy")?
            .ok_or_else(|| ConfigError::Invalid("config has no [proxy] section".into()))?;
        let mut cfg = from_section(section)?;
        if let Some(b) = doc.section("balance")? {
            cfg.balance = parse_balance(b)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax { line, message: message.into() }
}

fn seconds(v: f64, line: usize, key: &str) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(v).map_err(|_| syntax(line, format!("{key} must be a non-negative number of seconds")))
}

fn resolve(addr: &str, line: usize) -> Result<SocketAddr, ConfigError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| syntax(line, format!("cannot resolve address '{addr}'")))
}

/// `server = <name> <host:port> [weight=N] [maxconn=N]`
fn parse_server(value: &str, line: usize) -> Result<BackendConfig, ConfigError> {
    let mut words = value.split_whitespace();
    let (Some(name), Some(addr)) = (words.next(), words.next()) else {
        return Err(syntax(line, "expected 'server = <name> <host:port> [weight=N] [maxconn=N]'"));
    };
    let mut server = BackendConfig {
        name: name.to_string(),
        address: resolve(addr, line)?,
        weight: 1,
        maxconn: MaxConn::Unlimited,
    };
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| syntax(line, format!("expected key=value, got '{w}'")))?;
        let n: u32 = v.parse().map_err(|_| syntax(line, format!("{k} needs an integer, got '{v}'")))?;
        match k {
            "weight" => server.weight = n,
            "maxconn" => server.maxconn = MaxConn::Limit(n),
            other => return Err(syntax(line, format!("unknown server attribute '{other}'"))),
        }
    }
    Ok(server)
}

fn from_section(section: &Section) -> Result<ProxyConfig, ConfigError> {
    section.check_keys(
        &[
            "listen",
            "maxconn",
            "workers",
            "server",
            "health_interval_s",
            "spread_checks_pct",
            "fall",
            "rise",
            "health_timeout_s",
            "health_seed",
            "access_log",
            "connect_timeout_s",
            "drain_timeout_s",
        ],
        &["server"],
    )?;
    let listen = section
        .get("listen")
        .ok_or_else(|| syntax(section.line, "[proxy] needs listen = <host:port>"))?;
    let servers = section
        .all("server")
        .map(|e| parse_server(&e.value, e.line))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = ProxyConfig::new(resolve(&listen.value, listen.line)?, servers);
    for e in &section.entries {
        match e.key.as_str() {
            "listen" | "server" => {}
            "maxconn" => cfg.maxconn = e.parse()?,
            "workers" => cfg.workers = e.parse()?,
            "health_interval_s" => cfg.health.interval = seconds(e.parse()?, e.line, &e.key)?,
            "spread_checks_pct" => cfg.health.spread_checks_pct = e.parse()?,
            "fall" => cfg.health.fall = e.parse()?,
            "rise" => cfg.health.rise = e.parse()?,
            "health_timeout_s" => cfg.health.timeout = seconds(e.parse()?, e.line, &e.key)?,
            "health_seed" => cfg.health.seed = e.parse()?,
            "connect_timeout_s" => cfg.connect_timeout = seconds(e.parse()?, e.line, &e.key)?,
            "drain_timeout_s" => cfg.drain_timeout = seconds(e.parse()?, e.line, &e.key)?,
            "access_log" => {
                cfg.access_log = match e.value.as_str() {
                    "off" | "" => AccessLogTarget::Off,
                    "-" | "stdout" => AccessLogTarget::Stdout,
                    path => AccessLogTarget::File(PathBuf::from(path)),
                }
            }
            _ => unreachable!("checked above"),
        }
    }
    Ok(cfg)
}
