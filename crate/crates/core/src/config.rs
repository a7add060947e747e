//! Flat configuration files: `[section]` or `[section arg]` headers followed
//! by `key = value` lines. `#` and `;` start comments. Some keys (such as
//! `server`) may repeat.
//!
//! ```text
//! [sim]
//! algorithms = roundrobin, leastconn
//! max_total = 40000
//!
//! [environment lab]
//! server = small cores=4 ghz=1.8 ram_gb=16
//! server = big cores=32 ghz=1.8 ram_gb=128 count=2
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::algorithms::{AlgorithmConfig, AlgorithmKind};
use crate::harness::{RunMatrix, DEFAULT_REPETITIONS, DEFAULT_WORKER_COUNTS};
use crate::server::HardwareProfile;
use crate::sim::{EnvironmentProfile, ServiceModel};
use crate::workload::{self, ArrivalProcess, PageCatalog, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn at(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax { line, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse()
            .map_err(|e| at(self.line, format!("{}: {e}", self.key)))
    }

    pub fn parse_bool(&self) -> Result<bool, ConfigError> {
        match self.value.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(at(self.line, format!("{}: expected a boolean, got '{}'", self.key, self.value))),
        }
    }

    /// Comma-separated list, blanks dropped.
    pub fn list(&self) -> Vec<&str> {
        self.value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub arg: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    /// Rejects keys outside `allowed` and repeats of keys not in `repeatable`.
    pub fn check_keys(&self, allowed: &[&str], repeatable: &[&str]) -> Result<(), ConfigError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !allowed.contains(&e.key.as_str()) {
                return Err(at(e.line, format!("unknown key '{}' in [{}]", e.key, self.name)));
            }
            if !repeatable.contains(&e.key.as_str()) && self.entries[..i].iter().any(|p| p.key == e.key) {
                return Err(at(e.line, format!("duplicate key '{}' in [{}]", e.key, self.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = Document::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let inner = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(line, "unterminated section header"))?
                    .trim();
                let mut parts = inner.splitn(2, char::is_whitespace);
                let name = parts.next().unwrap_or("").to_string();
                if name.is_empty() {
                    return Err(at(line, "empty section name"));
                }
                let arg = parts.next().map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
                doc.sections.push(Section { name, arg, line, entries: Vec::new() });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| at(line, format!("expected 'key = value', got '{content}'")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(at(line, "missing key"));
            }
            let section = doc
                .sections
                .last_mut()
                .ok_or_else(|| at(line, "key outside of any [section]"))?;
            section.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// The single section called `name`; a second one is an error.
    pub fn section(&self, name: &str) -> Result<Option<&Section>, ConfigError> {
        let mut found = self.sections.iter().filter(|s| s.name == name);
        let first = found.next();
        if let Some(dup) = found.next() {
            return Err(at(dup.line, format!("section [{name}] appears twice")));
        }
        if let Some(s) = first {
            if let Some(arg) = &s.arg {
                return Err(at(s.line, format!("[{name}] takes no argument, got '{arg}'")));
            }
        }
        Ok(first)
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// Rejects sections outside `known`.
    pub fn check_sections(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            Some(s) => Err(at(s.line, format!("unknown section [{}]", s.name))),
            None => Ok(()),
        }
    }
}

/// Every section understood by the `sim`, `sweep-workers` and `serve` tools.
pub const SECTIONS: [&str; 7] = ["sim", "service", "balance", "workload", "environment", "catalog", "proxy"];

/// `[balance]` onto an algorithm config. Missing keys keep their defaults.
pub fn parse_balance(section: &Section) -> Result<AlgorithmConfig, ConfigError> {
    section.check_keys(
        &[
            "algorithm",
            "power_n",
            "uri_use_path",
            "uri_use_query",
            "uri_depth",
            "header_name",
            "param_name",
            "cpu_threshold",
            "rng_seed",
        ],
        &[],
    )?;
    let mut cfg = AlgorithmConfig::default();
    for e in &section.entries {
        match e.key.as_str() {
            "algorithm" => cfg.kind = e.parse()?,
            "power_n" => cfg.power_n = e.parse()?,
            "uri_use_path" => cfg.uri_use_path = e.parse_bool()?,
            "uri_use_query" => cfg.uri_use_query = e.parse_bool()?,
            "uri_depth" => cfg.uri_depth = e.parse()?,
            "header_name" => cfg.header_name = Some(e.value.clone()),
            "param_name" => cfg.param_name = Some(e.value.clone()),
            "cpu_threshold" => cfg.cpu_threshold = e.parse()?,
            "rng_seed" => cfg.rng_seed = e.parse()?,
            _ => unreachable!("checked above"),
        }
    }
    cfg.validate().map_err(|e| at(section.line, e.to_string()))?;
    Ok(cfg)
}

fn parse_service(section: &Section) -> Result<ServiceModel, ConfigError> {
    section.check_keys(&["base_cost_get", "base_cost_post", "reference_speed_ghz", "network_latency_s"], &[])?;
    let mut m = ServiceModel::default();
    for e in &section.entries {
        let v: f64 = e.parse()?;
        match e.key.as_str() {
            "base_cost_get" => m.base_cost_get = v,
            "base_cost_post" => m.base_cost_post = v,
            "reference_speed_ghz" => m.reference_speed_ghz = v,
            "network_latency_s" => m.network_latency_s = v,
            _ => unreachable!("checked above"),
        }
    }
    m.validate().map_err(|msg| at(section.line, msg))?;
    Ok(m)
}

/// `server = <label> cores=<n> [ghz=<x>] [ram_gb=<y>] [count=<k>]`
fn parse_environment(section: &Section) -> Result<EnvironmentProfile, ConfigError> {
    let name = section
        .arg
        .clone()
        .ok_or_else(|| at(section.line, "[environment] needs a name, e.g. [environment lab]"))?;
    section.check_keys(&["server"], &["server"])?;
    let mut servers = Vec::new();
    for e in section.all("server") {
        let mut words = e.value.split_whitespace();
        let label = words.next().ok_or_else(|| at(e.line, "server needs a label"))?;
        let (mut cores, mut ghz, mut ram, mut count) = (None, 1.80, 32.0, 1u32);
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| at(e.line, format!("expected key=value, got '{w}'")))?;
            let bad = |_| at(e.line, format!("bad value for {k}: '{v}'"));
            match k {
                "cores" => cores = Some(v.parse::<u32>().map_err(|err| bad(err.to_string()))?),
                "ghz" => ghz = v.parse::<f64>().map_err(|err| bad(err.to_string()))?,
                "ram_gb" => ram = v.parse::<f64>().map_err(|err| bad(err.to_string()))?,
                "count" => count = v.parse::<u32>().map_err(|err| bad(err.to_string()))?,
                other => return Err(at(e.line, format!("unknown server attribute '{other}'"))),
            }
        }
        let cores = cores.ok_or_else(|| at(e.line, "server needs cores=<n>"))?;
        let hw = HardwareProfile::new(label, cores, ghz, ram)
            .ok_or_else(|| at(e.line, "cores, ghz and ram_gb must be positive"))?;
        servers.extend(std::iter::repeat_n(hw, count as usize));
    }
    if servers.is_empty() {
        return Err(at(section.line, format!("environment '{name}' has no servers")));
    }
    Ok(EnvironmentProfile { name, servers })
}

/// Settings for the simulator tools.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub algorithms: Vec<AlgorithmKind>,
    /// Template for every algorithm in the matrix; `kind` is replaced.
    pub balance: AlgorithmConfig,
    pub environments: Vec<String>,
    pub custom_environments: Vec<EnvironmentProfile>,
    pub max_total: u64,
    pub step: u64,
    pub repetitions: u32,
    pub base_seed: u64,
    pub first_maxconn_per_core: u32,
    pub out_dir: PathBuf,
    pub svg: bool,
    pub worker_counts: Vec<u32>,
    /// Request total used by the worker sweep.
    pub sweep_total: u64,
    pub service: ServiceModel,
    pub period_s: f64,
    pub get_fraction: f64,
    pub arrival: ArrivalProcess,
    pub deadline_s: f64,
    pub catalog_path: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            algorithms: crate::harness::COMPARED_ALGORITHMS.to_vec(),
            balance: AlgorithmConfig::default(),
            environments: vec!["homogeneous".into(), "heterogeneous".into()],
            custom_environments: Vec::new(),
            max_total: workload::EXTENDED_MAX_TOTAL,
            step: workload::DEFAULT_STEP,
            repetitions: DEFAULT_REPETITIONS,
            base_seed: 0,
            first_maxconn_per_core: 4,
            out_dir: PathBuf::from("results"),
            svg: false,
            worker_counts: DEFAULT_WORKER_COUNTS.to_vec(),
            sweep_total: 20_000,
            service: ServiceModel::default(),
            period_s: 60.0,
            get_fraction: 0.5,
            arrival: ArrivalProcess::UniformRate,
            deadline_s: crate::DEFAULT_DEADLINE_S,
            catalog_path: None,
        }
    }
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = e.list().into_iter().map(str::parse).collect();
    let items = items.map_err(|err| at(e.line, format!("{}: {err}", e.key)))?;
    if items.is_empty() {
        return Err(at(e.line, format!("{} is empty", e.key)));
    }
    Ok(items)
}

impl HarnessConfig {
    /// Reads the simulator sections of `doc`. `[proxy]` is accepted and left
    /// to the proxy.
    pub fn from_document(doc: &Document) -> Result<Self, ConfigError> {
        doc.check_sections(&SECTIONS)?;
        let mut cfg = HarnessConfig::default();
        if let Some(s) = doc.section("sim")? {
            s.check_keys(
                &[
                    "algorithms",
                    "environments",
                    "max_total",
                    "step",
                    "repetitions",
                    "base_seed",
                    "first_maxconn_per_core",
                    "out",
                    "svg",
                    "worker_counts",
                    "sweep_total",
                ],
                &[],
            )?;
            for e in &s.entries {
                match e.key.as_str() {
                    "algorithms" => cfg.algorithms = parse_list(e)?,
                    "environments" => cfg.environments = parse_list(e)?,
                    "max_total" => cfg.max_total = e.parse()?,
                    "step" => cfg.step = e.parse()?,
                    "repetitions" => cfg.repetitions = e.parse()?,
                    "base_seed" => cfg.base_seed = e.parse()?,
                    "first_maxconn_per_core" => cfg.first_maxconn_per_core = e.parse()?,
                    "out" => cfg.out_dir = PathBuf::from(&e.value),
                    "svg" => cfg.svg = e.parse_bool()?,
                    "worker_counts" => cfg.worker_counts = parse_list(e)?,
                    "sweep_total" => cfg.sweep_total = e.parse()?,
                    _ => unreachable!("checked above"),
                }
            }
        }
        if let Some(s) = doc.section("service")? {
            cfg.service = parse_service(s)?;
        }
        if let Some(s) = doc.section("balance")? {
            cfg.balance = parse_balance(s)?;
        }
        if let Some(s) = doc.section("workload")? {
            s.check_keys(&["period_s", "get_fraction", "arrival", "deadline_s"], &[])?;
            for e in &s.entries {
                match e.key.as_str() {
                    "period_s" => cfg.period_s = e.parse()?,
                    "get_fraction" => cfg.get_fraction = e.parse()?,
                    "arrival" => cfg.arrival = e.parse()?,
                    "deadline_s" => cfg.deadline_s = e.parse()?,
                    _ => unreachable!("checked above"),
                }
            }
        }
        if let Some(s) = doc.section("catalog")? {
            s.check_keys(&["file"], &[])?;
            cfg.catalog_path = s.get("file").map(|e| PathBuf::from(&e.value));
        }
        for s in doc.sections_named("environment") {
            let env = parse_environment(s)?;
            if cfg.custom_environments.iter().any(|e| e.name == env.name) {
                return Err(at(s.line, format!("environment '{}' defined twice", env.name)));
            }
            cfg.custom_environments.push(env);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_document(&Document::load(path)?)
    }

    pub fn environment(&self, name: &str) -> Result<EnvironmentProfile, ConfigError> {
        self.custom_environments
            .iter()
            .find(|e| e.name == name)
            .cloned()
            .or_else(|| EnvironmentProfile::by_name(name))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown environment '{name}'")))
    }

    fn catalog(&self) -> Result<Arc<PageCatalog>, ConfigError> {
        match &self.catalog_path {
            None => Ok(Arc::new(PageCatalog::default())),
            Some(p) => PageCatalog::load(p)
                .map(Arc::new)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display()))),
        }
    }

    /// A scenario with this config's workload settings.
    pub fn scenario(&self, total: u64) -> Result<Scenario, ConfigError> {
        let s = Scenario {
            period_s: self.period_s,
            get_fraction: self.get_fraction,
            arrival: self.arrival,
            deadline_s: self.deadline_s,
            catalog: self.catalog()?,
            ..Scenario::new(total)
        };
        s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }

    pub fn algorithm_configs(&self) -> Vec<AlgorithmConfig> {
        self.algorithms
            .iter()
            .map(|&kind| AlgorithmConfig { kind, ..self.balance.clone() })
            .collect()
    }

    pub fn to_matrix(&self) -> Result<RunMatrix, ConfigError> {
        let catalog = self.catalog()?;
        let scenarios = workload::scenario_suite(self.max_total, self.step)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?
            .into_iter()
            .map(|s| Scenario {
                period_s: self.period_s,
                get_fraction: self.get_fraction,
                arrival: self.arrival,
                deadline_s: self.deadline_s,
                catalog: catalog.clone(),
                ..s
            })
            .collect::<Vec<_>>();
        for s in &scenarios {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let environments = self
            .environments
            .iter()
            .map(|n| self.environment(n))
            .collect::<Result<Vec<_>, _>>()?;
        let matrix = RunMatrix {
            algorithms: self.algorithm_configs(),
            scenarios,
            environments,
            repetitions: self.repetitions,
            base_seed: self.base_seed,
            service: self.service.clone(),
            first_maxconn_per_core: self.first_maxconn_per_core,
        };
        matrix.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(matrix)
    }
}
