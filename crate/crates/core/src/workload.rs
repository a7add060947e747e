//! Seeded request streams over a small blog/shop page catalog.

use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::request::{Method, Request, RequestError};
use crate::DEFAULT_DEADLINE_S;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("catalog has no {0} entries")]
    EmptyCatalog(Method),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario step must be positive")]
    InvalidStep,
    #[error("catalog line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArrivalProcess {
    /// Evenly spaced: request `i` arrives at `i * period / total`.
    #[default]
    UniformRate,
    /// Exponential gaps, rescaled so all arrivals land inside the period.
    Poisson,
}

impl ArrivalProcess {
    pub fn as_str(self) -> &'static str {
        match self {
            ArrivalProcess::UniformRate => "uniform_rate",
            ArrivalProcess::Poisson => "poisson",
        }
    }
}

impl fmt::Display for ArrivalProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArrivalProcess {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_rate" | "uniform" => Ok(ArrivalProcess::UniformRate),
            "poisson" => Ok(ArrivalProcess::Poisson),
            other => Err(format!("unknown arrival process '{other}'")),
        }
    }
}

/// Pages and client attributes that requests are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PageCatalog {
    /// Request targets, `path[?query]`.
    pub get_paths: Vec<String>,
    pub post_paths: Vec<String>,
    pub client_ips: Vec<Ipv4Addr>,
    pub hosts: Vec<String>,
    pub user_agents: Vec<String>,
}

const DEFAULT_GET: &[&str] = &[
    "/",
    "/about/",
    "/contact/",
    "/blog/hello-world/",
    "/blog/page/2/",
    "/blog/category/news/",
    "/blog/2021/03/hello-world/",
    "/shop/",
    "/shop/cart/",
    "/checkout/",
    "/shop/product/t-shirt/",
    "/shop/product/polo/?attribute_color=blue",
];

const DEFAULT_POST: &[&str] = &["/wp-comments-post.php", "/xmlrpc.php"];

const DEFAULT_AGENTS: &[&str] = &[
    "Mozilla/5.0 (X11; Linux x86_64; rv:109.0) Gecko/20100101 Firefox/115.0",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Safari/537.36",
    "curl/8.4.0",
];

impl Default for PageCatalog {
    /// A blog and shop. Under `uri` hashing on five equal servers the POST
    /// endpoints share one server and the GET pages cover the other four.
    fn default() -> Self {
        PageCatalog {
            get_paths: DEFAULT_GET.iter().map(|s| s.to_string()).collect(),
            post_paths: DEFAULT_POST.iter().map(|s| s.to_string()).collect(),
            client_ips: (0..256u32).map(|i| Ipv4Addr::new(10, 20, (i / 250) as u8, (i % 250 + 1) as u8)).collect(),
            hosts: vec!["shop.example.com".into(), "blog.example.com".into()],
            user_agents: DEFAULT_AGENTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PageCatalog {
    /// Parses `GET <target>` / `POST <target>` lines. Blank lines and `#`
    /// comments are skipped. Client attributes come from the default catalog.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut catalog = PageCatalog {
            get_paths: Vec::new(),
            post_paths: Vec::new(),
            ..PageCatalog::default()
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| WorkloadError::Parse { line: n + 1, message };
            let (verb, target) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| err(format!("expected '<METHOD> <target>', got '{line}'")))?;
            let target = target.trim();
            let method: Method = verb.parse().map_err(|e: RequestError| err(e.to_string()))?;
            Request::from_target(0, method, target).map_err(|e| err(e.to_string()))?;
            match method {
                Method::Get => catalog.get_paths.push(target.to_string()),
                Method::Post => {
                    if target.contains('?') {
                        return Err(err("POST entries take a bare path".into()));
                    }
                    catalog.post_paths.push(target.to_string())
                }
            }
        }
        if catalog.get_paths.is_empty() && catalog.post_paths.is_empty() {
            return Err(WorkloadError::EmptyCatalog(Method::Get));
        }
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorkloadError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn targets(&self, method: Method) -> &[String] {
        match method {
            Method::Get => &self.get_paths,
            Method::Post => &self.post_paths,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub total_requests: u64,
    pub period_s: f64,
    pub get_fraction: f64,
    pub arrival: ArrivalProcess,
    pub seed: u64,
    pub deadline_s: f64,
    pub catalog: Arc<PageCatalog>,
}

impl Scenario {
    pub fn new(total_requests: u64) -> Self {
        Scenario {
            total_requests,
            period_s: 60.0,
            get_fraction: 0.5,
            arrival: ArrivalProcess::UniformRate,
            seed: 0,
            deadline_s: DEFAULT_DEADLINE_S,
            catalog: Arc::new(PageCatalog::default()),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_arrival(mut self, arrival: ArrivalProcess) -> Self {
        self.arrival = arrival;
        self
    }

    /// Requests per second.
    pub fn rate(&self) -> f64 {
        self.total_requests as f64 / self.period_s
    }

    /// `round(total * get_fraction)`.
    pub fn get_count(&self) -> u64 {
        (self.total_requests as f64 * self.get_fraction).round() as u64
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidScenario(m.into()));
        if self.total_requests == 0 {
            return bad("total_requests must be positive");
        }
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return bad("period_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.get_fraction) {
            return bad("get_fraction must lie in [0, 1]");
        }
        if !(self.deadline_s > 0.0) {
            return bad("deadline must be positive");
        }
        Ok(())
    }
}

/// Whether request `i` of `total` is a GET when `gets` of them must be.
/// Spreads the GETs evenly through the stream.
fn is_get(i: u64, gets: u64, total: u64) -> bool {
    let before = (i as u128 * gets as u128) / total as u128;
    let after = ((i + 1) as u128 * gets as u128) / total as u128;
    after > before
}

fn arrival_times(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = scenario.total_requests as usize;
    let period = scenario.period_s;
    match scenario.arrival {
        ArrivalProcess::UniformRate => (0..n).map(|i| i as f64 * period / n as f64).collect(),
        ArrivalProcess::Poisson => {
            // n + 1 exponential gaps; the partial sums over the full sum are
            // distributed as sorted uniforms, so every time falls in [0, T).
            let gaps: Vec<f64> = (0..=n).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = gaps.iter().sum();
            let mut acc = 0.0;
            gaps[..n]
                .iter()
                .map(|g| {
                    acc += g;
                    (period * acc / total).min(period.next_down())
                })
                .collect()
        }
    }
}

/// Time-ordered requests for `scenario`; ids run from 0.
pub fn generate(scenario: &Scenario) -> Result<Vec<Request>, WorkloadError> {
    scenario.validate()?;
    let total = scenario.total_requests;
    let gets = scenario.get_count();
    let cat = &scenario.catalog;
    if gets > 0 && cat.get_paths.is_empty() {
        return Err(WorkloadError::EmptyCatalog(Method::Get));
    }
    if gets < total && cat.post_paths.is_empty() {
        return Err(WorkloadError::EmptyCatalog(Method::Post));
    }
    if cat.client_ips.is_empty() {
        return Err(WorkloadError::InvalidScenario("catalog has no client addresses".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let times = arrival_times(scenario, &mut rng);
    let mut out = Vec::with_capacity(total as usize);
    for (i, t) in times.into_iter().enumerate() {
        let method = if is_get(i as u64, gets, total) { Method::Get } else { Method::Post };
        let targets = cat.targets(method);
        let target = &targets[rng.random_range(0..targets.len())];
        let client = rng.random_range(0..cat.client_ips.len());
        let mut req = Request::from_target(i as u64, method, target)
            .expect("catalog targets are validated")
            .with_arrival(t)
            .with_client_ip(cat.client_ips[client])
            .with_rdp_cookie(format!("user-{client}"))
            .with_deadline(scenario.deadline_s)
            .expect("deadline validated");
        if !cat.hosts.is_empty() {
            let host = &cat.hosts[rng.random_range(0..cat.hosts.len())];
            req = req.with_header("Host", host);
        }
        if !cat.user_agents.is_empty() {
            let ua = &cat.user_agents[rng.random_range(0..cat.user_agents.len())];
            req = req.with_header("User-Agent", ua);
        }
        out.push(req);
    }
    Ok(out)
}

pub const DEFAULT_STEP: u64 = 5000;
pub const DEFAULT_MAX_TOTAL: u64 = 40_000;
pub const EXTENDED_MAX_TOTAL: u64 = 80_000;

/// 1000 requests, then every multiple of `step` up to `max_total`.
pub fn scenario_suite(max_total: u64, step: u64) -> Result<Vec<Scenario>, WorkloadError> {
    if step == 0 {
        return Err(WorkloadError::InvalidStep);
    }
    let mut out = vec![Scenario::new(1000)];
    out.extend((1..=max_total / step).map(|k| Scenario::new(k * step)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{select, AlgorithmConfig, AlgorithmKind};
    use crate::pool::BackendPool;

    #[test]
    fn uniform_spacing() {
        let s = Scenario::new(4);
        let t: Vec<f64> = generate(&s).unwrap().iter().map(|r| r.arrival_time).collect();
        assert_eq!(t, vec![0.0, 15.0, 30.0, 45.0]);
    }

    #[test]
    fn exact_split() {
        let reqs = generate(&Scenario::new(1000)).unwrap();
        let gets = reqs.iter().filter(|r| r.method == Method::Get).count();
        assert_eq!((gets, reqs.len() - gets), (500, 500));

        let mut s = Scenario::new(7);
        s.get_fraction = 0.3;
        let reqs = generate(&s).unwrap();
        assert_eq!(reqs.iter().filter(|r| r.method == Method::Get).count(), 2);
    }

    #[test]
    fn table_rates() {
        let rows = [(1000, 16.67), (5000, 83.33), (10000, 166.67), (20000, 333.33), (40000, 666.67)];
        for (total, rate) in rows {
            let s = Scenario::new(total);
            assert!((s.rate() - rate).abs() < 0.01, "{total}");
            let reqs = generate(&s).unwrap();
            assert!((reqs.len() as f64 / s.period_s - rate).abs() < 0.01);
        }
    }

    #[test]
    fn suites() {
        let base = scenario_suite(DEFAULT_MAX_TOTAL, DEFAULT_STEP).unwrap();
        let totals: Vec<u64> = base.iter().map(|s| s.total_requests).collect();
        assert_eq!(totals, vec![1000, 5000, 10000, 15000, 20000, 25000, 30000, 35000, 40000]);
        assert_eq!(scenario_suite(EXTENDED_MAX_TOTAL, DEFAULT_STEP).unwrap().len(), 17);
        let lone = scenario_suite(4000, 5000).unwrap();
        assert_eq!(lone.len(), 1);
        assert_eq!(lone[0].total_requests, 1000);
        assert!(matches!(scenario_suite(10, 0), Err(WorkloadError::InvalidStep)));
        assert!(base.iter().all(|s| s.period_s == 60.0));
    }

    #[test]
    fn poisson_stays_in_period() {
        let s = Scenario::new(5000).with_arrival(ArrivalProcess::Poisson).with_seed(9);
        let reqs = generate(&s).unwrap();
        assert!(reqs.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        assert!(reqs.iter().all(|r| (0.0..60.0).contains(&r.arrival_time)));
        // Mean gap of 12 ms; the largest gap should not exceed ~15 means.
        let max_gap = reqs.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).fold(0.0, f64::max);
        assert!(max_gap < 0.2 && max_gap > 0.012);
    }

    #[test]
    fn seeded_streams() {
        let s = Scenario::new(300).with_arrival(ArrivalProcess::Poisson).with_seed(5);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&s.clone().with_seed(6)).unwrap());
    }

    #[test]
    fn empty_catalog() {
        let mut s = Scenario::new(10);
        s.catalog = Arc::new(PageCatalog { post_paths: vec![], ..PageCatalog::default() });
        assert!(matches!(generate(&s), Err(WorkloadError::EmptyCatalog(Method::Post))));
        s.get_fraction = 1.0;
        assert_eq!(generate(&s).unwrap().len(), 10);
    }

    #[test]
    fn catalog_file_format() {
        let cat = PageCatalog::parse("# pages\nGET /a?x=1\n\nPOST /submit\nGET /b/\n").unwrap();
        assert_eq!(cat.get_paths, vec!["/a?x=1", "/b/"]);
        assert_eq!(cat.post_paths, vec!["/submit"]);
        assert!(matches!(PageCatalog::parse("PUT /x"), Err(WorkloadError::Parse { line: 1, .. })));
        assert!(matches!(PageCatalog::parse("GET nope"), Err(WorkloadError::Parse { .. })));
        assert!(matches!(PageCatalog::parse("# nothing\n"), Err(WorkloadError::EmptyCatalog(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pages.txt");
        std::fs::write(&p, "GET /\nPOST /c\n").unwrap();
        assert_eq!(PageCatalog::load(&p).unwrap().get_paths, vec!["/"]);
    }

    #[test]
    fn default_catalog_partitions_under_uri() {
        let mut pool = BackendPool::uniform(5);
        let cfg = AlgorithmConfig::new(AlgorithmKind::Uri);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cat = PageCatalog::default();
        let mut owner = |target: &str, m: Method| {
            let req = Request::from_target(0, m, target).unwrap();
            select(&mut pool, &req, &cfg, &mut rng).unwrap().server.0
        };
        let post: Vec<u32> = cat.post_paths.iter().map(|p| owner(p, Method::Post)).collect();
        let get: Vec<u32> = cat.get_paths.iter().map(|p| owner(p, Method::Get)).collect();
        assert!(post.iter().all(|&s| s == post[0]));
        assert!(!get.contains(&post[0]));
        let mut covered = get.clone();
        covered.sort();
        covered.dedup();
        assert_eq!(covered.len(), 4);
    }

    #[test]
    fn requests_carry_client_attributes() {
        let reqs = generate(&Scenario::new(50)).unwrap();
        for r in &reqs {
            assert!(r.headers.get("host").is_some());
            assert!(r.rdp_cookie.as_deref().unwrap().starts_with("user-"));
            assert_eq!(r.deadline(), DEFAULT_DEADLINE_S);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_exact(total in 1u64..3000, frac in 0.0f64..=1.0, seed in any::<u64>(), poisson in any::<bool>()) {
                let mut s = Scenario::new(total).with_seed(seed);
                s.get_fraction = frac;
                if poisson {
                    s.arrival = ArrivalProcess::Poisson;
                }
                let reqs = generate(&s).unwrap();
                prop_assert_eq!(reqs.len() as u64, total);
                let gets = reqs.iter().filter(|r| r.method == Method::Get).count() as u64;
                prop_assert_eq!(gets, s.get_count());
                prop_assert!(reqs.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
                prop_assert!(reqs.iter().all(|r| r.arrival_time >= 0.0 && r.arrival_time < s.period_s));
            }
        }
    }
}
