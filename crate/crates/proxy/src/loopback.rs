//! Loopback test bed: echo backends, a blocking HTTP client, an open-loop
//! load generator and the proxy side of the worker sweep.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use balancelab_core::harness::{algorithm_label, percentile_nearest_rank, SummaryRow};
use balancelab_core::{AlgorithmConfig, MaxConn, Method, DEFAULT_DEADLINE_S};

use crate::config::{BackendConfig, ProxyConfig};
use crate::http::SERVER_HEADER;
use crate::server::{start, ProxyError};

const IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub status: u16,
    pub headers: Vec<(String, Vec<u8>)>,
    pub body: Vec<u8>,
}

impl Fetched {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .and_then(|(_, v)| std::str::from_utf8(v).ok())
    }

    /// The backend named by the proxy, if any.
    pub fn server(&self) -> Option<&str> {
        self.header(SERVER_HEADER)
    }
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Reads until the end of the head; returns it and any bytes past it.
fn read_head(stream: &mut TcpStream) -> io::Result<(Vec<u8>, usize)> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 4096];
    loop {
        if let Some(end) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            return Ok((buf, end + 4));
        }
        if buf.len() > crate::http::MAX_HEAD {
            return Err(invalid("head too large"));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "closed before head"));
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

/// One request over a fresh connection, reading the response to EOF.
pub fn fetch(addr: SocketAddr, method: &str, target: &str, body: &[u8]) -> io::Result<Fetched> {
    let mut s = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(Some(IO_TIMEOUT))?;
    let mut req = format!("{method} {target} HTTP/1.1\r\nHost: loopback\r\nConnection: close\r\n");
    if !body.is_empty() || method == "POST" {
        req.push_str(&format!("Content-Length: {}\r\n", body.len()));
    }
    req.push_str("\r\n");
    let mut out = req.into_bytes();
    out.extend_from_slice(body);
    s.write_all(&out)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw)?;
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut resp = httparse::Response::new(&mut headers);
    let head_len = match resp.parse(&raw) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Err(invalid("truncated response")),
        Err(e) => return Err(invalid(e.to_string())),
    };
    Ok(Fetched {
        status: resp.code.unwrap_or(0),
        headers: resp.headers.iter().map(|h| (h.name.to_string(), h.value.to_vec())).collect(),
        body: raw[head_len..].to_vec(),
    })
}

struct EchoState {
    name: String,
    delay: Duration,
    served: AtomicU64,
    stop: AtomicBool,
    utilization: Mutex<Option<f64>>,
}

/// A small HTTP server that answers every request with 200 after a fixed
/// service delay. The body echoes the request body, or names the backend
/// and request line when the request has none.
pub struct EchoBackend {
    addr: SocketAddr,
    state: Arc<EchoState>,
    thread: Option<JoinHandle<()>>,
}

impl EchoBackend {
    pub fn start(name: &str, delay: Duration) -> io::Result<Self> {
        Self::start_on(name, "127.0.0.1:0".parse().expect("literal"), delay)
    }

    /// Binds a specific address, e.g. to restart a stopped backend.
    pub fn start_on(name: &str, addr: SocketAddr, delay: Duration) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(EchoState {
            name: name.to_string(),
            delay,
            served: AtomicU64::new(0),
            stop: AtomicBool::new(false),
            utilization: Mutex::new(None),
        });
        let st = state.clone();
        let thread = std::thread::Builder::new()
            .name(format!("echo-{name}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if st.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = conn {
                        let st = st.clone();
                        std::thread::spawn(move || {
                            let _ = echo(stream, &st);
                        });
                    }
                }
            })?;
        Ok(EchoBackend { addr, state, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn name(&self) -> &str {
        &self.state.name
    }

    /// Requests served, health probes excluded.
    pub fn served(&self) -> u64 {
        self.state.served.load(Ordering::SeqCst)
    }

    /// Value reported at `/utilization`; `None` answers 404.
    pub fn set_utilization(&self, u: Option<f64>) {
        *self.state.utilization.lock().expect("echo lock") = u;
    }

    pub fn config(&self) -> BackendConfig {
        BackendConfig {
            name: self.state.name.clone(),
            address: self.addr,
            weight: 1,
            maxconn: MaxConn::Unlimited,
        }
    }

    /// Closes the listening socket; later connections are refused.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(t) = self.thread.take() {
            self.state.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = t.join();
        }
    }
}

impl Drop for EchoBackend {
    fn drop(&mut self) {
        self.halt();
    }
}

fn echo(mut stream: TcpStream, st: &EchoState) -> io::Result<()> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let (buf, head_len) = read_head(&mut stream)?;
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut req = httparse::Request::new(&mut headers);
    req.parse(&buf[..head_len]).map_err(|e| invalid(e.to_string()))?;
    let method = req.method.unwrap_or("").to_string();
    let path = req.path.unwrap_or("").to_string();
    let header = |name: &str| {
        req.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .and_then(|h| std::str::from_utf8(h.value).ok())
    };
    let probe = header("host") == Some("health-check");
    let len: usize = header("content-length").and_then(|v| v.trim().parse().ok()).unwrap_or(0);
    let mut body = buf[head_len..].to_vec();
    if body.len() < len {
        let have = body.len();
        body.resize(len, 0);
        stream.read_exact(&mut body[have..])?;
    }
    body.truncate(len);

    let (status, payload) = if path == "/utilization" {
        match *st.utilization.lock().expect("echo lock") {
            Some(u) => ("200 OK", format!("{u}").into_bytes()),
            None => ("404 Not Found", b"no utilization\n".to_vec()),
        }
    } else {
        if !probe {
            std::thread::sleep(st.delay);
            st.served.fetch_add(1, Ordering::SeqCst);
        }
        let payload = if body.is_empty() { format!("{} {method} {path}\n", st.name).into_bytes() } else { body };
        ("200 OK", payload)
    };
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nX-Echo-Backend: {}\r\nConnection: close\r\n\r\n",
        payload.len(),
        st.name
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(&payload)?;
    stream.flush()?;
    let _ = stream.shutdown(Shutdown::Write);
    Ok(())
}

/// Outcome of an open-loop run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Latency of every request that got a response, in send order.
    pub latencies: Vec<Duration>,
    /// Status per answered request, same order as `latencies`.
    pub statuses: Vec<u16>,
    /// Requests that failed at the transport level.
    pub errors: u64,
    /// Responses per backend, from the proxy's server header.
    pub per_server: BTreeMap<String, u64>,
    pub sent: u64,
}

impl LoadReport {
    pub fn mean(&self) -> Option<Duration> {
        if self.latencies.is_empty() {
            return None;
        }
        Some(self.latencies.iter().sum::<Duration>() / self.latencies.len() as u32)
    }

    pub fn p95(&self) -> Option<Duration> {
        let mut secs: Vec<f64> = self.latencies.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        percentile_nearest_rank(&secs, 95.0).map(Duration::from_secs_f64)
    }

    pub fn non_ok(&self) -> u64 {
        self.statuses.iter().filter(|&&s| s != 200).count() as u64 + self.errors
    }
}

/// Sends GET requests at a fixed rate for `duration`, each on its own
/// connection and thread, without waiting for earlier responses.
pub fn open_loop(addr: SocketAddr, rate_per_s: f64, duration: Duration, target: &str) -> LoadReport {
    let total = (rate_per_s * duration.as_secs_f64()).round() as u64;
    let gap = Duration::from_secs_f64(1.0 / rate_per_s);
    let results: Arc<Mutex<Vec<(u64, io::Result<(Duration, Fetched)>)>>> = Arc::new(Mutex::new(Vec::new()));
    let start = Instant::now();
    let mut workers = Vec::with_capacity(total as usize);
    for i in 0..total {
        let due = start + gap * i as u32;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let results = results.clone();
        let target = target.to_string();
        workers.push(std::thread::spawn(move || {
            let t0 = Instant::now();
            let r = fetch(addr, "GET", &target, b"").map(|f| (t0.elapsed(), f));
            results.lock().expect("results lock").push((i, r));
        }));
    }
    for w in workers {
        let _ = w.join();
    }
    let mut results = Arc::try_unwrap(results).expect("workers joined").into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut report = LoadReport { sent: total, ..LoadReport::default() };
    for (_, r) in results {
        match r {
            Ok((latency, f)) => {
                if let Some(s) = f.server() {
                    *report.per_server.entry(s.to_string()).or_default() += 1;
                }
                report.latencies.push(latency);
                report.statuses.push(f.status);
            }
            Err(_) => report.errors += 1,
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub backends: usize,
    pub service_delay: Duration,
    pub rate_per_s: f64,
    pub duration: Duration,
    pub algorithm: AlgorithmConfig,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            backends: 3,
            service_delay: Duration::from_millis(5),
            rate_per_s: 200.0,
            duration: Duration::from_secs(30),
            algorithm: AlgorithmConfig::default(),
        }
    }
}

/// Runs the same open-loop load through a fresh proxy per worker count,
/// against one shared set of echo backends.
pub fn proxy_worker_sweep(worker_counts: &[u32], settings: &SweepSettings) -> Result<Vec<(u32, LoadReport)>, ProxyError> {
    if worker_counts.is_empty() || worker_counts.contains(&0) {
        return Err(ProxyError::Config(balancelab_core::config::ConfigError::Invalid(
            "worker counts must be at least 1".into(),
        )));
    }
    let backends = (1..=settings.backends)
        .map(|i| EchoBackend::start(&format!("echo{i}"), settings.service_delay))
        .collect::<io::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &w in worker_counts {
        let mut cfg = ProxyConfig::new("127.0.0.1:0".parse().expect("literal"), backends.iter().map(EchoBackend::config).collect());
        cfg.workers = w;
        cfg.balance = settings.algorithm.clone();
        let proxy = start(cfg)?;
        let report = open_loop(proxy.local_addr(), settings.rate_per_s, settings.duration, "/");
        proxy.shutdown();
        out.push((w, report));
    }
    Ok(out)
}

/// Summary rows for a proxy worker sweep, environment `loopback`.
pub fn sweep_rows(points: &[(u32, LoadReport)], settings: &SweepSettings) -> Vec<SummaryRow> {
    let names: Vec<String> = (1..=settings.backends).map(|i| format!("echo{i}")).collect();
    points
        .iter()
        .map(|(w, r)| {
            let late = r.latencies.iter().filter(|l| l.as_secs_f64() > DEFAULT_DEADLINE_S).count() as u64;
            let answered_ok = r.statuses.iter().filter(|&&s| s == 200).count() as u64;
            SummaryRow {
                algorithm: algorithm_label(&settings.algorithm),
                environment: "loopback".into(),
                total_requests: r.sent,
                task_type: Method::Get,
                workers: Some(*w),
                repetitions: 1,
                mean_response_s: r.mean().map(|d| d.as_secs_f64()),
                p95_response_s: r.p95().map(|d| d.as_secs_f64()),
                deadline_miss_fraction: if r.sent == 0 {
                    0.0
                } else {
                    ((r.sent - answered_ok) + late).min(r.sent) as f64 / r.sent as f64
                },
                rejected_count: r.non_ok(),
                per_server_dispatch_counts: names.iter().map(|n| r.per_server.get(n).copied().unwrap_or(0)).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trip() {
        let b = EchoBackend::start("e1", Duration::ZERO).unwrap();
        let r = fetch(b.addr(), "GET", "/x?y=1", b"").unwrap();
        assert_eq!(r.status, 200);
        assert_eq!(r.body, b"e1 GET /x?y=1\n");
        let r = fetch(b.addr(), "POST", "/c", b"payload").unwrap();
        assert_eq!(r.body, b"payload");
        assert_eq!(b.served(), 2);

        assert_eq!(fetch(b.addr(), "GET", "/utilization", b"").unwrap().status, 404);
        b.set_utilization(Some(0.25));
        assert_eq!(fetch(b.addr(), "GET", "/utilization", b"").unwrap().body, b"0.25");

        let addr = b.addr();
        b.stop();
        assert!(fetch(addr, "GET", "/", b"").is_err());
        let again = EchoBackend::start_on("e1", addr, Duration::ZERO).unwrap();
        assert_eq!(fetch(addr, "GET", "/", b"").unwrap().status, 200);
        drop(again);
    }

    #[test]
    fn open_loop_paces_requests() {
        let b = EchoBackend::start("e", Duration::from_millis(2)).unwrap();
        let t0 = Instant::now();
        let r = open_loop(b.addr(), 100.0, Duration::from_millis(500), "/");
        assert!(t0.elapsed() >= Duration::from_millis(480));
        assert_eq!(r.sent, 50);
        assert_eq!(r.non_ok(), 0);
        assert!(r.mean().unwrap() >= Duration::from_millis(2));
    }
}
