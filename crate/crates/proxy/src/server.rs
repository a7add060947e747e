use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime};

use balancelab_core::config::ConfigError;
use balancelab_core::{Dispatcher, Method, Request, ServerId, SharedDispatcher};
use thiserror::Error;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Semaphore};
use tokio::time::{timeout, Instant};

use crate::access_log::{AccessEntry, AccessLog};
use crate::config::ProxyConfig;
use crate::health::{spawn_health_loop, HealthBoard, HealthStatus};
use crate::http::{self, HttpError};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const CLIENT_READ_TIMEOUT: Duration = Duration::from_secs(10);
const UPSTREAM_RESPONSE_TIMEOUT: Duration = Duration::from_secs(60);

/// Counters for the connections the proxy has handled.
#[derive(Debug, Default)]
pub struct ProxyStats {
    pub in_flight: AtomicU32,
    pub peak_in_flight: AtomicU32,
    pub proxied: AtomicU64,
    /// Connections turned away because global maxconn was reached.
    pub refused: AtomicU64,
}

struct Shared {
    dispatcher: SharedDispatcher,
    backends: Vec<(String, SocketAddr)>,
    health: Arc<HealthBoard>,
    log: AccessLog,
    stats: Arc<ProxyStats>,
    connect_timeout: Duration,
    started: Instant,
    next_id: AtomicU64,
}

/// A running proxy. Dropping the handle shuts it down.
pub struct ProxyHandle {
    local_addr: SocketAddr,
    dispatcher: SharedDispatcher,
    health: Arc<HealthBoard>,
    stats: Arc<ProxyStats>,
    shutdown: watch::Sender<bool>,
    thread: Option<JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn dispatcher(&self) -> &SharedDispatcher {
        &self.dispatcher
    }

    pub fn health(&self) -> Vec<HealthStatus> {
        self.health.snapshot()
    }

    pub fn stats(&self) -> &ProxyStats {
        &self.stats
    }

    /// Stops accepting, waits for in-flight exchanges, then returns.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and starts the proxy on its own runtime with `config.workers`
/// threads.
pub fn start(config: ProxyConfig) -> Result<ProxyHandle, ProxyError> {
    config.validate()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.workers as usize)
        .thread_name("balancelab-worker")
        .enable_all()
        .build()?;
    let listener = runtime
        .block_on(TcpListener::bind(config.listen))
        .map_err(|source| ProxyError::Bind { addr: config.listen, source })?;
    let local_addr = listener.local_addr()?;

    let dispatcher = SharedDispatcher::new(
        Dispatcher::new(config.pool()?, config.balance.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?,
    );
    let ids = dispatcher.with_pool(|p| p.ids());
    let health = Arc::new(HealthBoard::new(dispatcher.clone(), ids, config.health.fall, config.health.rise));
    let stats = Arc::new(ProxyStats::default());
    let shared = Arc::new(Shared {
        dispatcher: dispatcher.clone(),
        backends: config.servers.iter().map(|s| (s.name.clone(), s.address)).collect(),
        health: health.clone(),
        log: AccessLog::open(&config.access_log)?,
        stats: stats.clone(),
        connect_timeout: config.connect_timeout,
        started: Instant::now(),
        next_id: AtomicU64::new(0),
    });
    let (tx, rx) = watch::channel(false);

    let thread = std::thread::Builder::new().name("balancelab-proxy".into()).spawn(move || {
        runtime.block_on(async move {
            let probes = spawn_health_loop(&config.health, &config.servers, shared.health.clone(), shared.dispatcher.clone(), rx.clone());
            accept_loop(listener, shared, config.maxconn, config.drain_timeout, rx).await;
            for p in probes {
                p.abort();
            }
        });
        runtime.shutdown_timeout(Duration::from_secs(1));
    })?;

    log::info!("listening on {local_addr}");
    Ok(ProxyHandle {
        local_addr,
        dispatcher,
        health,
        stats,
        shutdown: tx,
        thread: Some(thread),
    })
}

/// Runs the proxy until SIGINT or SIGTERM, then drains and returns.
pub fn serve(config: ProxyConfig) -> Result<(), ProxyError> {
    let handle = start(config)?;
    let signals = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    signals.block_on(async {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate())?;
            tokio::select! {
                r = tokio::signal::ctrl_c() => r?,
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        tokio::signal::ctrl_c().await?;
        Ok::<_, std::io::Error>(())
    })?;
    log::info!("shutdown requested; draining");
    handle.shutdown();
    Ok(())
}

async fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    maxconn: u32,
    drain: Duration,
    mut shutdown: watch::Receiver<bool>,
) {
    let slots = Arc::new(Semaphore::new(maxconn as usize));
    loop {
        let (stream, peer) = tokio::select! {
            _ = shutdown.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok(a) => a,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            },
        };
        let _ = stream.set_nodelay(true);
        let shared = shared.clone();
        match slots.clone().try_acquire_owned() {
            Ok(permit) => {
                tokio::spawn(async move {
                    let n = shared.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    shared.stats.peak_in_flight.fetch_max(n, Ordering::SeqCst);
                    handle_connection(stream, peer, &shared).await;
                    shared.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
                    shared.stats.proxied.fetch_add(1, Ordering::Relaxed);
                    drop(permit);
                });
            }
            Err(_) => {
                shared.stats.refused.fetch_add(1, Ordering::Relaxed);
                tokio::spawn(async move { refuse(stream, peer, &shared).await });
            }
        }
    }
    drop(listener);
    if timeout(drain, slots.acquire_many(maxconn)).await.is_err() {
        log::warn!("drain timed out with connections still open");
    }
}

fn path_of(target: &str) -> &str {
    target.split('?').next().unwrap_or(target)
}

/// Answers 503 to a connection over the global cap.
async fn refuse(mut stream: TcpStream, peer: SocketAddr, shared: &Shared) {
    let began = Instant::now();
    // Read the request first so closing does not reset the connection
    // before the client sees the answer.
    let req = timeout(Duration::from_secs(1), http::read_request(&mut BufReader::new(&mut stream)))
        .await
        .ok()
        .and_then(Result::ok);
    let _ = stream.write_all(&http::simple_response(503, None)).await;
    let _ = stream.shutdown().await;
    let (method, path) = req
        .map(|r| (r.head.method.clone(), path_of(&r.head.target).to_string()))
        .unwrap_or_default();
    shared.log.record(&AccessEntry {
        timestamp: SystemTime::now(),
        client_ip: peer.ip(),
        method,
        path,
        status: 503,
        server: None,
        response_time: began.elapsed(),
    });
}

fn client_ipv4(ip: IpAddr) -> Ipv4Addr {
    match ip {
        IpAddr::V4(v4) => v4,
        IpAddr::V6(v6) => v6.to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED),
    }
}

/// The `mstshash` value of the Cookie header, if any.
fn rdp_cookie(head: &http::RequestHead) -> Option<String> {
    head.header_str("cookie")?
        .split(';')
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, _)| *k == "mstshash")
        .map(|(_, v)| v.to_string())
}

fn to_core_request(req: &http::Request, id: u64, arrival: f64, peer: SocketAddr) -> Result<Request, u16> {
    let method: Method = req.head.method.parse().map_err(|_| 501u16)?;
    let mut core = Request::from_target(id, method, &req.head.target)
        .map_err(|_| 400u16)?
        .with_arrival(arrival)
        .with_client_ip(client_ipv4(peer.ip()));
    for (name, value) in &req.head.headers {
        core = core.with_header(name, &String::from_utf8_lossy(value));
    }
    if let Some(c) = rdp_cookie(&req.head) {
        core = core.with_rdp_cookie(c);
    }
    Ok(core)
}

enum Upstream {
    /// Nothing reached the client; it still needs an answer.
    Failed(String),
    Relayed(u16),
}

async fn forward(client: &mut TcpStream, req: &http::Request, addr: SocketAddr, name: &str, connect_timeout: Duration) -> Upstream {
    let mut up = match timeout(connect_timeout, TcpStream::connect(addr)).await {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return Upstream::Failed(format!("connect {addr}: {e}")),
        Err(_) => return Upstream::Failed(format!("connect {addr}: timed out")),
    };
    let _ = up.set_nodelay(true);
    if let Err(e) = up.write_all(&http::serialize_request(req)).await {
        return Upstream::Failed(format!("write to {addr}: {e}"));
    }
    let (head, rest) = match timeout(UPSTREAM_RESPONSE_TIMEOUT, http::read_response_head(&mut up)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return Upstream::Failed(format!("response from {addr}: {e}")),
        Err(_) => return Upstream::Failed(format!("response from {addr}: timed out")),
    };
    let mut out = http::relay_response_head(&head, name);
    out.extend_from_slice(&rest);
    if client.write_all(&out).await.is_ok() {
        let _ = tokio::io::copy(&mut up, client).await;
    }
    Upstream::Relayed(head.status)
}

async fn handle_connection(mut stream: TcpStream, peer: SocketAddr, shared: &Shared) {
    let began = Instant::now();
    let mut entry = AccessEntry {
        timestamp: SystemTime::now(),
        client_ip: peer.ip(),
        method: String::new(),
        path: String::new(),
        status: 0,
        server: None,
        response_time: Duration::ZERO,
    };
    let parsed = match timeout(CLIENT_READ_TIMEOUT, http::read_request(&mut stream)).await {
        Ok(r) => r,
        Err(_) => Err(HttpError::Closed),
    };
    let status = match parsed {
        Err(HttpError::Closed) | Err(HttpError::Io(_)) => return,
        Err(e) => {
            log::debug!("bad request from {peer}: {e}");
            let status = e.client_status();
            let _ = stream.write_all(&http::simple_response(status, None)).await;
            status
        }
        Ok(req) => {
            entry.method = req.head.method.clone();
            entry.path = path_of(&req.head.target).to_string();
            let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
            let arrival = began.duration_since(shared.started).as_secs_f64();
            match to_core_request(&req, id, arrival, peer) {
                Err(status) => {
                    let _ = stream.write_all(&http::simple_response(status, None)).await;
                    status
                }
                Ok(core) => proxy_one(&mut stream, &req, &core, shared, &mut entry).await,
            }
        }
    };
    let _ = stream.shutdown().await;
    entry.status = status;
    entry.response_time = began.elapsed();
    shared.log.record(&entry);
}

async fn proxy_one(stream: &mut TcpStream, req: &http::Request, core: &Request, shared: &Shared, entry: &mut AccessEntry) -> u16 {
    let decision = shared.dispatcher.dispatch(core);
    let Some(id) = decision.chosen() else {
        let _ = stream.write_all(&http::simple_response(503, None)).await;
        return 503;
    };
    let idx = (id.0 - 1) as usize;
    let (name, addr) = &shared.backends[idx];
    entry.server = Some(name.clone());
    let result = forward(stream, req, *addr, name, shared.connect_timeout).await;
    release(shared, id);
    match result {
        Upstream::Relayed(status) => status,
        Upstream::Failed(why) => {
            log::warn!("{why}");
            shared.health.record(idx, false);
            let _ = stream.write_all(&http::simple_response(502, Some(name))).await;
            502
        }
    }
}

fn release(shared: &Shared, id: ServerId) {
    if let Err(e) = shared.dispatcher.release(id) {
        log::error!("release of {id} failed: {e}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rdp_cookie_extraction() {
        let head = http::RequestHead {
            method: "GET".into(),
            target: "/".into(),
            headers: vec![("Cookie".into(), b"a=1; mstshash=alice; b=2".to_vec())],
        };
        assert_eq!(rdp_cookie(&head).as_deref(), Some("alice"));
        let none = http::RequestHead { headers: vec![], ..head };
        assert_eq!(rdp_cookie(&none), None);
    }

    #[test]
    fn core_request_mapping() {
        let req = http::Request {
            head: http::RequestHead {
                method: "POST".into(),
                target: "/blog/post?id=7".into(),
                headers: vec![("Host".into(), b"a.example".to_vec())],
            },
            body: b"x".to_vec(),
        };
        let peer: SocketAddr = "10.1.2.3:5000".parse().unwrap();
        let core = to_core_request(&req, 9, 1.5, peer).unwrap();
        assert_eq!(core.method, Method::Post);
        assert_eq!((core.path(), core.query()), ("/blog/post", Some("id=7")));
        assert_eq!(core.client_addr(), Ipv4Addr::new(10, 1, 2, 3));
        assert_eq!(core.headers.get("host"), Some("a.example"));

        let put = http::Request { head: http::RequestHead { method: "PUT".into(), ..req.head.clone() }, body: vec![] };
        assert_eq!(to_core_request(&put, 0, 0.0, peer), Err(501));
        let rel = http::Request { head: http::RequestHead { target: "relative".into(), ..req.head.clone() }, body: vec![] };
        assert_eq!(to_core_request(&rel, 0, 0.0, peer), Err(400));
    }
}
