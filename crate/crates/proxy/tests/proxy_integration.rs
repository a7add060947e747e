use std::net::{SocketAddr, TcpListener};
use std::time::{Duration, Instant};

use balancelab_core::sim::{run_simulation, ServiceModel};
use balancelab_core::{AlgorithmConfig, AlgorithmKind, BackendPool, Method, Request};
use balancelab_proxy::loopback::{fetch, EchoBackend};
use balancelab_proxy::{start, AccessLogTarget, ProxyConfig, ProxyHandle};

fn backends(n: usize, delay: Duration) -> Vec<EchoBackend> {
    (1..=n).map(|i| EchoBackend::start(&format!("echo{i}"), delay).unwrap()).collect()
}

fn config(bs: &[EchoBackend]) -> ProxyConfig {
    let mut cfg = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), bs.iter().map(EchoBackend::config).collect());
    cfg.workers = 2;
    cfg
}

fn get(p: &ProxyHandle, target: &str) -> balancelab_proxy::loopback::Fetched {
    fetch(p.local_addr(), "GET", target, b"").unwrap()
}

fn dead_addr() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> Option<Duration> {
    let t0 = Instant::now();
    while t0.elapsed() < limit {
        if cond() {
            return Some(t0.elapsed());
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    None
}

#[test]
fn roundrobin_header_cycles() {
    let bs = backends(3, Duration::ZERO);
    let p = start(config(&bs)).unwrap();
    let seen: Vec<String> = (0..6).map(|_| get(&p, "/").server().unwrap().to_string()).collect();
    assert_eq!(seen, ["echo1", "echo2", "echo3", "echo1", "echo2", "echo3"]);
}

#[test]
fn serialized_rr_matches_simulator() {
    let bs = backends(4, Duration::ZERO);
    let p = start(config(&bs)).unwrap();
    let n = 103;
    for _ in 0..n {
        assert_eq!(get(&p, "/").status, 200);
    }
    let live: Vec<u64> = bs.iter().map(EchoBackend::served).collect();
    let reqs: Vec<Request> = (0..n)
        .map(|i| Request::new(i, Method::Get, "/", None).unwrap().with_arrival(i as f64))
        .collect();
    let sim = run_simulation(&reqs, BackendPool::uniform(4), &AlgorithmConfig::default(), &ServiceModel::default()).unwrap();
    assert_eq!(live, sim.per_server_dispatched);
}

#[test]
fn global_maxconn_refuses_overflow() {
    let bs = backends(1, Duration::from_millis(400));
    let mut cfg = config(&bs);
    cfg.maxconn = 1;
    let p = start(cfg).unwrap();
    let addr = p.local_addr();
    let first = std::thread::spawn(move || fetch(addr, "GET", "/", b"").unwrap().status);
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(get(&p, "/").status, 503);
    assert_eq!(first.join().unwrap(), 200);
    assert_eq!(p.stats().refused.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn in_flight_never_exceeds_maxconn() {
    let bs = backends(2, Duration::from_millis(50));
    let mut cfg = config(&bs);
    cfg.maxconn = 4;
    let p = start(cfg).unwrap();
    let addr = p.local_addr();
    let clients: Vec<_> = (0..24)
        .map(|_| std::thread::spawn(move || fetch(addr, "GET", "/", b"").map(|r| r.status).unwrap_or(0)))
        .collect();
    let statuses: Vec<u16> = clients.into_iter().map(|c| c.join().unwrap()).collect();
    assert!(statuses.iter().all(|s| *s == 200 || *s == 503));
    assert!(statuses.contains(&503));
    let peak = p.stats().peak_in_flight.load(std::sync::atomic::Ordering::SeqCst);
    assert!(peak <= 4, "peak {peak}");
}

#[test]
fn dead_backend_gives_502_and_a_failure_mark() {
    let mut cfg = ProxyConfig::new(
        "127.0.0.1:0".parse().unwrap(),
        vec![balancelab_proxy::BackendConfig {
            name: "ghost".into(),
            address: dead_addr(),
            weight: 1,
            maxconn: balancelab_core::MaxConn::Unlimited,
        }],
    );
    cfg.health.interval = Duration::from_secs(60);
    let p = start(cfg).unwrap();
    let r = get(&p, "/");
    assert_eq!(r.status, 502);
    assert_eq!(r.server(), Some("ghost"));
    assert_eq!(p.health()[0].consecutive_failures, 1);
    // Two more failures take it down; then there is nothing to dispatch to.
    get(&p, "/");
    get(&p, "/");
    assert!(!p.health()[0].up);
    assert_eq!(get(&p, "/").status, 503);
}

#[test]
fn kill_and_restart_backend() {
    let mut bs = backends(3, Duration::ZERO);
    let mut cfg = config(&bs);
    let interval = Duration::from_millis(150);
    cfg.health.interval = interval;
    let p = start(cfg).unwrap();

    let victim = bs.remove(1);
    let addr = victim.addr();
    victim.stop();
    let took = wait_until(interval * 6, || !p.health()[1].up).expect("server 2 goes down");
    assert!(took <= interval * 3 + Duration::from_millis(100), "down after {took:?}");
    assert!(!p.dispatcher().with_pool(|pool| pool.server(balancelab_core::ServerId(2)).unwrap().is_up()));
    for _ in 0..20 {
        let r = get(&p, "/");
        assert_eq!(r.status, 200);
        assert_ne!(r.server(), Some("echo2"));
    }

    let back = EchoBackend::start_on("echo2", addr, Duration::ZERO).unwrap();
    let took = wait_until(interval * 6, || p.health()[1].up).expect("server 2 comes back");
    assert!(took <= interval * 2 + Duration::from_millis(100), "up after {took:?}");
    let seen: Vec<String> = (0..6).map(|_| get(&p, "/").server().unwrap().to_string()).collect();
    assert!(seen.iter().any(|s| s == "echo2"));
    drop(back);
}

#[test]
fn post_body_is_forwarded_verbatim() {
    let bs = backends(2, Duration::ZERO);
    let p = start(config(&bs)).unwrap();
    let body: Vec<u8> = (0..70_000u32).map(|i| (i * 7 % 251) as u8).collect();
    let r = fetch(p.local_addr(), "POST", "/wp-comments-post.php", &body).unwrap();
    assert_eq!(r.status, 200);
    assert_eq!(r.body, body);
}

#[test]
fn client_errors() {
    let bs = backends(1, Duration::ZERO);
    let p = start(config(&bs)).unwrap();
    assert_eq!(fetch(p.local_addr(), "PUT", "/", b"x").unwrap().status, 501);
    assert_eq!(fetch(p.local_addr(), "GET", "relative", b"").unwrap().status, 400);
    assert_eq!(fetch(p.local_addr(), "GET", "/a//b", b"").unwrap().status, 400);
    assert_eq!(bs[0].served(), 0);
}

#[test]
fn uri_hashing_is_sticky_through_the_proxy() {
    let bs = backends(5, Duration::ZERO);
    let mut cfg = config(&bs);
    cfg.balance = AlgorithmConfig::new(AlgorithmKind::Uri);
    let p = start(cfg).unwrap();
    let first = get(&p, "/blog/hello-world/").server().unwrap().to_string();
    for _ in 0..5 {
        assert_eq!(get(&p, "/blog/hello-world/").server().unwrap(), first);
    }
}

#[test]
fn cpu_random_avoids_hot_backend() {
    let bs = backends(3, Duration::ZERO);
    bs[0].set_utilization(Some(0.99));
    bs[1].set_utilization(Some(0.1));
    let mut cfg = config(&bs);
    cfg.balance = AlgorithmConfig::new(AlgorithmKind::CpuRandom).with_threshold(0.5);
    cfg.health.interval = Duration::from_millis(50);
    let p = start(cfg).unwrap();
    wait_until(Duration::from_secs(2), || {
        p.dispatcher().with_pool(|pool| pool.servers()[0].state.cpu_utilization) > 0.9
    })
    .expect("utilization probe lands");
    for _ in 0..60 {
        assert_ne!(get(&p, "/").server(), Some("echo1"));
    }
}

#[test]
fn shutdown_drains_in_flight() {
    let bs = backends(1, Duration::from_millis(300));
    let p = start(config(&bs)).unwrap();
    let addr = p.local_addr();
    let pending = std::thread::spawn(move || fetch(addr, "GET", "/", b"").unwrap().status);
    std::thread::sleep(Duration::from_millis(100));
    p.shutdown();
    assert_eq!(pending.join().unwrap(), 200);
    assert!(fetch(addr, "GET", "/", b"").is_err());
}

#[test]
fn access_log_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("access.log");
    let bs = backends(1, Duration::ZERO);
    let mut cfg = config(&bs);
    cfg.access_log = AccessLogTarget::File(path.clone());
    let p = start(cfg).unwrap();
    get(&p, "/shop/?x=1");
    fetch(p.local_addr(), "PUT", "/", b"").unwrap();
    p.shutdown();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(lines.len(), 2);
    let ok = lines.iter().find(|l| l[4] == "200").unwrap();
    assert_eq!(ok.len(), 7);
    assert_eq!(&ok[1..6], ["127.0.0.1", "GET", "/shop/", "200", "echo1"]);
    assert!(ok[6].parse::<f64>().unwrap() >= 0.0);
    let bad = lines.iter().find(|l| l[4] == "501").unwrap();
    assert_eq!(bad[5], "-");
}

#[test]
fn bind_error_is_reported() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let bs = backends(1, Duration::ZERO);
    let mut cfg = config(&bs);
    cfg.listen = taken.local_addr().unwrap();
    assert!(matches!(start(cfg), Err(balancelab_proxy::ProxyError::Bind { .. })));
}
