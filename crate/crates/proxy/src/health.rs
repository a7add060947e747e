//! Backend health probes with rise/fall hysteresis.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use balancelab_core::{AlgorithmKind, ServerId, SharedDispatcher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio::time::{timeout, Instant};

use crate::config::{BackendConfig, HealthConfig};
use crate::http::read_response_head;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthStatus {
    pub server_id: ServerId,
    pub up: bool,
    pub consecutive_failures: u32,
    pub consecutive_successes: u32,
    pub last_check: Option<Instant>,
}

impl HealthStatus {
    pub fn new(server_id: ServerId) -> Self {
        HealthStatus {
            server_id,
            up: true,
            consecutive_failures: 0,
            consecutive_successes: 0,
            last_check: None,
        }
    }

    /// Folds in one check result; returns the new state on a transition.
    pub fn record(&mut self, ok: bool, fall: u32, rise: u32, now: Instant) -> Option<bool> {
        self.last_check = Some(now);
        if ok {
            self.consecutive_failures = 0;
            self.consecutive_successes = self.consecutive_successes.saturating_add(1);
            if !self.up && self.consecutive_successes >= rise {
                self.up = true;
                return Some(true);
            }
        } else {
            self.consecutive_successes = 0;
            self.consecutive_failures = self.consecutive_failures.saturating_add(1);
            if self.up && self.consecutive_failures >= fall {
                self.up = false;
                return Some(false);
            }
        }
        None
    }
}

/// Uniform in `base * [1 - pct/100, 1 + pct/100]`.
pub fn jittered_interval<R: Rng + ?Sized>(base: Duration, spread_pct: f64, rng: &mut R) -> Duration {
    if spread_pct <= 0.0 {
        return base;
    }
    let f = spread_pct / 100.0;
    base.mul_f64(rng.random_range(1.0 - f..=1.0 + f))
}

/// Offsets from loop start of the first `n` probes of one server: one
/// jittered gap before each.
pub fn probe_schedule<R: Rng + ?Sized>(interval: Duration, spread_pct: f64, rng: &mut R, n: usize) -> Vec<Duration> {
    let mut at = Duration::ZERO;
    (0..n)
        .map(|_| {
            at += jittered_interval(interval, spread_pct, rng);
            at
        })
        .collect()
}

/// Health state of every backend, shared by the probe tasks and the
/// request path.
pub struct HealthBoard {
    statuses: Mutex<Vec<HealthStatus>>,
    dispatcher: SharedDispatcher,
    fall: u32,
    rise: u32,
}

impl HealthBoard {
    pub fn new(dispatcher: SharedDispatcher, ids: Vec<ServerId>, fall: u32, rise: u32) -> Self {
        HealthBoard {
            statuses: Mutex::new(ids.into_iter().map(HealthStatus::new).collect()),
            dispatcher,
            fall,
            rise,
        }
    }

    pub fn snapshot(&self) -> Vec<HealthStatus> {
        self.statuses.lock().expect("health lock").clone()
    }

    /// Records a result for backend `idx` and applies any transition to the
    /// pool.
    pub fn record(&self, idx: usize, ok: bool) {
        let mut statuses = self.statuses.lock().expect("health lock");
        let status = &mut statuses[idx];
        if let Some(up) = status.record(ok, self.fall, self.rise, Instant::now()) {
            let id = status.server_id;
            log::warn!("server {id} is now {}", if up { "UP" } else { "DOWN" });
            self.dispatcher
                .with_pool_mut(|p| p.set_up(id, up))
                .expect("board ids come from the pool");
        }
    }
}

/// `GET /`; healthy when any status below 500 arrives within `limit`.
pub async fn probe(addr: SocketAddr, limit: Duration) -> bool {
    let attempt = async {
        let mut s = TcpStream::connect(addr).await.ok()?;
        s.write_all(b"GET / HTTP/1.1\r\nHost: health-check\r\nConnection: close\r\n\r\n")
            .await
            .ok()?;
        let (head, _) = read_response_head(&mut s).await.ok()?;
        Some(head.status)
    };
    matches!(timeout(limit, attempt).await, Ok(Some(status)) if status < 500)
}

/// `GET /utilization`, a decimal in [0, 1]. Anything else reads as 0.
pub async fn probe_utilization(addr: SocketAddr, limit: Duration) -> f64 {
    let attempt = async {
        let mut s = TcpStream::connect(addr).await.ok()?;
        s.write_all(b"GET /utilization HTTP/1.1\r\nHost: health-check\r\nConnection: close\r\n\r\n")
            .await
            .ok()?;
        let (head, mut body) = read_response_head(&mut s).await.ok()?;
        if head.status != 200 {
            return None;
        }
        s.read_to_end(&mut body).await.ok()?;
        let v: f64 = std::str::from_utf8(&body).ok()?.trim().parse().ok()?;
        (0.0..=1.0).contains(&v).then_some(v)
    };
    timeout(limit, attempt).await.ok().flatten().unwrap_or(0.0)
}

/// One probe task per backend until `shutdown` flips.
pub fn spawn_health_loop(
    config: &HealthConfig,
    servers: &[BackendConfig],
    board: Arc<HealthBoard>,
    dispatcher: SharedDispatcher,
    shutdown: watch::Receiver<bool>,
) -> Vec<tokio::task::JoinHandle<()>> {
    let start = Instant::now();
    let poll_utilization = dispatcher.algorithm().kind == AlgorithmKind::CpuRandom;
    servers
        .iter()
        .enumerate()
        .map(|(idx, server)| {
            let cfg = config.clone();
            let addr = server.address;
            let board = board.clone();
            let dispatcher = dispatcher.clone();
            let mut shutdown = shutdown.clone();
            tokio::spawn(async move {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(idx as u64));
                let id = ServerId(idx as u32 + 1);
                let mut next = start;
                loop {
                    next += jittered_interval(cfg.interval, cfg.spread_checks_pct, &mut rng);
                    tokio::select! {
                        _ = tokio::time::sleep_until(next) => {}
                        _ = shutdown.changed() => return,
                    }
                    let ok = probe(addr, cfg.timeout).await;
                    board.record(idx, ok);
                    if poll_utilization {
                        let u = probe_utilization(addr, cfg.timeout).await;
                        dispatcher
                            .with_pool_mut(|p| p.set_cpu_utilization(id, u))
                            .expect("utilization within [0, 1]");
                    }
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fall_and_rise() {
        let now = Instant::now();
        let mut s = HealthStatus::new(ServerId(1));
        assert_eq!(s.record(false, 3, 2, now), None);
        assert_eq!(s.record(false, 3, 2, now), None);
        assert_eq!(s.record(false, 3, 2, now), Some(false));
        assert_eq!(s.record(false, 3, 2, now), None);
        assert_eq!(s.record(true, 3, 2, now), None);
        assert_eq!(s.record(true, 3, 2, now), Some(true));
        assert!(s.up);
        // An intervening success resets the failure streak.
        s.record(false, 3, 2, now);
        s.record(false, 3, 2, now);
        s.record(true, 3, 2, now);
        assert_eq!(s.record(false, 3, 2, now), None);
        assert!(s.up);
    }

    #[test]
    fn no_jitter_means_identical_schedules() {
        let base = Duration::from_secs(2);
        let schedules: Vec<Vec<Duration>> = (0..4)
            .map(|i| probe_schedule(base, 0.0, &mut ChaCha8Rng::seed_from_u64(i), 5))
            .collect();
        assert!(schedules.iter().all(|s| *s == schedules[0]));
        assert_eq!(schedules[0][2], Duration::from_secs(6));
    }

    #[test]
    fn jitter_bounds() {
        let base = Duration::from_secs(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gaps: Vec<Duration> = (0..2000).map(|_| jittered_interval(base, 50.0, &mut rng)).collect();
        assert!(gaps.iter().all(|g| *g >= Duration::from_secs(1) && *g <= Duration::from_secs(3)));
        let lo = gaps.iter().min().unwrap().as_secs_f64();
        let hi = gaps.iter().max().unwrap().as_secs_f64();
        assert!(lo < 1.05 && hi > 2.95, "gaps should cover the range: {lo} {hi}");
        // Different servers are spread apart.
        let a = probe_schedule(base, 50.0, &mut ChaCha8Rng::seed_from_u64(0), 3);
        let b = probe_schedule(base, 50.0, &mut ChaCha8Rng::seed_from_u64(1), 3);
        assert_ne!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gaps_stay_in_band(pct in 0.0f64..=50.0, base_ms in 1u64..10_000, seed in any::<u64>()) {
                let base = Duration::from_millis(base_ms);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = jittered_interval(base, pct, &mut rng).as_secs_f64();
                let b = base.as_secs_f64();
                prop_assert!(g >= b * (1.0 - pct / 100.0) - 1e-9);
                prop_assert!(g <= b * (1.0 + pct / 100.0) + 1e-9);
            }
        }
    }
}
