//! Dispatch/release lifecycle shared by the simulator and the proxy.
//!
//! A [`Dispatcher`] owns the pool, the algorithm config and the RNG. Selection
//! and the counter increment happen in one `&mut self` call, so wrapping it in
//! [`SharedDispatcher`] gives each dispatch a single critical section.

use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algorithms::{self, AlgorithmConfig, AlgorithmKind, SelectError};
use crate::pool::{BackendPool, PoolError};
use crate::request::Request;
use crate::server::ServerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Every server is down.
    NoServerAvailable,
    /// `first` found no up server with a free slot.
    AllServersFull,
    /// The selected server is at its finite maxconn.
    ServerFull(ServerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Chosen(ServerId),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionDecision {
    pub algorithm: AlgorithmKind,
    pub outcome: Outcome,
    pub fallback_used: bool,
}

impl SelectionDecision {
    pub fn chosen(&self) -> Option<ServerId> {
        match self.outcome {
            Outcome::Chosen(id) => Some(id),
            Outcome::Rejected(_) => None,
        }
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self.outcome, Outcome::Rejected(_))
    }
}

#[derive(Debug, Clone)]
pub struct Dispatcher {
    pool: BackendPool,
    config: AlgorithmConfig,
    rng: ChaCha8Rng,
}

impl Dispatcher {
    pub fn new(pool: BackendPool, config: AlgorithmConfig) -> Result<Self, SelectError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Dispatcher { pool, config, rng })
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.config
    }

    pub fn pool(&self) -> &BackendPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut BackendPool {
        &mut self.pool
    }

    pub fn into_pool(self) -> BackendPool {
        self.pool
    }

    /// Selects a server and, on success, counts the new connection against
    /// it. A rejection leaves every counter untouched.
    ///
    /// Per-server maxconn is consulted by `first` itself; for the other
    /// methods a chosen server already at a finite maxconn turns the decision
    /// into a rejection instead of overfilling it.
    pub fn dispatch(&mut self, request: &Request) -> SelectionDecision {
        let algorithm = self.config.kind;
        let rejected = |reason| SelectionDecision {
            algorithm,
            outcome: Outcome::Rejected(reason),
            fallback_used: false,
        };
        let selection = match algorithms::select(&mut self.pool, request, &self.config, &mut self.rng) {
            Ok(s) => s,
            Err(SelectError::AllServersFull) => return rejected(RejectReason::AllServersFull),
            Err(SelectError::EmptyPool) => return rejected(RejectReason::NoServerAvailable),
            Err(SelectError::InvalidConfig(msg)) => unreachable!("config validated at construction: {msg}"),
        };
        let idx = self.pool.index_of(selection.server).expect("selector returns pool members");
        let server = &self.pool.servers()[idx];
        if !server.spec.maxconn.admits(server.active()) {
            return rejected(RejectReason::ServerFull(selection.server));
        }
        self.pool.acquire(idx);
        SelectionDecision {
            algorithm,
            outcome: Outcome::Chosen(selection.server),
            fallback_used: selection.fallback_used,
        }
    }

    pub fn release(&mut self, server: ServerId) -> Result<(), PoolError> {
        self.pool.release(server)
    }
}

/// Thread-safe handle; every operation is one critical section.
#[derive(Debug, Clone)]
pub struct SharedDispatcher(Arc<Mutex<Dispatcher>>);

impl SharedDispatcher {
    pub fn new(dispatcher: Dispatcher) -> Self {
        SharedDispatcher(Arc::new(Mutex::new(dispatcher)))
    }

    fn lock(&self) -> MutexGuard<'_, Dispatcher> {
        // A panic while holding the lock cannot leave the counters half
        // updated, so a poisoned lock is still usable.
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dispatch(&self, request: &Request) -> SelectionDecision {
        self.lock().dispatch(request)
    }

    pub fn release(&self, server: ServerId) -> Result<(), PoolError> {
        self.lock().release(server)
    }

    pub fn with_pool<T>(&self, f: impl FnOnce(&BackendPool) -> T) -> T {
        f(self.lock().pool())
    }

    pub fn with_pool_mut<T>(&self, f: impl FnOnce(&mut BackendPool) -> T) -> T {
        f(self.lock().pool_mut())
    }

    pub fn algorithm(&self) -> AlgorithmConfig {
        self.lock().config().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::Method;
    use crate::server::ServerSpec;
    use rand::seq::index;
    use rand::Rng;

    fn req() -> Request {
        Request::new(0, Method::Get, "/", None).unwrap()
    }

    fn dispatcher(pool: BackendPool, kind: AlgorithmKind) -> Dispatcher {
        Dispatcher::new(pool, AlgorithmConfig::new(kind)).unwrap()
    }

    fn ids(d: &mut Dispatcher, n: usize) -> Vec<u32> {
        (0..n).map(|_| d.dispatch(&req()).chosen().unwrap().0).collect()
    }

    #[test]
    fn roundrobin_equal_weights() {
        let mut d = dispatcher(BackendPool::uniform(3), AlgorithmKind::RoundRobin);
        assert_eq!(ids(&mut d, 3), vec![1, 2, 3]);
        assert_eq!(d.pool().total_dispatched(), 3);
        assert!(d.pool().servers().iter().all(|s| s.active() == 1));
    }

    #[test]
    fn all_down_is_rejected_without_state_change() {
        for kind in AlgorithmKind::ALL {
            let mut pool = BackendPool::new(vec![
                ServerSpec::new(1, "a").with_maxconn(4),
                ServerSpec::new(2, "b").with_maxconn(4),
            ])
            .unwrap();
            pool.set_up(ServerId(1), false).unwrap();
            pool.set_up(ServerId(2), false).unwrap();
            let cfg = AlgorithmConfig::new(kind).with_header("Host");
            let mut d = Dispatcher::new(pool, cfg).unwrap();
            let decision = d.dispatch(&req().with_header("Host", "x").with_rdp_cookie("c"));
            assert_eq!(decision.outcome, Outcome::Rejected(RejectReason::NoServerAvailable), "{kind}");
            assert_eq!(d.pool().total_dispatched(), 0);
            assert_eq!(d.pool().total_active(), 0);
        }
    }

    #[test]
    fn leastconn_tie_subgroup() {
        let mut pool = BackendPool::uniform(5);
        for (id, c) in [(1, 4), (2, 2), (3, 2), (4, 9), (5, 7)] {
            pool.set_active_connections(ServerId(id), c).unwrap();
        }
        let mut d = dispatcher(pool, AlgorithmKind::LeastConn);
        let first = d.dispatch(&req()).chosen().unwrap();
        assert_eq!(first, ServerId(2));
        d.release(first).unwrap();
        assert_eq!(d.dispatch(&req()).chosen(), Some(ServerId(3)));
    }

    #[test]
    fn release_examples() {
        let mut d = dispatcher(BackendPool::uniform(1), AlgorithmKind::RoundRobin);
        assert_eq!(d.release(ServerId(1)), Err(PoolError::UnderflowRelease(ServerId(1))));
        let id = d.dispatch(&req()).chosen().unwrap();
        assert_eq!(d.pool().servers()[0].active(), 1);
        d.release(id).unwrap();
        assert_eq!(d.pool().servers()[0].active(), 0);
        assert_eq!(d.pool().servers()[0].state.total_dispatched, 1);
    }

    #[test]
    fn set_weight_roundrobin_vs_static() {
        let mut rr = dispatcher(BackendPool::uniform(2), AlgorithmKind::RoundRobin);
        let mut srr = dispatcher(BackendPool::uniform(2), AlgorithmKind::StaticRr);
        let before = ids(&mut srr.clone(), 6);
        for d in [&mut rr, &mut srr] {
            d.pool_mut().set_weight(ServerId(1), 3).unwrap();
            assert_eq!(d.pool().sum_weight(), 4);
            assert_eq!(d.pool().static_weights(), &[1, 1]);
        }
        assert_eq!(ids(&mut srr, 6), before);
        // Batch oracle: the change lands at the first cycle boundary.
        assert_eq!(ids(&mut rr, 8), vec![1, 1, 1, 2, 1, 1, 1, 2]);
    }

    #[test]
    fn first_rejects_when_full() {
        let pool = BackendPool::new((1..=3).map(|i| ServerSpec::new(i, format!("s{i}")).with_maxconn(2)).collect())
            .unwrap();
        let mut d = dispatcher(pool, AlgorithmKind::First);
        assert_eq!(ids(&mut d, 6), vec![1, 1, 2, 2, 3, 3]);
        let last = d.dispatch(&req());
        assert_eq!(last.outcome, Outcome::Rejected(RejectReason::AllServersFull));
        assert_eq!(d.pool().total_dispatched(), 6);
    }

    #[test]
    fn maxconn_guard_for_other_methods() {
        let pool = BackendPool::new(vec![ServerSpec::new(1, "a").with_maxconn(1), ServerSpec::new(2, "b")]).unwrap();
        let mut d = dispatcher(pool, AlgorithmKind::RoundRobin);
        assert_eq!(d.dispatch(&req()).chosen(), Some(ServerId(1)));
        assert_eq!(d.dispatch(&req()).chosen(), Some(ServerId(2)));
        assert_eq!(d.dispatch(&req()).outcome, Outcome::Rejected(RejectReason::ServerFull(ServerId(1))));
        assert_eq!(d.pool().servers()[0].active(), 1);
    }

    #[test]
    fn header_fallback_flag() {
        let mut d =
            Dispatcher::new(BackendPool::uniform(3), AlgorithmConfig::new(AlgorithmKind::Header).with_header("Host"))
                .unwrap();
        let dec = d.dispatch(&req());
        assert!(dec.fallback_used);
        assert_eq!(dec.chosen(), Some(ServerId(1)));
        assert!(!d.dispatch(&req().with_header("host", "a")).fallback_used);
    }

    /// Trace oracle for power-of-two: replays the seeded draw by hand.
    #[test]
    fn seeded_random_trace() {
        let mut d = Dispatcher::new(BackendPool::uniform(5), AlgorithmConfig::new(AlgorithmKind::Random).with_seed(42))
            .unwrap();
        let got = ids(&mut d, 10);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut conns = [0u32; 5];
        let mut expected = Vec::new();
        for _ in 0..10 {
            let drawn = index::sample(&mut rng, 5, 2).into_vec();
            let pick = *drawn.iter().min_by_key(|&&i| (conns[i], i)).unwrap();
            conns[pick] += 1;
            expected.push(pick as u32 + 1);
        }
        assert_eq!(got, expected);
    }

    /// Trace oracle for the CPU-filtered draw: only servers 1..=3 qualify.
    #[test]
    fn seeded_cpu_random_trace() {
        let mut pool = BackendPool::uniform(4);
        for (id, u) in [(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.9)] {
            pool.set_cpu_utilization(ServerId(id), u).unwrap();
        }
        let cfg = AlgorithmConfig::new(AlgorithmKind::CpuRandom).with_threshold(0.5).with_seed(7);
        let mut d = Dispatcher::new(pool, cfg).unwrap();
        let got = ids(&mut d, 20);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conns = [0u32; 3];
        let mut expected = Vec::new();
        for _ in 0..20 {
            let drawn = index::sample(&mut rng, 3, 2).into_vec();
            let pick = *drawn.iter().min_by_key(|&&i| (conns[i], i)).unwrap();
            conns[pick] += 1;
            expected.push(pick as u32 + 1);
        }
        assert_eq!(got, expected);
        assert!(!got.contains(&4));
    }

    #[test]
    fn shared_dispatcher_concurrent_counts() {
        let shared = SharedDispatcher::new(dispatcher(BackendPool::uniform(4), AlgorithmKind::LeastConn));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let s = shared.clone();
                std::thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t);
                    for _ in 0..500 {
                        let id = s.dispatch(&req()).chosen().unwrap();
                        if rng.random_bool(0.9) {
                            s.release(id).unwrap();
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        shared.with_pool(|p| {
            assert_eq!(p.total_dispatched(), 4000);
            let active = p.total_active();
            assert!(active > 0 && active < 4000);
        });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn kind() -> impl Strategy<Value = AlgorithmKind> {
            proptest::sample::select(AlgorithmKind::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn dispatch_release_round_trip(
                kind in kind(),
                conns in proptest::collection::vec(0u32..5, 1..6),
                seed in any::<u64>(),
            ) {
                let specs = conns.iter().enumerate()
                    .map(|(i, _)| ServerSpec::new(i as u32 + 1, format!("s{i}")).with_maxconn(8))
                    .collect();
                let mut pool = BackendPool::new(specs).unwrap();
                for (i, &c) in conns.iter().enumerate() {
                    pool.set_active_connections(ServerId(i as u32 + 1), c).unwrap();
                }
                let cfg = AlgorithmConfig::new(kind).with_header("Host").with_seed(seed);
                let mut d = Dispatcher::new(pool, cfg).unwrap();
                let before: Vec<u32> = d.pool().servers().iter().map(|s| s.active()).collect();
                let decision = d.dispatch(&req().with_client_ip(std::net::Ipv4Addr::from(seed as u32)));
                let id = decision.chosen().unwrap();
                d.release(id).unwrap();
                let after: Vec<u32> = d.pool().servers().iter().map(|s| s.active()).collect();
                prop_assert_eq!(before, after);
                prop_assert_eq!(d.pool().total_dispatched(), 1);
            }

            #[test]
            fn active_never_exceeds_maxconn(
                kind in kind(),
                caps in proptest::collection::vec(1u32..4, 1..5),
                ops in proptest::collection::vec(any::<bool>(), 0..60),
                seed in any::<u64>(),
            ) {
                let specs = caps.iter().enumerate()
                    .map(|(i, &c)| ServerSpec::new(i as u32 + 1, format!("s{i}")).with_maxconn(c))
                    .collect();
                let cfg = AlgorithmConfig::new(kind).with_header("Host").with_seed(seed);
                let mut d = Dispatcher::new(BackendPool::new(specs).unwrap(), cfg).unwrap();
                let mut live: Vec<ServerId> = Vec::new();
                let mut released = 0u64;
                for (step, dispatch) in ops.into_iter().enumerate() {
                    if dispatch || live.is_empty() {
                        if let Some(id) = d.dispatch(&req()).chosen() {
                            live.push(id);
                        }
                    } else {
                        let id = live.swap_remove(step % live.len());
                        d.release(id).unwrap();
                        released += 1;
                    }
                    for (s, &cap) in d.pool().servers().iter().zip(&caps) {
                        prop_assert!(s.active() <= cap);
                    }
                }
                // Conservation: rejections never count as dispatched.
                prop_assert_eq!(d.pool().total_active(), live.len() as u64);
                prop_assert_eq!(d.pool().total_dispatched(), released + live.len() as u64);
            }
        }
    }
}
