//! Load-balancing engine with the HAProxy selection catalog, a deterministic
//! processor-sharing cluster simulator, a seeded workload generator and the
//! benchmark harness that sweeps them.
//!
//! The same [`dispatch::Dispatcher`] drives both the simulator and the live
//! proxy (see the `balancelab-proxy` crate).

pub mod algorithms;
pub mod config;
pub mod dispatch;
pub mod harness;
pub mod hashing;
pub mod pool;
pub mod request;
pub mod server;
pub mod sim;
pub mod workload;

pub use algorithms::{AlgorithmConfig, AlgorithmKind};
pub use dispatch::{Dispatcher, Outcome, RejectReason, SelectionDecision, SharedDispatcher};
pub use pool::{BackendPool, PoolError};
pub use request::{Headers, Method, Request, RequestError};
pub use server::{HardwareProfile, MaxConn, ServerId, ServerSpec, ServerState};

/// Default request deadline in seconds.
pub const DEFAULT_DEADLINE_S: f64 = 3.0;
