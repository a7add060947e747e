//! Backend pool: id-ordered servers, live counters and the persistent
//! per-algorithm cursors.

use thiserror::Error;

use crate::server::{MaxConn, ServerId, ServerSpec, ServerState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pool needs at least one server")]
    Empty,
    #[error("duplicate server id {0}")]
    DuplicateServer(ServerId),
    #[error("unknown server id {0}")]
    UnknownServer(ServerId),
    #[error("invalid weight {0}; weights must be >= 1")]
    InvalidWeight(u32),
    #[error("invalid maxconn 0 on server {0}")]
    InvalidMaxConn(ServerId),
    #[error("release on server {0} with no active connections")]
    UnderflowRelease(ServerId),
    #[error("cpu utilization {0} outside [0, 1]")]
    InvalidUtilization(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Server {
    pub spec: ServerSpec,
    pub state: ServerState,
    /// Runtime weight; `spec.weight` keeps the configured value.
    weight: u32,
}

impl Server {
    pub fn id(&self) -> ServerId {
        self.spec.id
    }

    pub fn weight(&self) -> u32 {
        self.weight
    }

    pub fn is_up(&self) -> bool {
        self.state.up
    }

    pub fn active(&self) -> u32 {
        self.state.active_connections
    }
}

/// Batch weighted round-robin position.
///
/// A cycle is a snapshot of `(server index, weight)` for the up servers taken
/// when the previous cycle ended, so weight changes only land on a cycle
/// boundary. Each entry is served `weight` consecutive times.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct BatchCursor {
    cycle: Vec<(usize, u32)>,
    pos: usize,
    served: u32,
}

impl BatchCursor {
    pub(crate) fn reset(&mut self) {
        self.cycle.clear();
        self.pos = 0;
        self.served = 0;
    }

    /// Next server index. `snapshot` is only called at a cycle boundary.
    pub(crate) fn next_with(&mut self, snapshot: impl FnOnce() -> Vec<(usize, u32)>) -> Option<usize> {
        if self.pos >= self.cycle.len() {
            self.cycle = snapshot();
            self.pos = 0;
            self.served = 0;
        }
        let &(idx, weight) = self.cycle.get(self.pos)?;
        self.served += 1;
        if self.served >= weight {
            self.pos += 1;
            self.served = 0;
        }
        Some(idx)
    }

    /// Index currently being served and the selections it has left in this
    /// batch, or `None` at a cycle boundary.
    pub(crate) fn position(&self) -> Option<(usize, u32)> {
        self.cycle.get(self.pos).map(|&(idx, w)| (idx, w - self.served))
    }
}

#[derive(Debug, Clone)]
pub struct BackendPool {
    servers: Vec<Server>,
    sum_weight: u64,
    static_weights: Vec<u32>,
    pub(crate) rr: BatchCursor,
    pub(crate) static_rr: BatchCursor,
    pub(crate) first_cursor: usize,
    pub(crate) leastconn_last: Option<ServerId>,
}

impl BackendPool {
    pub fn new(mut specs: Vec<ServerSpec>) -> Result<Self, PoolError> {
        if specs.is_empty() {
            return Err(PoolError::Empty);
        }
        specs.sort_by_key(|s| s.id);
        for pair in specs.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(PoolError::DuplicateServer(pair[0].id));
            }
        }
        for s in &specs {
            if s.weight < 1 {
                return Err(PoolError::InvalidWeight(s.weight));
            }
            if s.maxconn == MaxConn::Limit(0) {
                return Err(PoolError::InvalidMaxConn(s.id));
            }
        }
        let static_weights = specs.iter().map(|s| s.weight).collect();
        let servers = specs
            .into_iter()
            .map(|spec| Server {
                weight: spec.weight,
                spec,
                state: ServerState::default(),
            })
            .collect();
        let mut pool = BackendPool {
            servers,
            sum_weight: 0,
            static_weights,
            rr: BatchCursor::default(),
            static_rr: BatchCursor::default(),
            first_cursor: 0,
            leastconn_last: None,
        };
        pool.sum_weight = pool.fresh_sum_weight();
        Ok(pool)
    }

    /// `n` servers with ids `1..=n`, weight 1, unlimited maxconn.
    pub fn uniform(n: u32) -> Self {
        Self::new((1..=n).map(|i| ServerSpec::new(i, format!("s{i}"))).collect())
            .expect("n >= 1 distinct ids")
    }

    pub fn servers(&self) -> &[Server] {
        &self.servers
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn index_of(&self, id: ServerId) -> Result<usize, PoolError> {
        self.servers
            .binary_search_by_key(&id, |s| s.id())
            .map_err(|_| PoolError::UnknownServer(id))
    }

    pub fn server(&self, id: ServerId) -> Result<&Server, PoolError> {
        self.index_of(id).map(|i| &self.servers[i])
    }

    pub fn ids(&self) -> Vec<ServerId> {
        self.servers.iter().map(Server::id).collect()
    }

    pub fn up_count(&self) -> usize {
        self.servers.iter().filter(|s| s.is_up()).count()
    }

    /// Indices of up servers in id order.
    pub fn up_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.servers.iter().enumerate().filter(|(_, s)| s.is_up()).map(|(i, _)| i)
    }

    /// Sum of live weights over up servers.
    pub fn sum_weight(&self) -> u64 {
        self.sum_weight
    }

    pub fn fresh_sum_weight(&self) -> u64 {
        self.servers.iter().filter(|s| s.is_up()).map(|s| s.weight as u64).sum()
    }

    /// Weights frozen at construction, in id order.
    pub fn static_weights(&self) -> &[u32] {
        &self.static_weights
    }

    pub fn set_weight(&mut self, id: ServerId, weight: u32) -> Result<(), PoolError> {
        if weight < 1 {
            return Err(PoolError::InvalidWeight(weight));
        }
        let idx = self.index_of(id)?;
        self.servers[idx].weight = weight;
        self.sum_weight = self.fresh_sum_weight();
        Ok(())
    }

    /// Marks a server up or down. Any actual transition resets the round-robin
    /// cursors so they never point at a down server.
    pub fn set_up(&mut self, id: ServerId, up: bool) -> Result<(), PoolError> {
        let idx = self.index_of(id)?;
        if self.servers[idx].state.up != up {
            self.servers[idx].state.up = up;
            self.sum_weight = self.fresh_sum_weight();
            self.rr.reset();
            self.static_rr.reset();
        }
        Ok(())
    }

    pub fn set_cpu_utilization(&mut self, id: ServerId, utilization: f64) -> Result<(), PoolError> {
        if !(0.0..=1.0).contains(&utilization) {
            return Err(PoolError::InvalidUtilization(utilization));
        }
        let idx = self.index_of(id)?;
        self.servers[idx].state.cpu_utilization = utilization;
        Ok(())
    }

    /// Decrements the active connection count of `id`.
    pub fn release(&mut self, id: ServerId) -> Result<(), PoolError> {
        let idx = self.index_of(id)?;
        let state = &mut self.servers[idx].state;
        if state.active_connections == 0 {
            return Err(PoolError::UnderflowRelease(id));
        }
        state.active_connections -= 1;
        Ok(())
    }

    /// Advances the live-weight (`roundrobin`) or startup-weight
    /// (`static_rr`) batch cursor.
    pub(crate) fn next_batch(&mut self, frozen: bool) -> Option<usize> {
        let servers = &self.servers;
        let statics = &self.static_weights;
        let cursor = if frozen { &mut self.static_rr } else { &mut self.rr };
        cursor.next_with(|| {
            servers
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_up())
                .map(|(i, s)| (i, if frozen { statics[i] } else { s.weight }))
                .collect()
        })
    }

    pub(crate) fn acquire(&mut self, idx: usize) {
        let state = &mut self.servers[idx].state;
        state.active_connections += 1;
        state.total_dispatched += 1;
    }

    pub fn total_dispatched(&self) -> u64 {
        self.servers.iter().map(|s| s.state.total_dispatched).sum()
    }

    pub fn total_active(&self) -> u64 {
        self.servers.iter().map(|s| s.state.active_connections as u64).sum()
    }

    /// Server the `roundrobin` cursor is on and its remaining batch credit.
    pub fn rr_position(&self) -> Option<(ServerId, u32)> {
        self.rr.position().map(|(i, left)| (self.servers[i].id(), left))
    }

    /// Server the `first` algorithm is currently filling.
    pub fn first_cursor(&self) -> ServerId {
        self.servers[self.first_cursor].id()
    }

    /// Test and simulation hook: overwrite a server's connection count.
    pub fn set_active_connections(&mut self, id: ServerId, active: u32) -> Result<(), PoolError> {
        let idx = self.index_of(id)?;
        self.servers[idx].state.active_connections = active;
        Ok(())
    }
}
