use super::SelectError;
use crate::pool::BackendPool;
use crate::server::ServerId;

/// Batch weighted round-robin over live weights: each up server, in id
/// order, takes `weight` consecutive selections before the cursor moves on.
/// Weights are re-read at each cycle boundary.
pub fn select_roundrobin(pool: &mut BackendPool) -> Result<ServerId, SelectError> {
    pool.next_batch(false)
        .map(|i| pool.servers()[i].id())
        .ok_or(SelectError::EmptyPool)
}

/// Same batch rule driven by the weights the pool was built with; runtime
/// weight changes are ignored.
pub fn select_static_rr(pool: &mut BackendPool) -> Result<ServerId, SelectError> {
    pool.next_batch(true)
        .map(|i| pool.servers()[i].id())
        .ok_or(SelectError::EmptyPool)
}
