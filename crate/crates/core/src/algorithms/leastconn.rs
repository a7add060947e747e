use super::SelectError;
use crate::pool::BackendPool;
use crate::server::ServerId;

/// Fewest active connections among up servers. Ties rotate round-robin: the
/// pick is the first tied id after the previous leastconn pick, wrapping.
pub fn select_leastconn(pool: &mut BackendPool) -> Result<ServerId, SelectError> {
    let min = pool
        .up_indices()
        .map(|i| pool.servers()[i].active())
        .min()
        .ok_or(SelectError::EmptyPool)?;
    let tied: Vec<ServerId> = pool
        .up_indices()
        .map(|i| &pool.servers()[i])
        .filter(|s| s.active() == min)
        .map(|s| s.id())
        .collect();
    let chosen = match pool.leastconn_last {
        Some(last) => tied.iter().copied().find(|&id| id > last).unwrap_or(tied[0]),
        None => tied[0],
    };
    pool.leastconn_last = Some(chosen);
    Ok(chosen)
}
