use rand::seq::index;
use rand::Rng;

use super::{SelectError, Selection};
use crate::pool::BackendPool;
use crate::server::ServerId;

/// Power-of-N choices: draw `min(power_n, up)` distinct up servers and keep
/// the one with the fewest active connections, lowest id on ties.
pub fn select_random<R: Rng + ?Sized>(
    pool: &BackendPool,
    power_n: u32,
    rng: &mut R,
) -> Result<ServerId, SelectError> {
    let candidates: Vec<usize> = pool.up_indices().collect();
    least_loaded_of_draw(pool, &candidates, power_n, rng)
        .map(|i| pool.servers()[i].id())
        .ok_or(SelectError::EmptyPool)
}

/// `select_random` restricted to up servers whose CPU utilization is below
/// `threshold`. With no such server, draws from every up server and flags
/// the fallback.
pub fn select_cpu_random<R: Rng + ?Sized>(
    pool: &BackendPool,
    threshold: f64,
    power_n: u32,
    rng: &mut R,
) -> Result<Selection, SelectError> {
    let cool: Vec<usize> = pool
        .up_indices()
        .filter(|&i| pool.servers()[i].state.cpu_utilization < threshold)
        .collect();
    if cool.is_empty() {
        return select_random(pool, power_n, rng).map(Selection::fallback);
    }
    let idx = least_loaded_of_draw(pool, &cool, power_n, rng).expect("non-empty candidates");
    Ok(Selection::direct(pool.servers()[idx].id()))
}

fn least_loaded_of_draw<R: Rng + ?Sized>(
    pool: &BackendPool,
    candidates: &[usize],
    power_n: u32,
    rng: &mut R,
) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let amount = (power_n as usize).min(candidates.len());
    index::sample(rng, candidates.len(), amount)
        .into_iter()
        .map(|j| candidates[j])
        .min_by_key(|&i| {
            let s = &pool.servers()[i];
            (s.active(), s.id())
        })
}
