use super::SelectError;
use crate::pool::BackendPool;
use crate::server::ServerId;

/// Sticky first-fit: stay on the server under the cursor while it has a free
/// slot, otherwise walk forward in id order (wrapping once) to the next up
/// server with a free slot and leave the cursor there.
///
/// Servers with unlimited maxconn never fill, so the cursor never leaves them.
pub fn select_first(pool: &mut BackendPool) -> Result<ServerId, SelectError> {
    let n = pool.len();
    let start = pool.first_cursor;
    let found = (0..n).map(|step| (start + step) % n).find(|&idx| {
        let s = &pool.servers()[idx];
        s.is_up() && s.spec.maxconn.admits(s.active())
    });
    match found {
        Some(idx) => {
            pool.first_cursor = idx;
            Ok(pool.servers()[idx].id())
        }
        None if pool.up_count() == 0 => Err(SelectError::EmptyPool),
        None => Err(SelectError::AllServersFull),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::ServerSpec;

    fn capped(caps: &[u32]) -> BackendPool {
        BackendPool::new(
            caps.iter()
                .enumerate()
                .map(|(i, &c)| ServerSpec::new(i as u32 + 1, format!("s{}", i + 1)).with_maxconn(c))
                .collect(),
        )
        .unwrap()
    }

    fn take(pool: &mut BackendPool) -> Result<ServerId, SelectError> {
        let id = select_first(pool)?;
        let idx = pool.index_of(id).unwrap();
        pool.acquire(idx);
        Ok(id)
    }

    #[test]
    fn fills_in_id_order() {
        let mut p = capped(&[2, 2, 2]);
        let seq: Vec<u32> = (0..5).map(|_| take(&mut p).unwrap().0).collect();
        assert_eq!(seq, vec![1, 1, 2, 2, 3]);
    }

    #[test]
    fn all_full_is_rejected() {
        let mut p = capped(&[1, 1]);
        take(&mut p).unwrap();
        take(&mut p).unwrap();
        assert_eq!(select_first(&mut p), Err(SelectError::AllServersFull));
    }

    #[test]
    fn cursor_stays_on_server_with_free_slot() {
        let mut p = capped(&[1, 1]);
        assert_eq!(take(&mut p), Ok(ServerId(1)));
        p.release(ServerId(1)).unwrap();
        assert_eq!(take(&mut p), Ok(ServerId(1)));
    }

    #[test]
    fn cursor_is_sticky_past_freed_lower_slots() {
        let mut p = capped(&[1, 2]);
        assert_eq!(take(&mut p), Ok(ServerId(1)));
        assert_eq!(take(&mut p), Ok(ServerId(2)));
        p.release(ServerId(1)).unwrap();
        // Server 2 still has a free slot, so the cursor does not go back.
        assert_eq!(take(&mut p), Ok(ServerId(2)));
        // Full now; wraps to server 1.
        assert_eq!(take(&mut p), Ok(ServerId(1)));
    }

    #[test]
    fn down_servers_skipped() {
        let mut p = capped(&[5, 5]);
        p.set_up(ServerId(1), false).unwrap();
        assert_eq!(take(&mut p), Ok(ServerId(2)));
        p.set_up(ServerId(2), false).unwrap();
        assert_eq!(select_first(&mut p), Err(SelectError::EmptyPool));
    }
}
