//! Stable key hashing and the weight-bucket mapping shared by every
//! hash-based algorithm.
//!
//! The mapping is plain modulo over the sum of live weights, so a membership
//! change moves most keys. That is the documented behaviour of `source` and
//! `uri`, not a consistent-hash ring.

use crate::pool::BackendPool;
use crate::server::ServerId;

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

/// Bytes extracted from a request to feed the hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashKey(pub Vec<u8>);

impl HashKey {
    pub fn from_ip(ip: u32) -> Self {
        HashKey(ip.to_be_bytes().to_vec())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for HashKey {
    fn from(s: &str) -> Self {
        HashKey(s.as_bytes().to_vec())
    }
}

impl From<String> for HashKey {
    fn from(s: String) -> Self {
        HashKey(s.into_bytes())
    }
}

/// FNV-1a, 64-bit.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |state, &b| {
        (state ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

/// Maps `hash` onto the up servers' weight slots: `slot = hash % sum_weight`,
/// and server `s` owns `[prefix(s), prefix(s) + weight(s))` in id order.
/// Returns `None` when no server is up.
pub fn map_hash_to_server(hash: u64, pool: &BackendPool) -> Option<ServerId> {
    map_hash_to_index(hash, pool).map(|i| pool.servers()[i].id())
}

pub(crate) fn map_hash_to_index(hash: u64, pool: &BackendPool) -> Option<usize> {
    let total = pool.sum_weight();
    if total == 0 {
        return None;
    }
    let mut slot = hash % total;
    for idx in pool.up_indices() {
        let w = pool.servers()[idx].weight() as u64;
        if slot < w {
            return Some(idx);
        }
        slot -= w;
    }
    None
}
