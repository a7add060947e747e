use super::{select_roundrobin, AlgorithmConfig, SelectError, Selection};
use crate::hashing::{map_hash_to_server, stable_hash, HashKey};
use crate::pool::BackendPool;
use crate::request::Request;
use crate::server::ServerId;

fn hash_to_server(pool: &BackendPool, key: &[u8]) -> Result<ServerId, SelectError> {
    map_hash_to_server(stable_hash(key), pool).ok_or(SelectError::EmptyPool)
}

/// Hashes the key when present; otherwise round-robin with the fallback flag.
fn hash_or_fallback(pool: &mut BackendPool, key: Option<&[u8]>) -> Result<Selection, SelectError> {
    match key {
        Some(k) => hash_to_server(pool, k).map(Selection::direct),
        None => select_roundrobin(pool).map(Selection::fallback),
    }
}

/// Client IPv4 address, network byte order.
pub fn select_source(pool: &BackendPool, request: &Request) -> Result<ServerId, SelectError> {
    hash_to_server(pool, HashKey::from_ip(request.client_ip).as_bytes())
}

/// The key hashed by `uri`: the path (cut to `uri_depth` directory
/// components when non-zero) followed by `?query` when queries are enabled.
pub fn uri_key(request: &Request, config: &AlgorithmConfig) -> HashKey {
    let mut key = String::new();
    if config.uri_use_path {
        key.push_str(&truncate_path(request.path(), config.uri_depth));
    }
    if config.uri_use_query {
        if let Some(q) = request.query() {
            key.push('?');
            key.push_str(q);
        }
    }
    HashKey::from(key)
}

fn truncate_path(path: &str, depth: u32) -> String {
    if depth == 0 {
        return path.to_string();
    }
    let components: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    if components.len() <= depth as usize {
        return path.to_string();
    }
    format!("/{}", components[..depth as usize].join("/"))
}

pub fn select_uri(
    pool: &BackendPool,
    request: &Request,
    config: &AlgorithmConfig,
) -> Result<ServerId, SelectError> {
    if !config.uri_use_path && !config.uri_use_query {
        return Err(SelectError::InvalidConfig("uri needs uri_use_path or uri_use_query".into()));
    }
    hash_to_server(pool, uri_key(request, config).as_bytes())
}

pub fn select_header(
    pool: &mut BackendPool,
    request: &Request,
    header_name: &str,
) -> Result<Selection, SelectError> {
    let value = request.headers.get(header_name).map(str::as_bytes);
    hash_or_fallback(pool, value)
}

pub fn select_rdp_cookie(pool: &mut BackendPool, request: &Request) -> Result<Selection, SelectError> {
    let cookie = request.rdp_cookie.as_deref().map(str::as_bytes);
    hash_or_fallback(pool, cookie)
}

/// Value of the first `name=value` pair in an `&`-separated query. No
/// percent-decoding; a bare `name` without `=` does not count.
pub fn query_param<'q>(query: &'q str, name: &str) -> Option<&'q str> {
    query
        .split('&')
        .filter_map(|pair| pair.split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

/// Hashes the named query parameter, or the whole query string when no name
/// is configured. Missing query or parameter falls back to round-robin.
pub fn select_url_param(
    pool: &mut BackendPool,
    request: &Request,
    param_name: Option<&str>,
) -> Result<Selection, SelectError> {
    let key = match (request.query(), param_name) {
        (Some(q), Some(name)) => query_param(q, name),
        (Some(q), None) => Some(q),
        (None, _) => None,
    };
    hash_or_fallback(pool, key.map(str::as_bytes))
}
