//! The routable unit handed to the dispatcher.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::DEFAULT_DEADLINE_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RequestError {
    #[error("path must start with '/': {0:?}")]
    PathNotAbsolute(String),
    #[error("path has an empty intermediate segment: {0:?}")]
    EmptySegment(String),
    #[error("deadline must be positive, got {0}")]
    InvalidDeadline(f64),
    #[error("unsupported method {0:?}")]
    UnsupportedMethod(String),
}

/// The two task types carried by the workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GET" => Ok(Method::Get),
            "POST" => Ok(Method::Post),
            other => Err(RequestError::UnsupportedMethod(other.to_string())),
        }
    }
}

/// Insertion-ordered header list with case-insensitive name lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.push((name.into(), value.into()));
    }

    /// First value whose name matches `name` ignoring ASCII case.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<N: Into<String>, V: Into<String>> FromIterator<(N, V)> for Headers {
    fn from_iter<T: IntoIterator<Item = (N, V)>>(iter: T) -> Self {
        Headers(iter.into_iter().map(|(n, v)| (n.into(), v.into())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub request_id: u64,
    /// Seconds on the simulation clock, or since proxy start in live mode.
    pub arrival_time: f64,
    pub method: Method,
    path: String,
    query: Option<String>,
    pub headers: Headers,
    pub client_ip: u32,
    pub rdp_cookie: Option<String>,
    /// Seconds relative to `arrival_time`.
    deadline: f64,
}

impl Request {
    /// Builds a request with the default deadline. An empty query string is
    /// stored as absent.
    pub fn new(
        request_id: u64,
        method: Method,
        path: impl Into<String>,
        query: Option<String>,
    ) -> Result<Self, RequestError> {
        let path = path.into();
        validate_path(&path)?;
        Ok(Request {
            request_id,
            arrival_time: 0.0,
            method,
            path,
            query: query.filter(|q| !q.is_empty()),
            headers: Headers::new(),
            client_ip: 0,
            rdp_cookie: None,
            deadline: DEFAULT_DEADLINE_S,
        })
    }

    /// Splits `target` ("/path?query") into path and query.
    pub fn from_target(request_id: u64, method: Method, target: &str) -> Result<Self, RequestError> {
        match target.split_once('?') {
            Some((path, query)) => Self::new(request_id, method, path, Some(query.to_string())),
            None => Self::new(request_id, method, target, None),
        }
    }

    pub fn with_arrival(mut self, t: f64) -> Self {
        self.arrival_time = t;
        self
    }

    pub fn with_client_ip(mut self, ip: impl Into<Ipv4Addr>) -> Self {
        self.client_ip = u32::from(ip.into());
        self
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(name, value);
        self
    }

    pub fn with_rdp_cookie(mut self, cookie: impl Into<String>) -> Self {
        self.rdp_cookie = Some(cookie.into());
        self
    }

    pub fn with_deadline(mut self, deadline: f64) -> Result<Self, RequestError> {
        if !(deadline > 0.0) {
            return Err(RequestError::InvalidDeadline(deadline));
        }
        self.deadline = deadline;
        Ok(self)
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn query(&self) -> Option<&str> {
        self.query.as_deref()
    }

    pub fn deadline(&self) -> f64 {
        self.deadline
    }

    pub fn client_addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.client_ip)
    }
}

fn validate_path(path: &str) -> Result<(), RequestError> {
    let Some(rest) = path.strip_prefix('/') else {
        return Err(RequestError::PathNotAbsolute(path.to_string()));
    };
    let segments: Vec<&str> = rest.split('/').collect();
    // A trailing empty segment ("/blog/") is allowed; interior ones are not.
    if segments.len() > 1 && segments[..segments.len() - 1].iter().any(|s| s.is_empty()) {
        return Err(RequestError::EmptySegment(path.to_string()));
    }
    Ok(())
}
