//! Just enough HTTP/1.1 to relay one exchange per connection.

use std::io;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt};

pub const MAX_HEAD: usize = 16 * 1024;
pub const MAX_BODY: usize = 8 * 1024 * 1024;
const MAX_HEADERS: usize = 64;

pub const SERVER_HEADER: &str = "X-Balancelab-Server";

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("connection closed before a complete message")]
    Closed,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message head exceeds {MAX_HEAD} bytes")]
    HeadTooLarge,
    #[error("body exceeds {MAX_BODY} bytes")]
    BodyTooLarge,
    #[error("chunked request bodies are not supported")]
    Chunked,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HttpError {
    /// Status the proxy answers a client with when its request fails so.
    pub fn client_status(&self) -> u16 {
        match self {
            HttpError::HeadTooLarge => 431,
            HttpError::BodyTooLarge => 413,
            HttpError::Chunked => 501,
            _ => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHead {
    pub method: String,
    pub target: String,
    pub headers: Vec<(String, Vec<u8>)>,
}

impl RequestHead {
    pub fn header(&self, name: &str) -> Option<&[u8]> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_slice())
    }

    pub fn header_str(&self, name: &str) -> Option<&str> {
        self.header(name).and_then(|v| std::str::from_utf8(v).ok())
    }

    fn content_length(&self) -> Result<usize, HttpError> {
        if self
            .header_str("transfer-encoding")
            .is_some_and(|v| !v.trim().eq_ignore_ascii_case("identity"))
        {
            return Err(HttpError::Chunked);
        }
        match self.header_str("content-length") {
            None => Ok(0),
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| HttpError::Malformed(format!("bad Content-Length '{v}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub head: RequestHead,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseHead {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, Vec<u8>)>,
}

/// Reads from `r` into `buf` until `parse` recognises a complete head.
/// Returns the parsed value and the head length; bytes past the head stay in
/// `buf`.
async fn read_head<R, T>(
    r: &mut R,
    buf: &mut Vec<u8>,
    mut parse: impl FnMut(&[u8]) -> Result<Option<(T, usize)>, HttpError>,
) -> Result<(T, usize), HttpError>
where
    R: AsyncRead + Unpin,
{
    let mut chunk = [0u8; 4096];
    loop {
        if !buf.is_empty() {
            if let Some(done) = parse(buf)? {
                return Ok(done);
            }
        }
        if buf.len() > MAX_HEAD {
            return Err(HttpError::HeadTooLarge);
        }
        let n = r.read(&mut chunk).await?;
        if n == 0 {
            return Err(HttpError::Closed);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

fn owned_headers(headers: &[httparse::Header<'_>]) -> Vec<(String, Vec<u8>)> {
    headers.iter().map(|h| (h.name.to_string(), h.value.to_vec())).collect()
}

fn parse_request_head(buf: &[u8]) -> Result<Option<(RequestHead, usize)>, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    match req.parse(buf) {
        Ok(httparse::Status::Complete(n)) => {
            if req.version != Some(1) {
                return Err(HttpError::Malformed("only HTTP/1.1 is accepted".into()));
            }
            let head = RequestHead {
                method: req.method.unwrap_or_default().to_string(),
                target: req.path.unwrap_or_default().to_string(),
                headers: owned_headers(req.headers),
            };
            Ok(Some((head, n)))
        }
        Ok(httparse::Status::Partial) => Ok(None),
        Err(e) => Err(HttpError::Malformed(e.to_string())),
    }
}

fn parse_response_head(buf: &[u8]) -> Result<Option<(ResponseHead, usize)>, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    match resp.parse(buf) {
        Ok(httparse::Status::Complete(n)) => {
            let head = ResponseHead {
                status: resp.code.unwrap_or(0),
                reason: resp.reason.unwrap_or_default().to_string(),
                headers: owned_headers(resp.headers),
            };
            Ok(Some((head, n)))
        }
        Ok(httparse::Status::Partial) => Ok(None),
        Err(e) => Err(HttpError::Malformed(e.to_string())),
    }
}

/// Reads one request with its Content-Length body.
pub async fn read_request<R: AsyncRead + Unpin>(r: &mut R) -> Result<Request, HttpError> {
    let mut buf = Vec::with_capacity(1024);
    let (head, head_len) = read_head(r, &mut buf, parse_request_head).await?;
    let len = head.content_length()?;
    if len > MAX_BODY {
        return Err(HttpError::BodyTooLarge);
    }
    let mut body = buf.split_off(head_len);
    if body.len() < len {
        let have = body.len();
        body.resize(len, 0);
        r.read_exact(&mut body[have..]).await.map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => HttpError::Closed,
            _ => HttpError::Io(e),
        })?;
    }
    body.truncate(len);
    Ok(Request { head, body })
}

/// Reads a response head; returns it with any body bytes already received.
pub async fn read_response_head<R: AsyncRead + Unpin>(r: &mut R) -> Result<(ResponseHead, Vec<u8>), HttpError> {
    let mut buf = Vec::with_capacity(1024);
    let (head, head_len) = read_head(r, &mut buf, parse_response_head).await?;
    Ok((head, buf.split_off(head_len)))
}

fn hop_by_hop(name: &str) -> bool {
    ["connection", "keep-alive", "proxy-connection"]
        .iter()
        .any(|h| name.eq_ignore_ascii_case(h))
}

fn push_headers(out: &mut Vec<u8>, headers: &[(String, Vec<u8>)]) {
    for (name, value) in headers.iter().filter(|(n, _)| !hop_by_hop(n)) {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value);
        out.extend_from_slice(b"\r\n");
    }
}

/// The request as sent upstream: same line, headers and body, with
/// `Connection: close`.
pub fn serialize_request(req: &Request) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + req.body.len());
    out.extend_from_slice(format!("{} {} HTTP/1.1\r\n", req.head.method, req.head.target).as_bytes());
    push_headers(&mut out, &req.head.headers);
    out.extend_from_slice(b"Connection: close\r\n\r\n");
    out.extend_from_slice(&req.body);
    out
}

/// The upstream response head as relayed to the client, naming the server.
pub fn relay_response_head(head: &ResponseHead, server: &str) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {} {}\r\n", head.status, head.reason).into_bytes();
    let own = |n: &str| n.eq_ignore_ascii_case(SERVER_HEADER);
    let kept: Vec<_> = head.headers.iter().filter(|(n, _)| !own(n)).cloned().collect();
    push_headers(&mut out, &kept);
    out.extend_from_slice(format!("{SERVER_HEADER}: {server}\r\nConnection: close\r\n\r\n").as_bytes());
    out
}

pub fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        413 => "Payload Too Large",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        501 => "Not Implemented",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "Unknown",
    }
}

/// A complete response generated by the proxy itself.
pub fn simple_response(status: u16, server: Option<&str>) -> Vec<u8> {
    let body = format!("{status} {}\n", reason(status));
    let mut out = format!("HTTP/1.1 {status} {}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\n", reason(status), body.len());
    if let Some(s) = server {
        out.push_str(&format!("{SERVER_HEADER}: {s}\r\n"));
    }
    out.push_str("Connection: close\r\n\r\n");
    out.push_str(&body);
    out.into_bytes()
}
