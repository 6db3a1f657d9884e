//! Minimal REST over HTTP/1.1: request grammar, the three response formats,
//! a blocking client and a thread-per-connection server.
//!
//! Framing is `Content-Length` only and every connection carries one
//! request.

use std::collections::HashMap;
use std::fmt;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Get,
    Put,
    Post,
    Delete,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Get, Verb::Put, Verb::Post, Verb::Delete];

    /// Single-character code used by the device firmware.
    pub fn code(self) -> char {
        match self {
            Verb::Get => 'G',
            Verb::Put => 'P',
            Verb::Post => 'O',
            Verb::Delete => 'D',
        }
    }

    pub fn from_code(c: char) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.code() == c)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Get => "GET",
            Verb::Put => "PUT",
            Verb::Post => "POST",
            Verb::Delete => "DELETE",
        }
    }

    pub fn parse(token: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.as_str() == token)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestRequest {
    pub verb: Verb,
    pub rewrite_base: String,
    /// `segments[0]` is the service, `segments[1]` the method.
    pub segments: Vec<String>,
    pub query: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
    /// `token` field of a JSON object body, if any.
    pub token: Option<u64>,
}

impl RestRequest {
    pub fn new(verb: Verb, rewrite_base: &str, segments: &[&str]) -> Self {
        RestRequest {
            verb,
            rewrite_base: rewrite_base.to_string(),
            segments: segments.iter().map(|s| s.to_string()).collect(),
            query: Vec::new(),
            body: None,
            token: None,
        }
    }

    pub fn with_json(mut self, body: &Value) -> Self {
        self.token = body.get("token").and_then(Value::as_u64);
        self.body = Some(body.to_string().into_bytes());
        self
    }

    pub fn service(&self) -> Option<&str> {
        self.segments.first().map(String::as_str)
    }

    pub fn method(&self) -> Option<&str> {
        self.segments.get(1).map(String::as_str)
    }

    pub fn query_value(&self, key: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Body parsed as JSON, `Value::Null` when absent or not JSON.
    pub fn json(&self) -> Value {
        self.body
            .as_deref()
            .and_then(|b| serde_json::from_slice(b).ok())
            .unwrap_or(Value::Null)
    }

    pub fn path(&self) -> String {
        let mut p = String::new();
        if !self.rewrite_base.is_empty() {
            p.push('/');
            p.push_str(&self.rewrite_base);
        }
        for s in &self.segments {
            p.push('/');
            p.push_str(s);
        }
        if p.is_empty() {
            p.push('/');
        }
        if !self.query.is_empty() {
            p.push('?');
            let q: Vec<String> = self.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
            p.push_str(&q.join("&"));
        }
        p
    }

    pub fn to_bytes(&self, host: &str) -> Vec<u8> {
        let body = self.body.as_deref().unwrap_or_default();
        let mut out = format!(
            "{} {} HTTP/1.1\r\nHost: {host}\r\nContent-Length: {}\r\nConnection: close\r\n",
            self.verb,
            self.path(),
            body.len()
        );
        if !body.is_empty() {
            out.push_str("Content-Type: application/json\r\n");
        }
        out.push_str("\r\n");
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(body);
        bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    MethodNotAllowed,
    ServiceUnavailable,
}

impl Status {
    pub fn line(self) -> &'static str {
        match self {
            Status::Ok => "200 OK",
            Status::MethodNotAllowed => "405 Method not allowed",
            Status::ServiceUnavailable => "503 Service Unavailable",
        }
    }

    pub fn code(self) -> u16 {
        match self {
            Status::Ok => 200,
            Status::MethodNotAllowed => 405,
            Status::ServiceUnavailable => 503,
        }
    }

    pub fn from_code(code: u16) -> Option<Status> {
        match code {
            200 => Some(Status::Ok),
            405 => Some(Status::MethodNotAllowed),
            503 => Some(Status::ServiceUnavailable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestResponse {
    pub status: Status,
    pub body: Vec<u8>,
}

impl RestResponse {
    /// `200 OK` with body `{"result":"<result>","token":<token>}`.
    pub fn ok(result: &str, token: u64) -> Self {
        let quoted = serde_json::to_string(result).unwrap_or_else(|_| "\"\"".into());
        RestResponse {
            status: Status::Ok,
            body: format!("{{\"result\":{quoted},\"token\":{token}}}").into_bytes(),
        }
    }

    pub fn method_not_allowed() -> Self {
        RestResponse { status: Status::MethodNotAllowed, body: Vec::new() }
    }

    pub fn unavailable() -> Self {
        RestResponse { status: Status::ServiceUnavailable, body: Vec::new() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// The `(result, token)` pair of a 200 body.
    pub fn result(&self) -> Option<(String, u64)> {
        let v: Value = serde_json::from_slice(&self.body).ok()?;
        Some((v.get("result")?.as_str()?.to_string(), v.get("token")?.as_u64()?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "HTTP/1.1 {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.status.line(),
            self.body.len()
        )
        .into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses a full HTTP response as written by [`RestResponse::to_bytes`].
    pub fn parse(raw: &[u8]) -> Option<RestResponse> {
        let (head, body) = split_head(raw)?;
        let head = std::str::from_utf8(head).ok()?;
        let status_line = head.lines().next()?;
        let code: u16 = status_line.split_whitespace().nth(1)?.parse().ok()?;
        let status = Status::from_code(code)?;
        let len = content_length(head).unwrap_or(body.len());
        if body.len() < len {
            return None;
        }
        Some(RestResponse { status, body: body[..len].to_vec() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Limits {
    pub rewrite_base: String,
    pub max_line: usize,
    pub max_body: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { rewrite_base: "api".into(), max_line: 512, max_body: 4096 }
    }
}

/// Input the server drops without writing a single byte.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("request rejected: {0}")]
pub struct RejectSilently(pub &'static str);

fn split_head(raw: &[u8]) -> Option<(&[u8], &[u8])> {
    if let Some(i) = find(raw, b"\r\n\r\n") {
        return Some((&raw[..i], &raw[i + 4..]));
    }
    find(raw, b"\n\n").map(|i| (&raw[..i], &raw[i + 2..]))
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn content_length(head: &str) -> Option<usize> {
    head.lines().skip(1).find_map(|l| {
        let (k, v) = l.split_once(':')?;
        k.trim().eq_ignore_ascii_case("content-length").then(|| v.trim().parse().ok())?
    })
}

/// Parses one raw request. Total over arbitrary input.
pub fn parse_request(raw: &[u8], limits: &Limits) -> Result<RestRequest, RejectSilently> {
    if raw.is_empty() || raw[0] == 0 {
        return Err(RejectSilently("empty request"));
    }
    let (head, rest) = match split_head(raw) {
        Some(parts) => parts,
        None => (raw, &raw[raw.len()..]),
    };
    let line_end = find(head, b"\n").unwrap_or(head.len());
    let line = &head[..line_end];
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.len() > limits.max_line {
        return Err(RejectSilently("request line too long"));
    }
    let line = std::str::from_utf8(line).map_err(|_| RejectSilently("request line is not UTF-8"))?;
    let mut parts = line.split(' ');
    let verb = parts
        .next()
        .and_then(Verb::parse)
        .ok_or(RejectSilently("unrecognized verb"))?;
    let target = parts.next().ok_or(RejectSilently("missing request target"))?;
    match parts.next() {
        None => {}
        Some(v) if v.starts_with("HTTP/") => {}
        Some(_) => return Err(RejectSilently("malformed request line")),
    }
    if parts.next().is_some() || !target.starts_with('/') {
        return Err(RejectSilently("malformed request line"));
    }

    let (path, query_text) = match target.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (target, None),
    };
    let mut segments: Vec<String> = path
        .split('/')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let mut rewrite_base = String::new();
    if !limits.rewrite_base.is_empty()
        && segments
            .first()
            .is_some_and(|s| s.eq_ignore_ascii_case(&limits.rewrite_base))
    {
        rewrite_base = segments.remove(0);
    }
    let query = query_text
        .map(|q| {
            q.split('&')
                .filter(|p| !p.is_empty())
                .map(|p| match p.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (p.to_string(), String::new()),
                })
                .collect()
        })
        .unwrap_or_default();

    let head_text = String::from_utf8_lossy(head);
    let body = match content_length(&head_text) {
        Some(n) if n > limits.max_body => return Err(RejectSilently("body too large")),
        Some(n) if rest.len() < n => return Err(RejectSilently("truncated body")),
        Some(0) => None,
        Some(n) => Some(rest[..n].to_vec()),
        None if rest.is_empty() => None,
        None if rest.len() > limits.max_body => return Err(RejectSilently("body too large")),
        None => Some(rest.to_vec()),
    };
    let token = body
        .as_deref()
        .and_then(|b| serde_json::from_slice::<Value>(b).ok())
        .and_then(|v| v.get("token").and_then(Value::as_u64));

    Ok(RestRequest { verb, rewrite_base, segments, query, body, token })
}

/// A named REST service, the unit the dispatcher routes to.
pub trait Service: Send {
    /// Called before every request; `false` answers 503 with an empty body.
    fn init(&mut self) -> bool {
        true
    }

    fn handle(&mut self, req: &RestRequest) -> RestResponse;
}

pub type Registry = HashMap<String, Box<dyn Service>>;

/// Routes a request to the service named by its first segment.
pub fn dispatch(req: &RestRequest, registry: &mut Registry) -> RestResponse {
    let Some(service) = req.service().and_then(|s| registry.get_mut(s)) else {
        return RestResponse::unavailable();
    };
    if !service.init() {
        return RestResponse::unavailable();
    }
    service.handle(req)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("no response within the timeout")]
    TimeoutExpired,
    #[error("transport error: {0}")]
    Transport(String),
}

/// Outbound side of the transport; swapped for fakes in tests.
pub trait Messenger: Send + Sync {
    fn send(&self, endpoint: &str, req: &RestRequest, timeout: Duration) -> Result<RestResponse, SendError>;
}

/// Real TCP client.
#[derive(Debug, Clone, Copy, Default)]
pub struct HttpMessenger;

impl Messenger for HttpMessenger {
    fn send(&self, endpoint: &str, req: &RestRequest, timeout: Duration) -> Result<RestResponse, SendError> {
        send_request(endpoint, req, timeout)
    }
}

fn io_error(e: std::io::Error) -> SendError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => SendError::TimeoutExpired,
        _ => SendError::Transport(e.to_string()),
    }
}

/// Sends one request and waits for the full response, giving up once
/// `timeout` has elapsed.
pub fn send_request(endpoint: &str, req: &RestRequest, timeout: Duration) -> Result<RestResponse, SendError> {
    if timeout.is_zero() {
        return Err(SendError::TimeoutExpired);
    }
    let deadline = Instant::now() + timeout;
    let addr: SocketAddr = endpoint
        .to_socket_addrs()
        .map_err(|e| SendError::Transport(format!("cannot resolve {endpoint}: {e}")))?
        .next()
        .ok_or_else(|| SendError::Transport(format!("cannot resolve {endpoint}")))?;
    let remaining = |now: Instant| deadline.checked_duration_since(now).filter(|d| !d.is_zero());

    let mut stream = TcpStream::connect_timeout(&addr, remaining(Instant::now()).ok_or(SendError::TimeoutExpired)?)
        .map_err(io_error)?;
    let _ = stream.set_nodelay(true);
    stream
        .set_write_timeout(remaining(Instant::now()))
        .map_err(io_error)?;
    stream.write_all(&req.to_bytes(endpoint)).map_err(io_error)?;

    let mut buf = Vec::with_capacity(256);
    let mut chunk = [0u8; 2048];
    loop {
        let left = remaining(Instant::now()).ok_or(SendError::TimeoutExpired)?;
        stream.set_read_timeout(Some(left)).map_err(io_error)?;
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if let Some((head, body)) = split_head(&buf) {
                    let head = String::from_utf8_lossy(head);
                    if content_length(&head).is_some_and(|len| body.len() >= len) {
                        break;
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(io_error(e)),
        }
    }
    if buf.is_empty() {
        return Err(SendError::Transport("connection closed without a response".into()));
    }
    RestResponse::parse(&buf).ok_or_else(|| SendError::Transport("malformed response".into()))
}

/// What the server does with a parsed request.
pub enum Reply {
    Respond(RestResponse),
    /// Keep the connection open without answering until the peer gives up.
    Silent,
    /// Close the connection without answering.
    Close,
}

pub type Handler = Arc<dyn Fn(RestRequest) -> Reply + Send + Sync>;

/// Thread-per-connection HTTP server.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

/// Longest time a silent connection is held open.
const SILENT_HOLD: Duration = Duration::from_secs(600);

impl Server {
    pub fn bind(addr: &str, limits: Limits, handler: Handler) -> std::io::Result<Server> {
        Server::serve(TcpListener::bind(addr)?, limits, handler)
    }

    pub fn serve(listener: TcpListener, limits: Limits, handler: Handler) -> std::io::Result<Server> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let limits = Arc::new(limits);
        let accept = thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let handler = handler.clone();
                    let limits = limits.clone();
                    let stop = stop_flag.clone();
                    let _ = thread::Builder::new()
                        .name("conn".into())
                        .spawn(move || serve_connection(stream, &limits, &handler, &stop));
                }
            })?;
        Ok(Server { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn read_request(stream: &mut TcpStream, limits: &Limits) -> Option<Vec<u8>> {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let max_head = limits.max_line + 2048;
    let mut buf = Vec::with_capacity(512);
    let mut chunk = [0u8; 1024];
    loop {
        if let Some((head, body)) = split_head(&buf) {
            let head = String::from_utf8_lossy(head);
            match content_length(&head) {
                Some(n) if n > limits.max_body => return Some(buf),
                Some(n) if body.len() < n => {}
                _ => return Some(buf),
            }
        } else if buf.len() > max_head {
            return Some(buf);
        }
        match stream.read(&mut chunk) {
            Ok(0) => return Some(buf),
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(_) => return None,
        }
    }
}

fn serve_connection(mut stream: TcpStream, limits: &Limits, handler: &Handler, stop: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    let Some(raw) = read_request(&mut stream, limits) else {
        return;
    };
    if stop.load(Ordering::SeqCst) {
        return;
    }
    let Ok(req) = parse_request(&raw, limits) else {
        return;
    };
    match handler(req) {
        Reply::Respond(resp) => {
            let _ = stream.write_all(&resp.to_bytes());
            let _ = stream.flush();
            let _ = stream.shutdown(Shutdown::Write);
        }
        Reply::Close => {}
        Reply::Silent => {
            // Hold until the client hangs up or the server stops.
            let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
            let started = Instant::now();
            let mut sink = [0u8; 256];
            while started.elapsed() < SILENT_HOLD && !stop.load(Ordering::SeqCst) {
                match stream.read(&mut sink) {
                    Ok(0) => break,
                    Ok(_) => {}
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
                    Err(_) => break,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn limits() -> Limits {
        Limits::default()
    }

    #[test]
    fn status_lines_are_exact() {
        assert_eq!(Status::Ok.line(), "200 OK");
        assert_eq!(Status::MethodNotAllowed.line(), "405 Method not allowed");
        assert_eq!(Status::ServiceUnavailable.line(), "503 Service Unavailable");
    }

    #[test]
    fn ok_body_golden() {
        let r = RestResponse::ok("aviso recibido", 7341);
        assert_eq!(r.body, br#"{"result":"aviso recibido","token":7341}"#);
        assert_eq!(
            r.to_bytes(),
            b"HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: 40\r\nConnection: close\r\n\r\n{\"result\":\"aviso recibido\",\"token\":7341}".to_vec()
        );
        assert_eq!(RestResponse::parse(&r.to_bytes()), Some(r));
    }

    #[test]
    fn error_responses_golden() {
        assert_eq!(
            RestResponse::method_not_allowed().to_bytes(),
            b"HTTP/1.1 405 Method not allowed\r\nContent-Type: application/json\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_vec()
        );
        assert_eq!(
            RestResponse::unavailable().to_bytes(),
            b"HTTP/1.1 503 Service Unavailable\r\nContent-Type: application/json\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_vec()
        );
    }

    #[test]
    fn result_escapes_quotes() {
        let r = RestResponse::ok("say \"hi\"", 1);
        assert_eq!(r.body, br#"{"result":"say \"hi\"","token":1}"#);
        assert_eq!(r.result(), Some(("say \"hi\"".into(), 1)));
    }

    #[test]
    fn parse_post_with_token() {
        let body = r#"{"token":7341,"value":"km 23"}"#;
        let raw = format!(
            "POST /api/baliza/informarIncidente HTTP/1.1\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let req = parse_request(raw.as_bytes(), &limits()).unwrap();
        assert_eq!(req.verb.code(), 'O');
        assert_eq!(req.rewrite_base, "api");
        assert_eq!(req.segments, ["baliza", "informarIncidente"]);
        assert_eq!(req.token, Some(7341));
    }

    #[test]
    fn parse_get_with_query() {
        let req = parse_request(b"GET /api/central/estado?id=3&full=1", &limits()).unwrap();
        assert_eq!(req.verb, Verb::Get);
        assert_eq!(req.segments, ["central", "estado"]);
        assert_eq!(req.query, [("id".to_string(), "3".to_string()), ("full".to_string(), "1".to_string())]);
        assert_eq!(req.body, None);
    }

    #[test]
    fn rewrite_base_is_case_insensitive_and_optional() {
        let req = parse_request(b"GET /API/x/y HTTP/1.1\r\n\r\n", &limits()).unwrap();
        assert_eq!(req.segments, ["x", "y"]);
        let req = parse_request(b"GET /x/y HTTP/1.1\r\n\r\n", &limits()).unwrap();
        assert_eq!(req.segments, ["x", "y"]);
        assert_eq!(req.rewrite_base, "");
    }

    #[test]
    fn rejects() {
        assert!(parse_request(b"", &limits()).is_err());
        assert!(parse_request(b"\0GET / HTTP/1.1", &limits()).is_err());
        assert!(parse_request(b"PATCH /api/x HTTP/1.1\r\n\r\n", &limits()).is_err());
        assert!(parse_request(b"get /api/x HTTP/1.1\r\n\r\n", &limits()).is_err());
        let long = format!("GET /{} HTTP/1.1\r\n\r\n", "a".repeat(600));
        assert!(parse_request(long.as_bytes(), &limits()).is_err());
        let big = format!("POST /api/x HTTP/1.1\r\nContent-Length: 5000\r\n\r\n{}", "a".repeat(5000));
        assert!(parse_request(big.as_bytes(), &limits()).is_err());
    }

    #[test]
    fn request_round_trip() {
        let mut req = RestRequest::new(Verb::Put, "api", &["tx", "99", "prepare"]).with_json(&json!({"token": 99}));
        req.query.push(("a".into(), "b".into()));
        let parsed = parse_request(&req.to_bytes("h"), &limits()).unwrap();
        assert_eq!(parsed, req);
    }

    struct Echo;
    impl Service for Echo {
        fn handle(&mut self, req: &RestRequest) -> RestResponse {
            if req.verb != Verb::Post {
                return RestResponse::method_not_allowed();
            }
            RestResponse::ok(req.method().unwrap_or(""), req.token.unwrap_or(0))
        }
    }

    struct Broken;
    impl Service for Broken {
        fn init(&mut self) -> bool {
            false
        }
        fn handle(&mut self, _: &RestRequest) -> RestResponse {
            RestResponse::ok("never", 0)
        }
    }

    #[test]
    fn dispatch_routes() {
        let mut reg: Registry = HashMap::new();
        reg.insert("echo".into(), Box::new(Echo));
        reg.insert("broken".into(), Box::new(Broken));
        let post = RestRequest::new(Verb::Post, "api", &["echo", "tempReport"]).with_json(&json!({"token": 5}));
        assert_eq!(dispatch(&post, &mut reg), RestResponse::ok("tempReport", 5));
        let get = RestRequest::new(Verb::Get, "api", &["echo", "tempReport"]);
        assert_eq!(dispatch(&get, &mut reg), RestResponse::method_not_allowed());
        let nobody = RestRequest::new(Verb::Post, "api", &["nadie", "x"]);
        assert_eq!(dispatch(&nobody, &mut reg), RestResponse::unavailable());
        let broken = RestRequest::new(Verb::Post, "api", &["broken", "x"]);
        assert_eq!(dispatch(&broken, &mut reg).body, Vec::<u8>::new());
        assert_eq!(dispatch(&broken, &mut reg).status, Status::ServiceUnavailable);
    }

    #[test]
    fn loopback_round_trip_and_failures() {
        let handler: Handler = Arc::new(|req: RestRequest| match req.method() {
            Some("silent") => Reply::Silent,
            Some("close") => Reply::Close,
            _ => Reply::Respond(RestResponse::ok("pong", req.token.unwrap_or(0))),
        });
        let mut server = Server::bind("127.0.0.1:0", Limits::default(), handler).unwrap();
        let ep = server.endpoint();
        let ping = RestRequest::new(Verb::Post, "api", &["svc", "ping"]).with_json(&json!({"token": 3}));
        let r = send_request(&ep, &ping, Duration::from_secs(2)).unwrap();
        assert_eq!(r, RestResponse::ok("pong", 3));

        let silent = RestRequest::new(Verb::Post, "api", &["svc", "silent"]);
        let started = Instant::now();
        assert_eq!(send_request(&ep, &silent, Duration::from_millis(300)), Err(SendError::TimeoutExpired));
        let waited = started.elapsed();
        assert!(waited >= Duration::from_millis(300) && waited < Duration::from_millis(450), "{waited:?}");

        let close = RestRequest::new(Verb::Post, "api", &["svc", "close"]);
        assert!(matches!(send_request(&ep, &close, Duration::from_secs(2)), Err(SendError::Transport(_))));
        assert_eq!(send_request(&ep, &ping, Duration::ZERO), Err(SendError::TimeoutExpired));
        server.shutdown();
    }

    #[test]
    fn closed_port_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let req = RestRequest::new(Verb::Post, "api", &["x", "y"]);
        let started = Instant::now();
        let r = send_request(&port.to_string(), &req, Duration::from_secs(5));
        assert!(matches!(r, Err(SendError::Transport(_))), "{r:?}");
        assert!(started.elapsed() < Duration::from_secs(1));
    }

    proptest! {
        #[test]
        fn verb_code_bijection(i in 0usize..4) {
            let v = Verb::ALL[i];
            prop_assert_eq!(Verb::from_code(v.code()), Some(v));
            prop_assert_eq!(Verb::parse(v.as_str()), Some(v));
        }

        #[test]
        fn parser_is_total(raw in proptest::collection::vec(any::<u8>(), 0..700)) {
            let _ = parse_request(&raw, &Limits::default());
        }

        #[test]
        fn query_order_preserved(pairs in proptest::collection::vec(("[a-z]{1,5}", "[a-z0-9]{0,5}"), 0..6)) {
            let q: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let raw = format!("GET /api/s/m?{} HTTP/1.1\r\n\r\n", q.join("&"));
            let req = parse_request(raw.as_bytes(), &Limits::default()).unwrap();
            prop_assert_eq!(req.query, pairs);
        }
    }
}
