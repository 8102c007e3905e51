//! Scripted local HTTP server standing in for a chat-completions endpoint.
//!
//! Each incoming request consumes the next [`StubReply`] from the script;
//! once the script is exhausted every request gets HTTP 500. Every
//! connection is served on its own thread and closed after one response.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone)]
enum ReplyKind {
    Status(u16),
    Completion(String),
    Raw(u16, String),
    /// Hold the connection open without answering, then drop it.
    Hang(Duration),
}

#[derive(Debug, Clone)]
pub struct StubReply {
    kind: ReplyKind,
    delay: Duration,
}

impl StubReply {
    pub fn status(code: u16) -> Self {
        Self {
            kind: ReplyKind::Status(code),
            delay: Duration::ZERO,
        }
    }

    pub fn completion(text: impl Into<String>) -> Self {
        Self {
            kind: ReplyKind::Completion(text.into()),
            delay: Duration::ZERO,
        }
    }

    pub fn raw(code: u16, body: impl Into<String>) -> Self {
        Self {
            kind: ReplyKind::Raw(code, body.into()),
            delay: Duration::ZERO,
        }
    }

    pub fn hang(d: Duration) -> Self {
        Self {
            kind: ReplyKind::Hang(d),
            delay: Duration::ZERO,
        }
    }

    /// Wait `d` before answering.
    pub fn after(mut self, d: Duration) -> Self {
        self.delay = d;
        self
    }
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

#[derive(Default)]
struct Shared {
    script: Mutex<VecDeque<StubReply>>,
    requests: Mutex<Vec<StubRequest>>,
    active: AtomicUsize,
    max_active: AtomicUsize,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubReply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().expect("stub address");
        let shared = Arc::new(Shared {
            script: Mutex::new(script.into()),
            ..Shared::default()
        });
        let accept_shared = Arc::clone(&shared);
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_shared = Arc::clone(&accept_shared);
                std::thread::spawn(move || serve(stream, &conn_shared));
            }
        });
        Self {
            addr,
            shared,
            accept: Some(accept),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests fully received so far.
    pub fn hits(&self) -> usize {
        self.shared.requests.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.shared.requests.lock().unwrap().clone()
    }

    /// Highest number of requests being handled at the same time.
    pub fn max_concurrent(&self) -> usize {
        self.shared.max_active.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) {
    let Some(request) = read_request(&stream) else {
        return;
    };
    let now = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_active.fetch_max(now, Ordering::SeqCst);
    shared.requests.lock().unwrap().push(request);
    let reply = shared
        .script
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or_else(|| StubReply::raw(500, r#"{"error":"stub script exhausted"}"#));
    std::thread::sleep(reply.delay);
    let mut stream = stream;
    match reply.kind {
        ReplyKind::Hang(d) => std::thread::sleep(d),
        ReplyKind::Status(code) => write_response(&mut stream, code, &format!(r#"{{"error":{{"message":"status {code}"}}}}"#)),
        ReplyKind::Raw(code, body) => write_response(&mut stream, code, &body),
        ReplyKind::Completion(text) => {
            let body = serde_json::json!({
                "id": "stub",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            });
            write_response(&mut stream, 200, &body.to_string());
        }
    }
    shared.active.fetch_sub(1, Ordering::SeqCst);
}

fn write_response(stream: &mut TcpStream, code: u16, body: &str) {
    let reason = match code {
        200 => "OK",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let head = format!(
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
    let _ = stream.flush();
}

fn read_request(stream: &TcpStream) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut content_length = None;
    let mut chunked = false;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).ok()? == 0 {
            return None;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        let value = value.trim();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => content_length = value.parse::<usize>().ok(),
            "transfer-encoding" => chunked = value.eq_ignore_ascii_case("chunked"),
            "authorization" => authorization = Some(value.to_string()),
            _ => {}
        }
    }
    let body = if let Some(n) = content_length {
        let mut buf = vec![0; n];
        reader.read_exact(&mut buf).ok()?;
        buf
    } else if chunked {
        let mut buf = Vec::new();
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            buf.extend_from_slice(&chunk[..n]);
        }
        buf
    } else {
        Vec::new()
    };
    Some(StubRequest {
        method,
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    })
}
