//! In-process stub of a chat-completions endpoint, for conformance tests.
//!
//! Binds a real TCP port on localhost and serves scripted responses:
//! canned JSON, arbitrary HTTP statuses, delayed replies (to exercise
//! client timeouts), or dropped connections (to exercise transport
//! retries). Every request is parsed and recorded so tests can assert on
//! the wire format the client produced. This is a test fixture, not a
//! server — connections are handled serially and each is closed after one
//! response.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;

/// A parsed request the stub received.
#[derive(Debug, Clone)]
pub struct StubRequest {
    /// Request path (e.g. "/v1/chat/completions").
    pub path: String,
    /// Lowercased header name/value pairs.
    pub headers: Vec<(String, String)>,
    /// Parsed JSON body (`Value::Null` when unparseable).
    pub body: Value,
    /// 0-based ordinal of this request.
    pub ordinal: usize,
}

impl StubRequest {
    /// First header value with the given (case-insensitive) name.
    pub fn header(&self, name: &str) -> Option<&str> {
        let name = name.to_ascii_lowercase();
        self.headers
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.as_str())
    }
}

/// What the stub does with one request.
#[derive(Debug, Clone)]
pub struct StubResponse {
    status: u16,
    body: String,
    delay: Duration,
    drop_connection: bool,
}

impl StubResponse {
    /// 200 OK with a JSON body.
    pub fn json(value: Value) -> StubResponse {
        StubResponse {
            status: 200,
            body: value.to_string(),
            delay: Duration::ZERO,
            drop_connection: false,
        }
    }

    /// An arbitrary status with a plain body.
    pub fn status(status: u16, body: &str) -> StubResponse {
        StubResponse {
            status,
            body: body.to_string(),
            delay: Duration::ZERO,
            drop_connection: false,
        }
    }

    /// Accept the connection, then close it without responding.
    pub fn drop_connection() -> StubResponse {
        StubResponse {
            status: 0,
            body: String::new(),
            delay: Duration::ZERO,
            drop_connection: true,
        }
    }

    /// Sleep before acting (for timeout tests).
    pub fn after(mut self, delay: Duration) -> StubResponse {
        self.delay = delay;
        self
    }
}

type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync;

/// The running stub server.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    hits: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<StubRequest>>>,
}

impl StubServer {
    /// Starts a stub on an ephemeral localhost port.
    pub fn start<F>(handler: F) -> StubServer
    where
        F: Fn(&StubRequest) -> StubResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub listener");
        let addr = listener.local_addr().expect("stub local addr");
        let shutdown = Arc::new(AtomicBool::new(false));
        let hits = Arc::new(AtomicUsize::new(0));
        let requests: Arc<Mutex<Vec<StubRequest>>> = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);

        let thread_shutdown = shutdown.clone();
        let thread_hits = hits.clone();
        let thread_requests = requests.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                serve_one(stream, &handler, &thread_hits, &thread_requests);
            }
        });

        StubServer {
            addr,
            shutdown,
            handle: Some(handle),
            hits,
            requests,
        }
    }

    /// Convenience: a stub that always answers with the same JSON.
    pub fn with_fixed_json(value: Value) -> StubServer {
        StubServer::start(move |_| StubResponse::json(value.clone()))
    }

    /// Chat-completions URL of this stub.
    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Number of requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Snapshot of every parsed request so far.
    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().expect("stub request log").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(
    stream: TcpStream,
    handler: &Arc<Handler>,
    hits: &AtomicUsize,
    requests: &Mutex<Vec<StubRequest>>,
) {
    let Some(request) = read_request(&stream, hits) else {
        return;
    };
    requests.lock().expect("stub request log").push(request.clone());
    let response = handler(&request);
    if !response.delay.is_zero() {
        std::thread::sleep(response.delay);
    }
    if response.drop_connection {
        // Dropping the stream closes the socket without a response.
        return;
    }
    let reason = match response.status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Response",
    };
    let payload = format!(
        "HTTP/1.1 {} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
        response.status,
        reason,
        response.body.len(),
        response.body
    );
    let mut stream = stream;
    let _ = stream.write_all(payload.as_bytes());
    let _ = stream.flush();
}

fn read_request(stream: &TcpStream, hits: &AtomicUsize) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    if request_line.trim().is_empty() {
        return None; // shutdown wake-up connection
    }
    let path = request_line.split_whitespace().nth(1)?.to_string();

    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            if name == "content-length" {
                content_length = value.parse().unwrap_or(0);
            }
            headers.push((name, value));
        }
    }

    let mut body_bytes = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body_bytes).ok()?;
    }
    let body = serde_json::from_slice(&body_bytes).unwrap_or(Value::Null);
    let ordinal = hits.fetch_add(1, Ordering::SeqCst);
    Some(StubRequest {
        path,
        headers,
        body,
        ordinal,
    })
}
