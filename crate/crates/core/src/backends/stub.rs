//! Loopback OpenAI-compatible server for exercising [`super::HttpBackend`].

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::synthetic::{arbitrate_prompt, coherence_raw, conclusion_sentences, viewpoint_text};
use super::{prompt_field, SyntheticEmbedder};
use crate::benchmark::{parse_question, SyntheticGraph};

/// Failure injection and canned replies.
#[derive(Debug, Clone, Default)]
pub struct StubBehavior {
    /// The first `fail_first` requests receive HTTP 503.
    pub fail_first: usize,
    /// Return an unparseable body for chat requests.
    pub malformed_chat: bool,
    /// Extra latency added before every reply.
    pub delay: Duration,
    /// Fixed chat reply overriding the built-in responder.
    pub chat_reply: Option<String>,
    /// Graph used to answer generation prompts; without one the stub answers `unknown`.
    pub graph: Option<SyntheticGraph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubLogEntry {
    /// Seconds since the server started.
    pub at: f64,
    pub path: String,
    pub status: u16,
}

struct Shared {
    behavior: StubBehavior,
    embedder: SyntheticEmbedder,
    started: Instant,
    served: AtomicUsize,
    log: Mutex<Vec<StubLogEntry>>,
    shutdown: AtomicBool,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(behavior: StubBehavior, embedder: SyntheticEmbedder) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            behavior,
            embedder,
            started: Instant::now(),
            served: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
            shutdown: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if s.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    let _ = serve(stream, &s);
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn log(&self) -> Vec<StubLogEntry> {
        self.shared.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, s: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    if !s.behavior.delay.is_zero() {
        thread::sleep(s.behavior.delay);
    }
    let n = s.served.fetch_add(1, Ordering::SeqCst);
    let (status, payload) = if n < s.behavior.fail_first {
        (503, r#"{"error":"overloaded"}"#.to_string())
    } else {
        respond(&path, &body, s)
    };
    s.log.lock().unwrap_or_else(|e| e.into_inner()).push(StubLogEntry {
        at: s.started.elapsed().as_secs_f64(),
        path,
        status,
    });
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

fn respond(path: &str, body: &[u8], s: &Shared) -> (u16, String) {
    let Ok(req) = serde_json::from_slice::<Value>(body) else {
        return (400, r#"{"error":"bad json"}"#.into());
    };
    if path.ends_with("/embeddings") {
        let Some(input) = req.get("input").and_then(Value::as_str) else {
            return (400, r#"{"error":"missing input"}"#.into());
        };
        return match s.embedder.embed(input) {
            Ok(e) => (200, json!({"data": [{"index": 0, "embedding": e.values()}]}).to_string()),
            Err(e) => (400, json!({"error": e.to_string()}).to_string()),
        };
    }
    if path.ends_with("/chat/completions") {
        if s.behavior.malformed_chat {
            return (200, "{not json".into());
        }
        let prompt = req
            .pointer("/messages")
            .and_then(Value::as_array)
            .and_then(|m| m.last())
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .unwrap_or("");
        let reply = s.behavior.chat_reply.clone().unwrap_or_else(|| chat_reply(prompt, s));
        return (200, json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": reply}}]}).to_string());
    }
    (404, r#"{"error":"not found"}"#.into())
}

fn chat_reply(prompt: &str, s: &Shared) -> String {
    if prompt.contains("### Conclusion") {
        let raw = coherence_raw(&s.embedder, &conclusion_sentences(prompt), 1.0).unwrap_or(0.0);
        return format!("{}", (raw.clamp(0.0, 1.0) * 10.0).round());
    }
    if prompt.contains("### Viewpoint") {
        return arbitrate_prompt(prompt).unwrap_or_else(|_| "Answer: unknown".into());
    }
    let parsed = prompt_field(prompt, "Question:").and_then(parse_question);
    match (parsed, &s.behavior.graph) {
        (Some((source, relations)), Some(graph)) => {
            let mut cur = source;
            let mut claims = Vec::new();
            for rel in &relations {
                match graph.follow(&cur, std::slice::from_ref(rel)) {
                    Some(next) => {
                        claims.push(format!("{cur} {rel} {next}"));
                        cur = next;
                    }
                    None => return "Answer: unknown".into(),
                }
            }
            viewpoint_text(&claims, &cur)
        }
        _ => "Answer: unknown".into(),
    }
}
