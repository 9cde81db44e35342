//! A minimal chat-completions server for tests and dry runs.
//!
//! Speaks just enough HTTP/1.1 to answer streaming requests with a scripted
//! server-sent-event body, with controllable delays before the stream starts
//! and between chunks.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct MockReply {
    pub status: u16,
    /// Content deltas, one SSE event each.
    pub chunks: Vec<String>,
    pub pre_stream_delay: Duration,
    pub inter_chunk_delay: Duration,
    /// `(prompt_tokens, completion_tokens)` reported in a final usage event.
    pub usage: Option<(u64, u64)>,
}

impl MockReply {
    pub fn text(chunks: impl IntoIterator<Item = impl Into<String>>) -> Self {
        MockReply {
            status: 200,
            chunks: chunks.into_iter().map(Into::into).collect(),
            pre_stream_delay: Duration::ZERO,
            inter_chunk_delay: Duration::ZERO,
            usage: None,
        }
    }

    pub fn error(status: u16, body: impl Into<String>) -> Self {
        MockReply {
            status,
            ..MockReply::text([body.into()])
        }
    }

    pub fn with_delays(mut self, pre_stream: Duration, inter_chunk: Duration) -> Self {
        self.pre_stream_delay = pre_stream;
        self.inter_chunk_delay = inter_chunk;
        self
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some((prompt_tokens, completion_tokens));
        self
    }
}

type Responder = dyn Fn(&Value) -> MockReply + Send + Sync;

pub struct MockChatServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<Mutex<Vec<Value>>>,
    accept: Option<JoinHandle<()>>,
}

impl MockChatServer {
    /// Binds an ephemeral localhost port; `respond` builds the reply from
    /// the parsed request body.
    pub fn start(respond: impl Fn(&Value) -> MockReply + Send + Sync + 'static) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let respond: Arc<Responder> = Arc::new(respond);
        let accept = {
            let stop = stop.clone();
            let requests = requests.clone();
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let respond = respond.clone();
                    let requests = requests.clone();
                    thread::spawn(move || {
                        let _ = serve(conn, respond.as_ref(), &requests);
                    });
                }
            })
        };
        Ok(MockChatServer {
            addr,
            stop,
            requests,
            accept: Some(accept),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Bodies of every request received so far.
    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for MockChatServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(conn: TcpStream, respond: &Responder, requests: &Mutex<Vec<Value>>) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((k, v)) = trimmed.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let reply = respond(&request);
    requests
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .push(request);

    let mut out = conn;
    thread::sleep(reply.pre_stream_delay);
    if reply.status != 200 {
        let body = reply.chunks.concat();
        write!(
            out,
            "HTTP/1.1 {} Error\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply.status,
            body.len(),
            body
        )?;
        return out.flush();
    }
    write!(
        out,
        "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n"
    )?;
    out.flush()?;
    for (i, chunk) in reply.chunks.iter().enumerate() {
        if i > 0 {
            thread::sleep(reply.inter_chunk_delay);
        }
        let event = json!({"choices": [{"index": 0, "delta": {"content": chunk}, "finish_reason": null}]});
        write_event(&mut out, &event.to_string())?;
    }
    write_event(
        &mut out,
        &json!({"choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}]}).to_string(),
    )?;
    if let Some((prompt, completion)) = reply.usage {
        let usage = json!({"choices": [], "usage": {
            "prompt_tokens": prompt,
            "completion_tokens": completion,
            "total_tokens": prompt + completion,
        }});
        write_event(&mut out, &usage.to_string())?;
    }
    write_event(&mut out, "[DONE]")?;
    out.write_all(b"0\r\n\r\n")?;
    out.flush()
}

fn write_event(out: &mut TcpStream, data: &str) -> io::Result<()> {
    let payload = format!("data: {data}\n\n");
    write!(out, "{:x}\r\n{}\r\n", payload.len(), payload)?;
    out.flush()
}
