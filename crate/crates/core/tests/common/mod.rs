//! In-process OpenAI-compatible mock server with per-prompt scripted
//! behaviour, request counters and a concurrency high-water mark.
#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub enum Behavior {
    Fixed(String),
    /// Answers `tokens[i % len]` on the i-th request for the prompt; only
    /// `tokens[0]` once the server is collapsed.
    Cycle(Vec<String>),
    Empty,
    Status(u16),
    NoChoices,
    /// Answers 503 for the first `failures` requests, then `token`.
    FailThen { failures: u64, token: String },
}

pub fn cycle(tokens: &[&str]) -> Behavior {
    Behavior::Cycle(tokens.iter().map(|s| s.to_string()).collect())
}

pub fn fixed(token: &str) -> Behavior {
    Behavior::Fixed(token.to_string())
}

pub struct MockState {
    behaviors: Mutex<HashMap<String, Behavior>>,
    default: Behavior,
    collapsed: AtomicBool,
    counters: Mutex<HashMap<String, u64>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    total: AtomicU64,
    delay: Duration,
    prompt_tokens: u64,
    bodies: Mutex<Vec<Vec<u8>>>,
    auth: Mutex<Vec<Option<String>>>,
}

impl MockState {
    pub fn new() -> Self {
        Self {
            behaviors: Mutex::new(HashMap::new()),
            default: fixed("x"),
            collapsed: AtomicBool::new(false),
            counters: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            total: AtomicU64::new(0),
            delay: Duration::ZERO,
            prompt_tokens: 3,
            bodies: Mutex::new(Vec::new()),
            auth: Mutex::new(Vec::new()),
        }
    }

    pub fn with(self, prompt: &str, behavior: Behavior) -> Self {
        self.behaviors.lock().unwrap().insert(prompt.to_string(), behavior);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_prompt_tokens(mut self, n: u64) -> Self {
        self.prompt_tokens = n;
        self
    }

    pub fn collapse(&self) {
        self.collapsed.store(true, Ordering::SeqCst);
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn total_requests(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn requests_for(&self, prompt: &str) -> u64 {
        self.counters.lock().unwrap().get(prompt).copied().unwrap_or(0)
    }

    pub fn bodies(&self) -> Vec<Vec<u8>> {
        self.bodies.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.auth.lock().unwrap().clone()
    }
}

struct InFlight<'a>(&'a MockState);

impl<'a> InFlight<'a> {
    fn enter(state: &'a MockState) -> Self {
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(state)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn completion(content: &str, prompt_tokens: u64) -> Response {
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "length"
        }],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": 1, "total_tokens": prompt_tokens + 1}
    }))
    .into_response()
}

async fn handle(State(st): State<Arc<MockState>>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = InFlight::enter(&st);
    st.total.fetch_add(1, Ordering::SeqCst);
    st.bodies.lock().unwrap().push(body.to_vec());
    st.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned),
    );
    if !st.delay.is_zero() {
        tokio::time::sleep(st.delay).await;
    }
    let Ok(v) = serde_json::from_slice::<Value>(&body) else {
        return (StatusCode::BAD_REQUEST, "bad json").into_response();
    };
    let prompt = v["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    let n = {
        let mut c = st.counters.lock().unwrap();
        let e = c.entry(prompt.clone()).or_insert(0);
        *e += 1;
        *e - 1
    };
    let behavior = st
        .behaviors
        .lock()
        .unwrap()
        .get(&prompt)
        .cloned()
        .unwrap_or_else(|| st.default.clone());
    match behavior {
        Behavior::Fixed(t) => completion(&t, st.prompt_tokens),
        Behavior::Cycle(ts) => {
            let i = if st.collapsed.load(Ordering::SeqCst) {
                0
            } else {
                (n % ts.len() as u64) as usize
            };
            completion(&ts[i], st.prompt_tokens)
        }
        Behavior::Empty => completion("", st.prompt_tokens),
        Behavior::Status(code) => (StatusCode::from_u16(code).unwrap(), "scripted failure").into_response(),
        Behavior::NoChoices => Json(json!({"id": "mock", "choices": []})).into_response(),
        Behavior::FailThen { failures, token } => {
            if n < failures {
                (StatusCode::SERVICE_UNAVAILABLE, "try later").into_response()
            } else {
                completion(&token, st.prompt_tokens)
            }
        }
    }
}

/// Runs on its own thread and runtime so blocking clients can be used from
/// the test thread.
pub struct MockServer {
    pub addr: SocketAddr,
    pub state: Arc<MockState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(state: MockState) -> Self {
        let state = Arc::new(state);
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let shared = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let app = Router::new()
                    .route("/v1/chat/completions", post(handle))
                    .with_state(shared);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self {
            addr,
            state,
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
