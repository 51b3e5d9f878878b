//! A scriptable `/generate` endpoint for tests.
//!
//! The server answers each prompt with a caller-supplied rule, can be told to
//! fail or to "die" after a number of successful answers, and counts how many
//! times every prompt was answered so tests can detect duplicate calls.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub type Rule = Arc<dyn Fn(&str) -> String + Send + Sync>;

#[derive(Deserialize)]
struct GenerateRequest {
    inputs: String,
    parameters: Parameters,
}

#[derive(Deserialize)]
struct Parameters {
    max_new_tokens: u32,
    #[serde(default)]
    do_sample: bool,
}

#[derive(Default)]
struct Script {
    /// Answer this many upcoming requests with HTTP 500.
    fail_next: usize,
    /// Once this many 200 answers have been given, answer 503 forever.
    die_after: Option<usize>,
    delay: Duration,
    array_response: bool,
}

struct Shared {
    rule: Rule,
    script: Mutex<Script>,
    requests: AtomicUsize,
    answered: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    by_prompt: Mutex<HashMap<String, usize>>,
    last_max_new_tokens: AtomicUsize,
}

/// Running mock endpoint; shuts down when dropped.
pub struct MockJudge {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockJudge {
    /// Bind to an ephemeral localhost port and start serving.
    pub async fn start(
        rule: impl Fn(&str) -> String + Send + Sync + 'static,
    ) -> std::io::Result<Self> {
        let shared = Arc::new(Shared {
            rule: Arc::new(rule),
            script: Mutex::new(Script::default()),
            requests: AtomicUsize::new(0),
            answered: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            by_prompt: Mutex::new(HashMap::new()),
            last_max_new_tokens: AtomicUsize::new(0),
        });
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let app = Router::new()
            .route("/generate", post(generate))
            .with_state(shared.clone());
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
        Ok(Self {
            addr,
            shared,
            stop: Some(stop),
            task: Some(task),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn fail_next(&self, n: usize) {
        self.shared.script.lock().unwrap().fail_next = n;
    }

    /// Stop answering successfully once `n` more prompts have been answered.
    pub fn die_after(&self, n: usize) {
        let done = self.answered();
        self.shared.script.lock().unwrap().die_after = Some(done + n);
    }

    pub fn revive(&self) {
        self.shared.script.lock().unwrap().die_after = None;
    }

    pub fn set_delay(&self, delay: Duration) {
        self.shared.script.lock().unwrap().delay = delay;
    }

    /// Reply with `[{"generated_text": ..}]` instead of a bare object.
    pub fn set_array_response(&self, on: bool) {
        self.shared.script.lock().unwrap().array_response = on;
    }

    /// Every request received, failures included.
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Requests answered with HTTP 200.
    pub fn answered(&self) -> usize {
        self.shared.answered.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn last_max_new_tokens(&self) -> usize {
        self.shared.last_max_new_tokens.load(Ordering::SeqCst)
    }

    /// Distinct prompts answered with HTTP 200.
    pub fn unique_prompts(&self) -> usize {
        self.shared.by_prompt.lock().unwrap().len()
    }

    /// Prompts answered with HTTP 200 more than once.
    pub fn duplicate_prompts(&self) -> usize {
        self.shared
            .by_prompt
            .lock()
            .unwrap()
            .values()
            .filter(|&&n| n > 1)
            .count()
    }

    /// Stop the server and wait for it to exit.
    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockJudge {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

struct InFlight<'a>(&'a Shared);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn generate(State(shared): State<Arc<Shared>>, body: axum::body::Bytes) -> Response {
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let _guard = InFlight(&shared);

    let request: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    };
    if request.parameters.do_sample {
        return (StatusCode::UNPROCESSABLE_ENTITY, "sampling is not allowed").into_response();
    }
    shared
        .last_max_new_tokens
        .store(request.parameters.max_new_tokens as usize, Ordering::SeqCst);

    let (delay, array) = {
        let mut script = shared.script.lock().unwrap();
        if script.fail_next > 0 {
            script.fail_next -= 1;
            return StatusCode::INTERNAL_SERVER_ERROR.into_response();
        }
        (script.delay, script.array_response)
    };
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let text = (shared.rule)(&request.inputs);
    {
        // decide and count under one lock so "die after n" is exact
        let script = shared.script.lock().unwrap();
        if let Some(limit) = script.die_after {
            if shared.answered.load(Ordering::SeqCst) >= limit {
                return StatusCode::SERVICE_UNAVAILABLE.into_response();
            }
        }
        shared.answered.fetch_add(1, Ordering::SeqCst);
        *shared
            .by_prompt
            .lock()
            .unwrap()
            .entry(request.inputs)
            .or_insert(0) += 1;
    }
    if array {
        Json(json!([{ "generated_text": text }])).into_response()
    } else {
        Json(json!({ "generated_text": text })).into_response()
    }
}
