//! Asynchronous reasoners and the loop that feeds their answers back into
//! an engine under a per-attempt deadline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use relgraph_core::engine::{Engine, Step};
use relgraph_core::ids::RequestId;
use relgraph_core::inference::{Reasoner, ReasonerOutcome, ReasonerRequest};
use relgraph_core::mock::{KnowledgeBase, MockReasoner};
use serde_json::{json, Value};
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::prompts;

#[async_trait]
pub trait AsyncReasoner: Send + Sync {
    async fn call(&self, request: ReasonerRequest) -> ReasonerOutcome;
}

/// The knowledge-base mock behind the async interface.
pub struct MockAsync(Mutex<MockReasoner>);

impl MockAsync {
    pub fn new(kb: KnowledgeBase) -> Self {
        MockAsync(Mutex::new(MockReasoner::new(kb)))
    }
}

#[async_trait]
impl AsyncReasoner for MockAsync {
    async fn call(&self, request: ReasonerRequest) -> ReasonerOutcome {
        self.0.lock().expect("mock lock").respond(&request)
    }
}

/// Posts `{prompt, context}` to an endpoint that replies with the bare JSON
/// answer.
pub struct HttpReasoner {
    client: reqwest::Client,
    url: String,
}

impl HttpReasoner {
    pub fn new(url: impl Into<String>) -> Self {
        HttpReasoner { client: reqwest::Client::new(), url: url.into() }
    }

    pub fn body(request: &ReasonerRequest) -> Value {
        let mut context = serde_json::to_value(&request.context).expect("context serializes");
        if let relgraph_core::inference::RequestKind::Detect { image, .. } = &request.kind {
            context["image"] = json!(image);
        }
        json!({
            "kind": request.kind.name(),
            "prompt": prompts::render(request),
            "context": context,
        })
    }
}

#[async_trait]
impl AsyncReasoner for HttpReasoner {
    async fn call(&self, request: ReasonerRequest) -> ReasonerOutcome {
        let sent = self.client.post(&self.url).json(&Self::body(&request)).send().await;
        let response = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return ReasonerOutcome::Timeout,
            Err(e) => return ReasonerOutcome::Malformed(format!("transport: {e}")),
        };
        let status = response.status();
        if !status.is_success() {
            return ReasonerOutcome::Malformed(format!("http status {status}"));
        }
        match response.text().await {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(v) => ReasonerOutcome::Response(v),
                Err(e) => ReasonerOutcome::Malformed(format!("not json: {e}")),
            },
            Err(e) => ReasonerOutcome::Malformed(format!("body: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    Pass,
    /// Never answers.
    Drop,
    Delay(Duration),
    /// Answers with text that is not the expected JSON.
    Garble,
}

type FaultPlan = Box<dyn FnMut(&ReasonerRequest) -> Fault + Send>;

/// Wraps a reasoner and perturbs its calls according to a plan. Also counts
/// concurrent calls.
pub struct FaultInjector<R> {
    inner: R,
    plan: Mutex<FaultPlan>,
    active: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl<R: AsyncReasoner> FaultInjector<R> {
    pub fn new(inner: R, plan: impl FnMut(&ReasonerRequest) -> Fault + Send + 'static) -> Self {
        FaultInjector {
            inner,
            plan: Mutex::new(Box::new(plan)),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    /// Most calls that were ever running at once.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<R: AsyncReasoner> AsyncReasoner for FaultInjector<R> {
    async fn call(&self, request: ReasonerRequest) -> ReasonerOutcome {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = ActiveGuard(&self.active);
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fault = (self.plan.lock().expect("plan lock"))(&request);
        match fault {
            Fault::Pass => self.inner.call(request).await,
            Fault::Drop => std::future::pending().await,
            Fault::Delay(d) => {
                tokio::time::sleep(d).await;
                self.inner.call(request).await
            }
            Fault::Garble => match self.inner.call(request).await {
                ReasonerOutcome::Response(_) => ReasonerOutcome::Response(json!({"garbled": "{{{"})),
                _ => ReasonerOutcome::Malformed("garbled".into()),
            },
        }
    }
}

/// When each request was first sent and when its last attempt came back.
#[derive(Debug, Clone, Default)]
pub struct DispatchLog {
    pub requests: BTreeMap<RequestId, Dispatch>,
    /// Most requests that were out at once.
    pub peak_in_flight: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Dispatch {
    pub first_sent: Instant,
    pub last_answered: Option<Instant>,
    pub attempts: u32,
}

impl DispatchLog {
    /// Longest time from first dispatch to final answer.
    pub fn worst_latency(&self) -> Duration {
        self.requests
            .values()
            .filter_map(|d| d.last_answered.map(|t| t - d.first_sent))
            .max()
            .unwrap_or_default()
    }

    pub fn unresolved(&self) -> usize {
        self.requests.values().filter(|d| d.last_answered.is_none()).count()
    }
}

/// Sends queued requests, at most the engine's in-flight bound at a time,
/// and delivers their outcomes until nothing is left. An attempt that takes
/// longer than `timeout` is delivered as a timeout.
pub async fn settle(
    engine: &mut Engine,
    reasoner: &Arc<dyn AsyncReasoner>,
    timeout: Duration,
    log: &mut DispatchLog,
) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut running: JoinSet<(RequestId, u32, ReasonerOutcome)> = JoinSet::new();
    loop {
        while let Some(request) = engine.poll_request() {
            spawn_request(&mut running, reasoner, request, timeout, log);
        }
        log.peak_in_flight = log.peak_in_flight.max(running.len());
        let Some(joined) = running.join_next().await else { break };
        let (id, attempt, outcome) = joined.expect("reasoner task panicked");
        if let Some(d) = log.requests.get_mut(&id) {
            d.last_answered = Some(Instant::now());
        }
        steps.push(engine.deliver(id, attempt, outcome));
    }
    steps
}

pub(crate) fn spawn_request(
    running: &mut JoinSet<(RequestId, u32, ReasonerOutcome)>,
    reasoner: &Arc<dyn AsyncReasoner>,
    request: ReasonerRequest,
    timeout: Duration,
    log: &mut DispatchLog,
) {
    let (id, attempt) = (request.id, request.attempt);
    let entry = log.requests.entry(id).or_insert(Dispatch {
        first_sent: Instant::now(),
        last_answered: None,
        attempts: 0,
    });
    entry.attempts = entry.attempts.max(attempt);
    let reasoner = Arc::clone(reasoner);
    running.spawn(async move {
        let outcome = tokio::time::timeout(timeout, reasoner.call(request))
            .await
            .unwrap_or(ReasonerOutcome::Timeout);
        (id, attempt, outcome)
    });
}

/// Timeout from the engine configuration.
pub fn attempt_timeout(engine: &Engine) -> Duration {
    Duration::from_secs_f64(engine.config().inference.timeout_secs.max(0.0))
}

/// Replay settle step backed by an async reasoner on its own runtime.
pub struct AsyncSettle {
    runtime: tokio::runtime::Runtime,
    reasoner: Arc<dyn AsyncReasoner>,
    pub log: DispatchLog,
}

impl AsyncSettle {
    pub fn new(reasoner: Arc<dyn AsyncReasoner>) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        Ok(AsyncSettle { runtime, reasoner, log: DispatchLog::default() })
    }
}

impl crate::replay::Settle for AsyncSettle {
    fn settle(&mut self, engine: &mut Engine) -> Vec<Step> {
        let timeout = attempt_timeout(engine);
        self.runtime.block_on(settle(engine, &self.reasoner, timeout, &mut self.log))
    }
}
