//! Live session service.
//!
//! Each session is an actor task that owns an engine, applies events in
//! arrival order with server-assigned seqs, runs reasoner requests
//! concurrently and broadcasts what changed. Connections speak the
//! messages in [`crate::protocol`] over length-delimited TCP frames or
//! websocket text frames; `GET /sessions/{id}/snapshot` serves snapshots.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::stream::SelectAll;
use futures::{Sink, SinkExt, Stream, StreamExt};
use relgraph_core::engine::{Engine, EngineConfig, Step};
use relgraph_core::geometry::SceneMesh;
use relgraph_core::ids::RequestId;
use relgraph_core::inference::ReasonerOutcome;
use relgraph_core::interaction::InteractionEvent;
use relgraph_core::mock::KnowledgeBase;
use relgraph_core::state::SessionState;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::Instant;
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use crate::config::{ReasonerMode, ServiceConfig};
use crate::driver::{spawn_request, AsyncReasoner, DispatchLog, HttpReasoner, MockAsync};
use crate::protocol::{parse_client, ClientEvent, ClientMessage, ErrorCode, ServerMessage};
use crate::scenario::{self, Scenario};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub text: String,
    /// Seq consumed by a rejected event.
    pub seq: Option<u64>,
}

impl ServiceError {
    fn new(code: ErrorCode, text: impl Into<String>) -> Self {
        ServiceError { code, text: text.into(), seq: None }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.text)
    }
}

impl std::error::Error for ServiceError {}

enum Command {
    Event { event: ClientEvent, reply: oneshot::Sender<Result<u64, ServiceError>> },
    Snapshot { reply: oneshot::Sender<SessionState> },
    Attach { reply: oneshot::Sender<(SessionState, broadcast::Receiver<ServerMessage>)> },
    Close { reply: oneshot::Sender<()> },
}

#[derive(Clone)]
struct SessionHandle {
    tx: mpsc::Sender<Command>,
}

/// A subscription to one session's broadcast messages.
pub struct Subscription {
    pub session: String,
    pub snapshot: SessionState,
    pub receiver: broadcast::Receiver<ServerMessage>,
}

/// Registry of open sessions.
pub struct Hub {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    next_id: AtomicU64,
    http: Option<Arc<dyn AsyncReasoner>>,
}

impl Hub {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let http = (config.reasoner == ReasonerMode::Http)
            .then(|| Arc::new(HttpReasoner::new(config.http_reasoner_url.clone())) as Arc<dyn AsyncReasoner>);
        Arc::new(Hub { config, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1), http })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn handle(&self, session: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(session)
            .cloned()
            .ok_or_else(|| ServiceError::new(ErrorCode::UnknownSession, format!("no session {session:?}")))
    }

    fn load_scenario(&self, name: &str) -> Result<Scenario, ServiceError> {
        let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok {
            return Err(ServiceError::new(ErrorCode::Scenario, format!("bad scenario name {name:?}")));
        }
        let path = self.config.scenario_dir.join(format!("{name}.json"));
        scenario::load(&path).map_err(|d| ServiceError::new(ErrorCode::Scenario, d.to_string()))
    }

    /// Opens a session, optionally seeded from a named scenario, and
    /// subscribes the caller to it.
    pub async fn open(&self, scenario: Option<&str>, preload: bool) -> Result<Subscription, ServiceError> {
        let loaded = scenario.map(|n| self.load_scenario(n)).transpose()?;
        let (mut config, mesh, camera, kb, trace) = match loaded {
            Some(s) => (s.config, s.mesh, Some(s.camera), s.kb, if preload { s.trace } else { Vec::new() }),
            None => (EngineConfig::default(), SceneMesh::empty(), None, KnowledgeBase::default(), Vec::new()),
        };
        if let Some(t) = self.config.timeout_secs {
            config.inference.timeout_secs = t;
        }
        if let Some(n) = self.config.max_in_flight {
            config.inference.max_in_flight = n;
        }
        let reasoner = match &self.http {
            Some(r) => Arc::clone(r),
            None => Arc::new(MockAsync::new(kb)) as Arc<dyn AsyncReasoner>,
        };
        let id = {
            let mut sessions = self.sessions.lock().expect("session map");
            if sessions.len() >= self.config.max_sessions {
                return Err(ServiceError::new(
                    ErrorCode::Capacity,
                    format!("{} sessions already open", sessions.len()),
                ));
            }
            let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            let (tx, rx) = mpsc::channel(64);
            let (events, _) = broadcast::channel(self.config.buffer_limit);
            let actor = Actor {
                session: id.clone(),
                engine: Engine::new(config, mesh, camera),
                reasoner,
                events,
                next_seq: 1,
                started: Instant::now(),
                running: JoinSet::new(),
                log: DispatchLog::default(),
            };
            tokio::spawn(actor.run(rx, trace));
            sessions.insert(id.clone(), SessionHandle { tx });
            id
        };
        self.attach(&id).await
    }

    /// Snapshot plus a receiver for every later message, taken atomically.
    pub async fn attach(&self, session: &str) -> Result<Subscription, ServiceError> {
        let h = self.handle(session)?;
        let (reply, rx) = oneshot::channel();
        let gone = || ServiceError::new(ErrorCode::UnknownSession, format!("session {session:?} closed"));
        h.tx.send(Command::Attach { reply }).await.map_err(|_| gone())?;
        let (snapshot, receiver) = rx.await.map_err(|_| gone())?;
        Ok(Subscription { session: session.to_string(), snapshot, receiver })
    }

    /// Enqueues an event; returns the seq it was applied under.
    pub async fn submit(&self, session: &str, event: ClientEvent) -> Result<u64, ServiceError> {
        let h = self.handle(session)?;
        let (reply, rx) = oneshot::channel();
        let gone = || ServiceError::new(ErrorCode::UnknownSession, format!("session {session:?} closed"));
        h.tx.send(Command::Event { event, reply }).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    pub async fn snapshot(&self, session: &str) -> Result<SessionState, ServiceError> {
        let h = self.handle(session)?;
        let (reply, rx) = oneshot::channel();
        let gone = || ServiceError::new(ErrorCode::UnknownSession, format!("session {session:?} closed"));
        h.tx.send(Command::Snapshot { reply }).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }

    pub async fn close(&self, session: &str) -> Result<(), ServiceError> {
        let h = self.sessions.lock().expect("session map").remove(session);
        let h = h.ok_or_else(|| ServiceError::new(ErrorCode::UnknownSession, format!("no session {session:?}")))?;
        let (reply, rx) = oneshot::channel();
        if h.tx.send(Command::Close { reply }).await.is_ok() {
            let _ = rx.await;
        }
        Ok(())
    }
}

struct Actor {
    session: String,
    engine: Engine,
    reasoner: Arc<dyn AsyncReasoner>,
    events: broadcast::Sender<ServerMessage>,
    next_seq: u64,
    started: Instant,
    running: JoinSet<(RequestId, u32, ReasonerOutcome)>,
    log: DispatchLog,
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::Receiver<Command>, preload: Vec<InteractionEvent>) {
        for ev in preload {
            let event = ClientEvent { time: Some(ev.time), kind: ev.kind };
            if let Err(e) = self.apply(event) {
                tracing::debug!(session = %self.session, "preload event rejected: {}", e.text);
            }
        }
        self.dispatch();
        loop {
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    None => break,
                    Some(Command::Event { event, reply }) => {
                        let _ = reply.send(self.apply(event));
                    }
                    Some(Command::Snapshot { reply }) => {
                        let _ = reply.send(self.engine.snapshot().clone());
                    }
                    Some(Command::Attach { reply }) => {
                        let _ = reply.send((self.engine.snapshot().clone(), self.events.subscribe()));
                    }
                    Some(Command::Close { reply }) => {
                        self.running.abort_all();
                        let step = self.engine.cancel_pending();
                        self.publish(step);
                        let _ = self.events.send(ServerMessage::Closed { req: None, session: self.session.clone() });
                        let _ = reply.send(());
                        break;
                    }
                },
                Some(joined) = self.running.join_next(), if !self.running.is_empty() => {
                    if let Ok((id, attempt, outcome)) = joined {
                        let step = self.engine.deliver(id, attempt, outcome);
                        self.publish(step);
                    }
                }
            }
            self.dispatch();
        }
    }

    fn clock(&self) -> f64 {
        self.started.elapsed().as_secs_f64().max(self.engine.now())
    }

    fn apply(&mut self, event: ClientEvent) -> Result<u64, ServiceError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let time = event.time.unwrap_or_else(|| self.clock());
        match self.engine.apply(&InteractionEvent { seq, time, kind: event.kind }) {
            Ok(step) => {
                self.publish(step);
                Ok(seq)
            }
            Err(e) => Err(ServiceError { code: ErrorCode::Rejected, text: e.to_string(), seq: Some(seq) }),
        }
    }

    fn dispatch(&mut self) {
        let timeout = crate::driver::attempt_timeout(&self.engine);
        while let Some(request) = self.engine.poll_request() {
            spawn_request(&mut self.running, &self.reasoner, request, timeout, &mut self.log);
        }
    }

    fn publish(&mut self, step: Step) {
        for d in &step.diagnostics {
            tracing::debug!(session = %self.session, "{d}");
        }
        if let Some(delta) = step.delta {
            let _ = self.events.send(ServerMessage::Delta { session: self.session.clone(), delta });
        }
        for n in step.notices {
            let _ = self.events.send(ServerMessage::from_notice(&self.session, n));
        }
    }
}

/// Incoming frame from a transport.
pub enum Frame {
    Text(String),
    /// A frame that could not be read as UTF-8 text.
    Invalid(String),
}

async fn handle_message(
    hub: &Hub,
    msg: ClientMessage,
    subs: &mut SelectAll<SubStream>,
) -> ServerMessage {
    let req = msg.req();
    let err = |e: ServiceError, session: Option<String>| ServerMessage::Error {
        req,
        session,
        seq: e.seq,
        code: e.code,
        text: e.text,
    };
    match msg {
        ClientMessage::Open { scenario, preload, .. } => match hub.open(scenario.as_deref(), preload).await {
            Ok(sub) => {
                let reply = ServerMessage::Opened { req, session: sub.session.clone(), snapshot: sub.snapshot };
                subs.push(sub_stream(sub.session, sub.receiver));
                reply
            }
            Err(e) => err(e, None),
        },
        ClientMessage::Attach { session, .. } => match hub.attach(&session).await {
            Ok(sub) => {
                let reply = ServerMessage::Snapshot { req, session: sub.session.clone(), state: sub.snapshot };
                subs.push(sub_stream(sub.session, sub.receiver));
                reply
            }
            Err(e) => err(e, Some(session)),
        },
        ClientMessage::Event { session, event, .. } => match hub.submit(&session, event).await {
            Ok(seq) => ServerMessage::Ack { req, session, seq },
            Err(e) => err(e, Some(session)),
        },
        ClientMessage::Snapshot { session, .. } => match hub.snapshot(&session).await {
            Ok(state) => ServerMessage::Snapshot { req, session, state },
            Err(e) => err(e, Some(session)),
        },
        ClientMessage::Close { session, .. } => match hub.close(&session).await {
            Ok(()) => ServerMessage::Closed { req, session },
            Err(e) => err(e, Some(session)),
        },
    }
}

type SubStream = std::pin::Pin<Box<dyn Stream<Item = Result<ServerMessage, String>> + Send>>;

fn sub_stream(session: String, receiver: broadcast::Receiver<ServerMessage>) -> SubStream {
    Box::pin(BroadcastStream::new(receiver).map(move |item| match item {
        Ok(m) => Ok(m),
        Err(BroadcastStreamRecvError::Lagged(n)) => Err(format!("session {session}: fell {n} messages behind")),
    }))
}

fn encode(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("server messages serialize")
}

/// Serves one client connection until it closes, errors or falls behind.
pub async fn serve_connection<I, O>(hub: Arc<Hub>, mut incoming: I, mut outgoing: O)
where
    I: Stream<Item = Frame> + Unpin,
    O: Sink<String> + Unpin,
{
    let mut subs: SelectAll<SubStream> = SelectAll::new();
    loop {
        tokio::select! {
            frame = incoming.next() => {
                let reply = match frame {
                    None => break,
                    Some(Frame::Invalid(why)) => ServerMessage::error(None, ErrorCode::BadRequest, why),
                    Some(Frame::Text(text)) => match parse_client(&text) {
                        Ok(msg) => handle_message(&hub, msg, &mut subs).await,
                        Err(why) => ServerMessage::error(None, ErrorCode::BadRequest, why),
                    },
                };
                if outgoing.send(encode(&reply)).await.is_err() {
                    break;
                }
            }
            Some(item) = subs.next(), if !subs.is_empty() => match item {
                Ok(msg) => {
                    if outgoing.send(encode(&msg)).await.is_err() {
                        break;
                    }
                }
                Err(why) => {
                    let msg = ServerMessage::error(None, ErrorCode::SlowConsumer, why);
                    let _ = tokio::time::timeout(Duration::from_secs(1), outgoing.send(encode(&msg))).await;
                    break;
                }
            },
        }
    }
}

/// Length-delimited framing over any byte stream: 4-byte big-endian length,
/// then UTF-8 JSON.
pub async fn serve_stream<T>(hub: Arc<Hub>, io: T)
where
    T: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let codec = LengthDelimitedCodec::builder().max_frame_length(hub.config.max_frame_bytes).new_codec();
    let (sink, stream) = Framed::new(io, codec).split();
    let incoming = stream
        .take_while(|r| futures::future::ready(r.is_ok()))
        .map(|r| {
            let bytes = r.expect("filtered above");
            match String::from_utf8(bytes.to_vec()) {
                Ok(s) => Frame::Text(s),
                Err(e) => Frame::Invalid(format!("frame is not UTF-8: {e}")),
            }
        });
    let outgoing = sink.with(|s: String| futures::future::ready(Ok::<_, std::io::Error>(bytes::Bytes::from(s))));
    serve_connection(hub, Box::pin(incoming), Box::pin(outgoing)).await;
}

pub async fn serve_tcp(hub: Arc<Hub>, listener: TcpListener) -> std::io::Result<()> {
    loop {
        let (socket, peer) = listener.accept().await?;
        tracing::info!(%peer, "connection");
        let _ = socket.set_nodelay(true);
        tokio::spawn(serve_stream(Arc::clone(&hub), socket));
    }
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions/:id/snapshot", get(snapshot_endpoint))
        .route("/ws", get(ws_endpoint))
        .with_state(hub)
}

async fn snapshot_endpoint(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Response {
    match hub.snapshot(&id).await {
        Ok(state) => Json(state).into_response(),
        Err(e) => {
            let body = ServerMessage::Error { req: None, session: Some(id), seq: None, code: e.code, text: e.text };
            (StatusCode::NOT_FOUND, Json(body)).into_response()
        }
    }
}

async fn ws_endpoint(State(hub): State<Arc<Hub>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| serve_websocket(hub, socket))
}

async fn serve_websocket(hub: Arc<Hub>, socket: WebSocket) {
    let (sink, stream) = socket.split();
    let incoming = stream
        .take_while(|m| futures::future::ready(matches!(m, Ok(m) if !matches!(m, Message::Close(_)))))
        .filter_map(|m| {
            futures::future::ready(match m {
                Ok(Message::Text(t)) => Some(Frame::Text(t)),
                Ok(Message::Binary(b)) => Some(match String::from_utf8(b) {
                    Ok(s) => Frame::Text(s),
                    Err(e) => Frame::Invalid(format!("frame is not UTF-8: {e}")),
                }),
                _ => None,
            })
        });
    let outgoing = sink.with(|s: String| futures::future::ready(Ok::<_, axum::Error>(Message::Text(s))));
    serve_connection(hub, Box::pin(incoming), Box::pin(outgoing)).await;
}

/// Binds both listeners and serves until an error.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let tcp = TcpListener::bind(config.listen).await?;
    let http = TcpListener::bind(config.http_listen).await?;
    let (tcp_addr, http_addr): (SocketAddr, SocketAddr) = (tcp.local_addr()?, http.local_addr()?);
    tracing::info!(%tcp_addr, %http_addr, "serving");
    let hub = Hub::new(config);
    let app = router(Arc::clone(&hub));
    tokio::select! {
        r = serve_tcp(hub, tcp) => r?,
        r = axum::serve(http, app) => r?,
    }
    Ok(())
}
