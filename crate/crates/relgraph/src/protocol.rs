//! Wire messages of the session service. Field-by-field documentation is in
//! `protocol.md` at the repository root.

use relgraph_core::engine::Notice;
use relgraph_core::ids::{NodeId, ProposalId};
use relgraph_core::interaction::EventKind;
use relgraph_core::schema::RelationType;
use relgraph_core::state::{Delta, SessionState};
use serde::{Deserialize, Serialize};

/// An interaction event as a client sends it. The server assigns `seq`;
/// `time` defaults to the session clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Open {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<String>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        preload: bool,
    },
    Attach {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
    },
    Event {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
        event: ClientEvent,
    },
    Snapshot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
    },
    Close {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
    },
}

impl ClientMessage {
    pub fn req(&self) -> Option<u64> {
        match self {
            ClientMessage::Open { req, .. }
            | ClientMessage::Attach { req, .. }
            | ClientMessage::Event { req, .. }
            | ClientMessage::Snapshot { req, .. }
            | ClientMessage::Close { req, .. } => *req,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or not a known message or event shape.
    BadRequest,
    UnknownSession,
    /// `max_sessions` sessions are already open.
    Capacity,
    /// The scenario named in `open` could not be loaded.
    Scenario,
    /// The engine refused the event. Its seq is still used up.
    Rejected,
    /// The connection fell more than `buffer_limit` messages behind.
    SlowConsumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Opened {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
        snapshot: SessionState,
    },
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
        seq: u64,
    },
    Snapshot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
        state: SessionState,
    },
    Delta {
        session: String,
        delta: Delta,
    },
    NeedsDisambiguation {
        session: String,
        proposal: ProposalId,
        candidates: Vec<RelationType>,
        prompt: String,
        endpoints: Vec<NodeId>,
    },
    Clarification {
        session: String,
        text: String,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        code: ErrorCode,
        text: String,
    },
    Closed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        req: Option<u64>,
        session: String,
    },
}

impl ServerMessage {
    pub fn error(req: Option<u64>, code: ErrorCode, text: impl Into<String>) -> Self {
        ServerMessage::Error { req, session: None, seq: None, code, text: text.into() }
    }

    pub fn from_notice(session: &str, notice: Notice) -> Self {
        match notice {
            Notice::NeedsDisambiguation { proposal, candidates, prompt, endpoints } => {
                ServerMessage::NeedsDisambiguation {
                    session: session.to_string(),
                    proposal,
                    candidates,
                    prompt,
                    endpoints,
                }
            }
            Notice::Clarification { text } => ServerMessage::Clarification { session: session.to_string(), text },
        }
    }
}

/// Parses one client frame. The error text is meant for a `bad_request`
/// reply.
pub fn parse_client(text: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}
