//! Relation inference: request shapes, routing, and the bookkeeping for
//! outstanding reasoner calls.
//!
//! The engine never waits on a reasoner. It queues [`ReasonerRequest`]s,
//! the host drains them with `poll_request`, and results come back as
//! [`ReasonerOutcome`]s. The synchronous helpers at the bottom of this
//! module run the same steps against a blocking [`Reasoner`].

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::{CameraFrame, Vec3};
use crate::graph::{EdgeState, Initiative};
use crate::ids::{EdgeId, NodeId, ProposalId, RequestId};
use crate::interaction::{singular, tokenize};
use crate::registry::Detection2D;
use crate::schema::{
    parse_detection, parse_payload, parse_type_selection, parse_voice_plan, RelationPayload,
    RelationType, SchemaError, TypeSelection, VoicePlan,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Confidence gap below which the runner-up is offered to the user.
    pub ambiguity_margin: f64,
    /// Initial attempt plus retries.
    pub max_attempts: u32,
    /// Requests handed out and not yet answered.
    pub max_in_flight: usize,
    /// Seconds a disambiguation prompt stays open.
    pub prompt_ttl: f64,
    pub held_pair_confidence: f64,
    /// Per-attempt reasoner deadline in seconds, enforced by the host.
    pub timeout_secs: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            ambiguity_margin: 0.15,
            max_attempts: 3,
            max_in_flight: 4,
            prompt_ttl: 10.0,
            held_pair_confidence: 0.95,
            timeout_secs: 8.0,
        }
    }
}

/// What the reasoner sees of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNode {
    pub id: NodeId,
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub position: Vec3,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReasonerContext {
    pub nodes: Vec<ContextNode>,
    pub selection_order: Vec<NodeId>,
    /// Nodes the utterance refers to, in resolution order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentioned: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
}

impl ReasonerContext {
    pub fn ids(&self) -> BTreeSet<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn node(&self, id: NodeId) -> Option<&ContextNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestKind {
    Detect { image: String, frame: CameraFrame },
    Classify,
    Extract { relation: RelationType },
    PlanVoice,
}

impl RequestKind {
    pub fn name(&self) -> &'static str {
        match self {
            RequestKind::Detect { .. } => "detect",
            RequestKind::Classify => "classify",
            RequestKind::Extract { .. } => "extract",
            RequestKind::PlanVoice => "plan_voice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub id: RequestId,
    /// 1 for the first try.
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<ProposalId>,
    #[serde(flatten)]
    pub kind: RequestKind,
    pub context: ReasonerContext,
    pub context_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReasonerOutcome {
    Response(Value),
    /// The reply could not be read as JSON at all.
    Malformed(String),
    Timeout,
    /// The reasoner has no answer; retrying will not help.
    Declined,
}

/// Blocking reasoner used by the synchronous helpers and by replay.
pub trait Reasoner {
    fn respond(&mut self, request: &ReasonerRequest) -> ReasonerOutcome;
}

impl<R: Reasoner + ?Sized> Reasoner for &mut R {
    fn respond(&mut self, request: &ReasonerRequest) -> ReasonerOutcome {
        (**self).respond(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Selection,
    Voice,
    TransientPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Pending,
    NeedsDisambiguation,
    Committed,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum DropReason {
    Stale,
    RetriesExhausted(String),
    Declined,
    Rejected,
    Expired,
    UnresolvedNode(NodeId),
    Commit(String),
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationProposal {
    pub id: ProposalId,
    pub trigger: Trigger,
    pub endpoints: Vec<NodeId>,
    pub initiative: Initiative,
    pub edge_state: EdgeState,
    pub selection: Option<TypeSelection>,
    pub candidates: Vec<RelationType>,
    pub prompt: Option<String>,
    pub payload: Option<RelationPayload>,
    pub disposition: Disposition,
    pub context_epoch: u64,
    pub issued_at: f64,
    pub edge: Option<EdgeId>,
    pub dropped: Option<DropReason>,
}

/// Router result after ambiguity handling.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    Single(TypeSelection),
    NeedsDisambiguation { candidates: Vec<RelationType>, prompt: String },
}

/// Two held items go straight to comparison.
pub fn held_pair_rule(context: &ReasonerContext, config: &InferenceConfig) -> Option<TypeSelection> {
    (context.nodes.len() == 2 && context.nodes.iter().all(|n| n.held)).then(|| TypeSelection {
        chosen: RelationType::Comparison,
        confidence: config.held_pair_confidence,
        reason: String::from("both items are in hand"),
        alternate: None,
    })
}

/// Applies the ambiguity margin to a router answer.
pub fn interpret_selection(
    selection: TypeSelection,
    context: &ReasonerContext,
    config: &InferenceConfig,
) -> Routing {
    match selection.alternate {
        Some(alt) if (selection.confidence - alt.confidence).abs() < config.ambiguity_margin => {
            let candidates = alloc::vec![selection.chosen, alt.relation];
            let prompt = disambiguation_prompt(&candidates, context);
            Routing::NeedsDisambiguation { candidates, prompt }
        }
        _ => Routing::Single(selection),
    }
}

fn plural(word: &str) -> String {
    if word.ends_with('s') || word.ends_with('x') || word.ends_with("ch") || word.ends_with("sh") {
        format!("{word}es")
    } else if word.ends_with('y') && !word.ends_with("ay") && !word.ends_with("ey") && !word.ends_with("oy") {
        format!("{}ies", &word[..word.len() - 1])
    } else {
        format!("{word}s")
    }
}

/// Leading verb phrase and trailing alternative for each relation.
fn phrases(relation: RelationType) -> (&'static str, &'static str) {
    match relation {
        RelationType::Spatial => ("Locate", "show where they are"),
        RelationType::Structural => ("Show how to assemble", "show how they fit together"),
        RelationType::Similarity => ("Find what is shared by", "show what they share"),
        RelationType::Comparison => ("Compare", "compare them"),
        RelationType::Affordance => ("Show how to use", "show how to use one on the other"),
        RelationType::Compatibility => ("Check compatibility of", "show compatibility"),
        RelationType::Procedural => ("Show the steps for", "show the steps"),
        RelationType::Causality => ("Show what happens with", "show what happens"),
    }
}

/// One-line question offering the candidate relations, e.g.
/// "Compare these two chargers, or show compatibility?".
pub fn disambiguation_prompt(candidates: &[RelationType], context: &ReasonerContext) -> String {
    let heads: BTreeSet<String> = context
        .nodes
        .iter()
        .filter_map(|n| tokenize(&n.label).last().map(|w| singular(w)))
        .collect();
    let count = match context.nodes.len() {
        2 => String::from("two"),
        3 => String::from("three"),
        n => format!("{n}"),
    };
    let noun = match heads.len() {
        1 => plural(heads.iter().next().expect("one element")),
        _ => String::from("items"),
    };
    let Some((first, rest)) = candidates.split_first() else {
        return String::new();
    };
    let mut text = format!("{} these {count} {noun}", phrases(*first).0);
    for (i, c) in rest.iter().enumerate() {
        text.push_str(if i + 1 == rest.len() { ", or " } else { ", " });
        text.push_str(phrases(*c).1);
    }
    text.push('?');
    text
}

/// Interprets a detection response. Invalid entries are skipped and
/// reported; a reply that is not an array is a schema failure.
pub fn interpret_detections(
    value: &Value,
    frame: &CameraFrame,
    crop_prefix: &str,
) -> Result<(Vec<Detection2D>, Vec<SchemaError>), SchemaError> {
    let items = value
        .as_array()
        .ok_or_else(|| SchemaError::Malformed(String::from("detections must be an array")))?;
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match parse_detection(item, frame, format!("{crop_prefix}#{i}")) {
            Ok(d) => good.push(d),
            Err(e) => bad.push(e),
        }
    }
    Ok((good, bad))
}

/// Queue of requests waiting to be handed out plus the set handed out.
#[derive(Debug, Clone, Default)]
pub struct RequestQueue {
    max_in_flight: usize,
    max_attempts: u32,
    next_id: u32,
    queued: VecDeque<RequestId>,
    in_flight: BTreeSet<RequestId>,
    requests: BTreeMap<RequestId, ReasonerRequest>,
}

impl RequestQueue {
    pub fn new(config: &InferenceConfig) -> Self {
        RequestQueue {
            max_in_flight: config.max_in_flight.max(1),
            max_attempts: config.max_attempts.max(1),
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn issue(
        &mut self,
        proposal: Option<ProposalId>,
        kind: RequestKind,
        context: ReasonerContext,
        context_epoch: u64,
    ) -> RequestId {
        let id = RequestId(self.next_id);
        self.next_id += 1;
        self.requests
            .insert(id, ReasonerRequest { id, attempt: 1, proposal, kind, context, context_epoch });
        self.queued.push_back(id);
        id
    }

    /// Next request to send, if the in-flight bound allows one.
    pub fn poll(&mut self) -> Option<ReasonerRequest> {
        if self.in_flight.len() >= self.max_in_flight {
            return None;
        }
        let id = self.queued.pop_front()?;
        self.in_flight.insert(id);
        self.requests.get(&id).cloned()
    }

    /// Takes an answered request out of flight. Answers for unknown
    /// requests or superseded attempts return `None`.
    pub fn complete(&mut self, id: RequestId, attempt: u32) -> Option<ReasonerRequest> {
        let current = self.requests.get(&id)?;
        if current.attempt != attempt || !self.in_flight.contains(&id) {
            return None;
        }
        self.in_flight.remove(&id);
        self.requests.remove(&id)
    }

    /// Requeues `request` at the front with the next attempt number, or
    /// returns it back if the attempt budget is spent.
    #[allow(clippy::result_large_err)]
    pub fn retry(&mut self, mut request: ReasonerRequest) -> Result<(), ReasonerRequest> {
        if request.attempt >= self.max_attempts {
            return Err(request);
        }
        request.attempt += 1;
        let id = request.id;
        self.requests.insert(id, request);
        self.queued.push_front(id);
        Ok(())
    }

    /// Drops every queued and in-flight request.
    pub fn cancel_all(&mut self) -> Vec<ReasonerRequest> {
        self.queued.clear();
        self.in_flight.clear();
        core::mem::take(&mut self.requests).into_values().collect()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn queued(&self) -> usize {
        self.queued.len()
    }

    pub fn is_idle(&self) -> bool {
        self.requests.is_empty()
    }
}

/// Why a synchronous inference helper gave up.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceError {
    Declined,
    RetriesExhausted(String),
}

impl core::fmt::Display for InferenceError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            InferenceError::Declined => f.write_str("reasoner declined"),
            InferenceError::RetriesExhausted(last) => write!(f, "gave up after retries: {last}"),
        }
    }
}

fn call_with_retries<T>(
    reasoner: &mut dyn Reasoner,
    config: &InferenceConfig,
    kind: RequestKind,
    context: &ReasonerContext,
    mut interpret: impl FnMut(&Value) -> Result<T, SchemaError>,
) -> Result<T, InferenceError> {
    let mut last = String::new();
    for attempt in 1..=config.max_attempts.max(1) {
        let request = ReasonerRequest {
            id: RequestId(0),
            attempt,
            proposal: None,
            kind: kind.clone(),
            context: context.clone(),
            context_epoch: 0,
        };
        match reasoner.respond(&request) {
            ReasonerOutcome::Response(v) => match interpret(&v) {
                Ok(t) => return Ok(t),
                Err(e) => last = format!("{e}"),
            },
            ReasonerOutcome::Malformed(m) => last = m,
            ReasonerOutcome::Timeout => last = String::from("timed out"),
            ReasonerOutcome::Declined => return Err(InferenceError::Declined),
        }
    }
    Err(InferenceError::RetriesExhausted(last))
}

/// Chooses a relation type for the context nodes.
pub fn classify_intent(
    reasoner: &mut dyn Reasoner,
    context: &ReasonerContext,
    config: &InferenceConfig,
) -> Result<Routing, InferenceError> {
    if let Some(sel) = held_pair_rule(context, config) {
        return Ok(Routing::Single(sel));
    }
    let sel = call_with_retries(reasoner, config, RequestKind::Classify, context, parse_type_selection)?;
    Ok(interpret_selection(sel, context, config))
}

/// Fetches and validates the payload for one relation type.
pub fn extract(
    reasoner: &mut dyn Reasoner,
    relation: RelationType,
    context: &ReasonerContext,
    config: &InferenceConfig,
) -> Result<RelationPayload, InferenceError> {
    let ids = context.ids();
    call_with_retries(reasoner, config, RequestKind::Extract { relation }, context, |v| {
        parse_payload(relation, v, &ids)
    })
}

/// Turns a spoken request into a relation type and endpoints.
pub fn plan_voice(
    reasoner: &mut dyn Reasoner,
    context: &ReasonerContext,
    config: &InferenceConfig,
) -> Result<VoicePlan, InferenceError> {
    let ids = context.ids();
    call_with_retries(reasoner, config, RequestKind::PlanVoice, context, |v| parse_voice_plan(v, &ids))
}

/// Runs detection over an image reference and keeps the valid entries.
pub fn detect_objects(
    reasoner: &mut dyn Reasoner,
    image: &str,
    frame: &CameraFrame,
    config: &InferenceConfig,
) -> Result<Vec<Detection2D>, InferenceError> {
    let kind = RequestKind::Detect { image: String::from(image), frame: *frame };
    call_with_retries(reasoner, config, kind, &ReasonerContext::default(), |v| {
        interpret_detections(v, frame, image).map(|(good, _)| good)
    })
}
