//! Session engine: folds interaction events and reasoner outcomes into the
//! registry, context window and graph, and publishes deltas.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::{ContextConfig, ContextInputs, ContextTracker, ContextWindow, Source};
use crate::geometry::{pixel_to_ray, raycast, CameraFrame, SceneMesh, UNIT_INPUT_TOLERANCE};
use crate::graph::{EdgeCommit, EdgeState, GraphConfig, Initiative, SemanticGraph};
use crate::ids::{EdgeId, ItemRef, NodeId, ProposalId, RequestId};
use crate::inference::{
    held_pair_rule, interpret_detections, interpret_selection, ContextNode, Disposition, DropReason,
    InferenceConfig, ReasonerContext, ReasonerOutcome, ReasonerRequest, RelationProposal, RequestKind,
    RequestQueue, Reasoner, Routing, Trigger,
};
use crate::interaction::{resolve_deictic, sweep_advance, EventKind, InteractionEvent};
use crate::registry::{Registry, RegistryConfig, RegistrySnapshot};
use crate::schema::{parse_payload, parse_type_selection, parse_voice_plan, RelationType, SchemaError, TypeSelection};
use crate::state::{Delta, Prompt, SessionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub registry: RegistryConfig,
    pub graph: GraphConfig,
    pub context: ContextConfig,
    pub inference: InferenceConfig,
    /// Pixel selection snaps to the nearest node within this distance of
    /// the surface hit, meters.
    pub pointer_snap_radius: f64,
    pub sweep_half_angle_deg: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            registry: RegistryConfig::default(),
            graph: GraphConfig::default(),
            context: ContextConfig::default(),
            inference: InferenceConfig::default(),
            pointer_snap_radius: 0.3,
            sweep_half_angle_deg: 30.0,
        }
    }
}

/// Messages for the user that are not part of the graph state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Notice {
    NeedsDisambiguation {
        proposal: ProposalId,
        candidates: Vec<RelationType>,
        prompt: String,
        endpoints: Vec<NodeId>,
    },
    Clarification { text: String },
}

/// Result of one event or one reasoner outcome.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Delta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<Notice>,
    /// Log lines: dropped proposals, skipped detections, retries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl Step {
    pub fn is_empty(&self) -> bool {
        self.delta.is_none() && self.notices.is_empty() && self.diagnostics.is_empty()
    }
}

/// An event was rejected and left no trace in the state.
#[derive(Debug, Clone, PartialEq)]
pub enum EventError {
    OutOfOrder { seq: u64, last: u64 },
    BadTime { time: f64, now: f64 },
    UnknownNode(NodeId),
    NotHeld(NodeId),
    AlreadyHeld(NodeId),
    UnknownEdge(EdgeId),
    UnknownProposal(ProposalId),
    NotAwaitingChoice(ProposalId),
    PromptExpired(ProposalId),
    ChoiceNotOffered { proposal: ProposalId, choice: RelationType },
    NoCamera,
    NoTarget,
    EmptySelection,
    BlankUtterance,
    Invalid(String),
}

impl fmt::Display for EventError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventError::OutOfOrder { seq, last } => write!(f, "seq {seq} is not after {last}"),
            EventError::BadTime { time, now } => write!(f, "time {time} is before session time {now}"),
            EventError::UnknownNode(id) => write!(f, "unknown node {id}"),
            EventError::NotHeld(id) => write!(f, "{id} is not held"),
            EventError::AlreadyHeld(id) => write!(f, "{id} is already held"),
            EventError::UnknownEdge(id) => write!(f, "unknown edge {id}"),
            EventError::UnknownProposal(id) => write!(f, "unknown proposal {id}"),
            EventError::NotAwaitingChoice(id) => write!(f, "proposal {id} is not waiting for a choice"),
            EventError::PromptExpired(id) => write!(f, "the prompt for {id} has expired"),
            EventError::ChoiceNotOffered { proposal, choice } => {
                write!(f, "{choice} was not offered for {proposal}")
            }
            EventError::NoCamera => f.write_str("no camera frame available"),
            EventError::NoTarget => f.write_str("nothing selectable at that point"),
            EventError::EmptySelection => f.write_str("selection is empty"),
            EventError::BlankUtterance => f.write_str("empty utterance"),
            EventError::Invalid(m) => f.write_str(m),
        }
    }
}

enum Follow {
    Propose { trigger: Trigger, endpoints: Vec<NodeId>, initiative: Initiative, state: EdgeState },
    PlanVoice { utterance: String, mentioned: Vec<NodeId> },
    Extract { proposal: ProposalId },
    Detect { image: String, frame: CameraFrame },
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    registry: Registry,
    graph: SemanticGraph,
    context: ContextTracker,
    queue: RequestQueue,
    proposals: BTreeMap<ProposalId, RelationProposal>,
    next_proposal: u32,
    mesh: SceneMesh,
    camera: Option<CameraFrame>,
    selection: Vec<NodeId>,
    mentioned: BTreeSet<NodeId>,
    last_seq: Option<u64>,
    now: f64,
    published: SessionState,
}

impl Engine {
    pub fn new(config: EngineConfig, mesh: SceneMesh, camera: Option<CameraFrame>) -> Self {
        Engine {
            registry: Registry::new(config.registry.clone()),
            graph: SemanticGraph::new(config.graph.clone()),
            context: ContextTracker::new(config.context.clone()),
            queue: RequestQueue::new(&config.inference),
            proposals: BTreeMap::new(),
            next_proposal: 1,
            mesh,
            camera,
            selection: Vec::new(),
            mentioned: BTreeSet::new(),
            last_seq: None,
            now: 0.0,
            published: SessionState::default(),
            config,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.last_seq
    }

    /// The state as of the last published delta.
    pub fn snapshot(&self) -> &SessionState {
        &self.published
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn graph(&self) -> &SemanticGraph {
        &self.graph
    }

    pub fn window(&self) -> &ContextWindow {
        self.context.window()
    }

    pub fn epoch(&self) -> u64 {
        self.context.epoch_of()
    }

    pub fn selection(&self) -> &[NodeId] {
        &self.selection
    }

    pub fn proposal(&self, id: ProposalId) -> Option<&RelationProposal> {
        self.proposals.get(&id)
    }

    pub fn proposals(&self) -> impl Iterator<Item = &RelationProposal> {
        self.proposals.values()
    }

    pub fn in_flight(&self) -> usize {
        self.queue.in_flight()
    }

    /// True when no reasoner work is queued or outstanding.
    pub fn is_idle(&self) -> bool {
        self.queue.is_idle()
    }

    /// Next request to send to the reasoner. At most
    /// `inference.max_in_flight` requests are out at once.
    pub fn poll_request(&mut self) -> Option<ReasonerRequest> {
        self.queue.poll()
    }

    /// Applies one event. Rejected events change nothing except that their
    /// seq is consumed.
    pub fn apply(&mut self, event: &InteractionEvent) -> Result<Step, EventError> {
        if let Some(last) = self.last_seq {
            if event.seq <= last {
                return Err(EventError::OutOfOrder { seq: event.seq, last });
            }
        }
        if !event.time.is_finite() || event.time < self.now {
            return Err(EventError::BadTime { time: event.time, now: self.now });
        }
        self.last_seq = Some(event.seq);
        let before = self.now;
        self.now = event.time;
        let mut step = Step::default();
        let follows = match self.handle(&event.kind, &mut step) {
            Ok(f) => f,
            Err(e) => {
                self.now = before;
                return Err(e);
            }
        };
        self.refresh();
        if matches!(event.kind, EventKind::Tick) {
            let held = self.registry.user().held_ids.clone();
            for id in self.graph.decay_tick(self.now, self.context.epoch_of(), &held) {
                step.diagnostics.push(format!("edge {id} expired"));
            }
        }
        for f in follows {
            self.follow(f, &mut step);
        }
        step.delta = self.publish();
        Ok(step)
    }

    /// Feeds back the outcome of a request obtained from `poll_request`.
    pub fn deliver(&mut self, id: RequestId, attempt: u32, outcome: ReasonerOutcome) -> Step {
        let mut step = Step::default();
        match self.queue.complete(id, attempt) {
            Some(request) => self.on_outcome(request, outcome, &mut step),
            None => step.diagnostics.push(format!("ignored reply to {id} attempt {attempt}")),
        }
        self.refresh();
        step.delta = self.publish();
        step
    }

    /// Serves every queued request from a blocking reasoner.
    pub fn run_to_idle(&mut self, reasoner: &mut dyn Reasoner) -> Vec<Step> {
        let mut steps = Vec::new();
        while let Some(request) = self.poll_request() {
            let outcome = reasoner.respond(&request);
            steps.push(self.deliver(request.id, request.attempt, outcome));
        }
        steps
    }

    /// Abandons all reasoner work, e.g. when a session closes.
    pub fn cancel_pending(&mut self) -> Step {
        let mut step = Step::default();
        self.queue.cancel_all();
        let pending: Vec<ProposalId> = self
            .proposals
            .values()
            .filter(|p| p.disposition == Disposition::Pending)
            .map(|p| p.id)
            .collect();
        for id in pending {
            self.drop_proposal(id, DropReason::Cancelled, &mut step);
        }
        step.delta = self.publish();
        step
    }

    /// Answers an open disambiguation prompt.
    pub fn resolve_disambiguation(&mut self, proposal: ProposalId, choice: RelationType) -> Result<Step, EventError> {
        let mut step = Step::default();
        let f = self.choose(proposal, choice)?;
        self.follow(f, &mut step);
        step.delta = self.publish();
        Ok(step)
    }

    fn handle(&mut self, kind: &EventKind, step: &mut Step) -> Result<Vec<Follow>, EventError> {
        let now = self.now;
        let mut follows = Vec::new();
        match kind {
            EventKind::PinchSelect { node, pixel } => {
                let target = self.resolve_target(*node, *pixel)?;
                match self.selection.iter().position(|&id| id == target) {
                    Some(i) => {
                        self.selection.remove(i);
                    }
                    None => self.selection.push(target),
                }
                follows.extend(self.selection_follow());
            }
            EventKind::ClearSelection => {
                self.selection.clear();
                self.mentioned.clear();
            }
            EventKind::Sweep { direction } => {
                let norm = libm::hypot(direction[0], direction[1]);
                if !norm.is_finite() || (norm - 1.0).abs() > UNIT_INPUT_TOLERANCE {
                    return Err(EventError::Invalid(String::from("sweep direction must be a unit vector")));
                }
                if self.selection.is_empty() {
                    return Err(EventError::EmptySelection);
                }
                let dir = [direction[0] / norm, direction[1] / norm];
                let snap = self.registry.nodes_snapshot();
                match sweep_advance(&self.selection, dir, self.config.sweep_half_angle_deg, &snap) {
                    Some(id) => {
                        self.selection.push(id);
                        follows.extend(self.selection_follow());
                    }
                    None => step.diagnostics.push(String::from("sweep found nothing in that direction")),
                }
            }
            EventKind::Voice { utterance } => {
                if utterance.trim().is_empty() {
                    return Err(EventError::BlankUtterance);
                }
                let snap = self.registry.nodes_snapshot();
                match resolve_deictic(utterance, &self.selection, self.context.window(), &snap) {
                    Err(c) => step.notices.push(Notice::Clarification { text: c.0 }),
                    Ok(ids) => {
                        let mut union: BTreeSet<NodeId> = ids.iter().copied().collect();
                        union.extend(self.selection.iter().copied());
                        self.mentioned = ids.iter().copied().collect();
                        if union.len() < 2 {
                            step.notices.push(Notice::Clarification {
                                text: String::from("Which other object should I relate it to?"),
                            });
                        } else {
                            follows.push(Follow::PlanVoice { utterance: utterance.clone(), mentioned: ids });
                        }
                    }
                }
            }
            EventKind::Grab { node } => {
                self.object(*node)?;
                if self.registry.user().held_ids.contains(node) {
                    return Err(EventError::AlreadyHeld(*node));
                }
                self.registry.grab(*node, now).map_err(|e| EventError::Invalid(e.to_string()))?;
                self.graph.set_holding(*node, now);
            }
            EventKind::Aim { held, node, pixel } => {
                if !self.registry.user().held_ids.contains(held) {
                    return Err(EventError::NotHeld(*held));
                }
                let target = self.resolve_target(*node, *pixel)?;
                if target == *held {
                    return Err(EventError::Invalid(String::from("an item cannot be aimed at itself")));
                }
                for id in [*held, target] {
                    self.registry.touch(id, now).map_err(|e| EventError::Invalid(e.to_string()))?;
                }
                self.registry.point_at(Some(target)).map_err(|e| EventError::Invalid(e.to_string()))?;
                self.graph.set_pointing(Some(target), now);
                follows.push(Follow::Propose {
                    trigger: Trigger::TransientPair,
                    endpoints: vec![*held, target],
                    initiative: Initiative::UserInitiated,
                    state: EdgeState::TransientHeld,
                });
            }
            EventKind::Release { node } => {
                self.object(*node)?;
                if !self.registry.user().held_ids.contains(node) {
                    return Err(EventError::NotHeld(*node));
                }
                self.registry.release(*node, now).map_err(|e| EventError::Invalid(e.to_string()))?;
                self.graph.clear_holding(*node);
                if self.registry.user().held_ids.is_empty() {
                    self.registry.point_at(None).map_err(|e| EventError::Invalid(e.to_string()))?;
                    self.graph.set_pointing(None, now);
                }
            }
            EventKind::Confirm { target } => match target {
                ItemRef::Edge(id) => {
                    self.graph.confirm_edge(*id).map_err(|_| EventError::UnknownEdge(*id))?;
                }
                ItemRef::Proposal(pid) => {
                    let first = self.awaiting(*pid)?.candidates[0];
                    follows.push(self.choose(*pid, first)?);
                }
            },
            EventKind::Reject { target } => match target {
                ItemRef::Edge(id) => {
                    self.graph.reject_edge(*id).map_err(|_| EventError::UnknownEdge(*id))?;
                }
                ItemRef::Proposal(pid) => {
                    self.awaiting(*pid)?;
                    self.drop_proposal(*pid, DropReason::Rejected, step);
                }
            },
            EventKind::Resolve { proposal, choice } => {
                follows.push(self.choose(*proposal, *choice)?);
            }
            EventKind::DetectionFrame { camera, detections, image } => {
                let frame = (*camera).or(self.camera).ok_or(EventError::NoCamera)?;
                if detections.is_none() && image.is_none() {
                    return Err(EventError::Invalid(String::from("detection_frame needs detections or an image")));
                }
                if let Some(raw) = detections {
                    let prefix = format!("frame@{}", self.last_seq.unwrap_or(0));
                    let (good, bad) = interpret_detections(&Value::Array(raw.clone()), &frame, &prefix)
                        .map_err(|e| EventError::Invalid(e.to_string()))?;
                    for e in bad {
                        step.diagnostics.push(format!("detection skipped: {e}"));
                    }
                    self.register(&frame, &good, step);
                }
                if let Some(image) = image {
                    follows.push(Follow::Detect { image: image.clone(), frame });
                }
                self.camera = Some(frame);
            }
            EventKind::UserPose { pose, gaze } => {
                self.registry
                    .update_user(*pose, *gaze, now)
                    .map_err(|e| EventError::Invalid(e.to_string()))?;
            }
            EventKind::Tick => {
                let ttl = self.config.inference.prompt_ttl;
                let expired: Vec<ProposalId> = self
                    .proposals
                    .values()
                    .filter(|p| p.disposition == Disposition::NeedsDisambiguation && now - p.issued_at > ttl)
                    .map(|p| p.id)
                    .collect();
                for id in expired {
                    self.drop_proposal(id, DropReason::Expired, step);
                }
            }
        }
        Ok(follows)
    }

    fn selection_follow(&self) -> Option<Follow> {
        (self.selection.len() >= 2).then(|| Follow::Propose {
            trigger: Trigger::Selection,
            endpoints: self.selection.clone(),
            initiative: Initiative::SystemInitiated,
            state: EdgeState::Tentative,
        })
    }

    fn object(&self, id: NodeId) -> Result<(), EventError> {
        if id.is_user() || self.registry.node(id).is_none() {
            return Err(EventError::UnknownNode(id));
        }
        Ok(())
    }

    fn resolve_target(&self, node: Option<NodeId>, pixel: Option<[f64; 2]>) -> Result<NodeId, EventError> {
        match (node, pixel) {
            (Some(id), None) => self.object(id).map(|()| id),
            (None, Some(px)) => {
                let frame = self.camera.as_ref().ok_or(EventError::NoCamera)?;
                let ray = pixel_to_ray(frame, px).map_err(|e| EventError::Invalid(e.to_string()))?;
                let hit = raycast(&self.mesh, &ray).ok_or(EventError::NoTarget)?;
                let radius = self.config.pointer_snap_radius;
                self.registry
                    .nodes()
                    .map(|n| (n.position().distance(hit.point), n.id))
                    .filter(|(d, _)| *d <= radius)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|(_, id)| id)
                    .ok_or(EventError::NoTarget)
            }
            _ => Err(EventError::Invalid(String::from("give exactly one of node or pixel"))),
        }
    }

    fn awaiting(&self, pid: ProposalId) -> Result<&RelationProposal, EventError> {
        let p = self.proposals.get(&pid).ok_or(EventError::UnknownProposal(pid))?;
        if p.disposition != Disposition::NeedsDisambiguation {
            return Err(EventError::NotAwaitingChoice(pid));
        }
        if self.now - p.issued_at > self.config.inference.prompt_ttl {
            return Err(EventError::PromptExpired(pid));
        }
        Ok(p)
    }

    fn choose(&mut self, pid: ProposalId, choice: RelationType) -> Result<Follow, EventError> {
        let p = self.awaiting(pid)?;
        if !p.candidates.contains(&choice) {
            return Err(EventError::ChoiceNotOffered { proposal: pid, choice });
        }
        let p = self.proposals.get_mut(&pid).expect("checked above");
        let mut sel = p.selection.clone().expect("a prompt always follows a type selection");
        if let Some(alt) = sel.alternate.filter(|a| a.relation == choice) {
            sel.confidence = alt.confidence;
        }
        sel.chosen = choice;
        sel.alternate = None;
        p.selection = Some(sel);
        p.disposition = Disposition::Pending;
        p.prompt = None;
        p.initiative = Initiative::Hybrid;
        p.edge_state = EdgeState::Confirmed;
        Ok(Follow::Extract { proposal: pid })
    }

    fn register(&mut self, frame: &CameraFrame, dets: &[crate::registry::Detection2D], step: &mut Step) {
        let results = self.registry.register_frame(frame, dets, &self.mesh, self.now);
        for (det, r) in dets.iter().zip(results) {
            if let Err(e) = r {
                step.diagnostics.push(format!("detection '{}' not registered: {e}", det.label));
            }
        }
    }

    fn refresh(&mut self) {
        let snapshot: RegistrySnapshot = self.registry.nodes_snapshot();
        let held = snapshot.user.held_ids.clone();
        self.selection.retain(|id| snapshot.node(*id).is_some());
        self.context.recompute(ContextInputs {
            snapshot: &snapshot,
            selection: &self.selection,
            held: &held,
            mentioned: &self.mentioned,
            now: self.now,
        });
        let proximate: BTreeSet<NodeId> = self
            .context
            .window()
            .entries
            .iter()
            .filter(|e| e.sources.contains(&Source::Proximate))
            .map(|e| e.node)
            .collect();
        self.graph.set_proximate(&proximate, self.now);
    }

    fn context_node(&self, id: NodeId) -> Option<ContextNode> {
        let n = self.registry.node(id)?;
        Some(ContextNode {
            id,
            label: n.label.clone(),
            synonyms: n.synonyms.clone(),
            description: n.description.clone(),
            position: n.position(),
            held: n.held,
        })
    }

    fn reasoner_context(&self, ids: &[NodeId], utterance: Option<String>, mentioned: Vec<NodeId>) -> ReasonerContext {
        ReasonerContext {
            nodes: ids.iter().filter_map(|id| self.context_node(*id)).collect(),
            selection_order: self.selection.clone(),
            mentioned,
            utterance,
        }
    }

    fn new_proposal(&mut self, trigger: Trigger, endpoints: Vec<NodeId>, initiative: Initiative, state: EdgeState) -> ProposalId {
        let id = ProposalId(self.next_proposal);
        self.next_proposal += 1;
        self.proposals.insert(
            id,
            RelationProposal {
                id,
                trigger,
                endpoints,
                initiative,
                edge_state: state,
                selection: None,
                candidates: Vec::new(),
                prompt: None,
                payload: None,
                disposition: Disposition::Pending,
                context_epoch: self.context.epoch_of(),
                issued_at: self.now,
                edge: None,
                dropped: None,
            },
        );
        id
    }

    fn follow(&mut self, f: Follow, step: &mut Step) {
        let epoch = self.context.epoch_of();
        match f {
            Follow::Propose { trigger, endpoints, initiative, state } => {
                let pid = self.new_proposal(trigger, endpoints.clone(), initiative, state);
                let ctx = self.reasoner_context(&endpoints, None, Vec::new());
                match held_pair_rule(&ctx, &self.config.inference) {
                    Some(sel) => {
                        let relation = sel.chosen;
                        self.proposals.get_mut(&pid).expect("just made").selection = Some(sel);
                        self.queue.issue(Some(pid), RequestKind::Extract { relation }, ctx, epoch);
                    }
                    None => {
                        self.queue.issue(Some(pid), RequestKind::Classify, ctx, epoch);
                    }
                }
            }
            Follow::PlanVoice { utterance, mentioned } => {
                let pid = self.new_proposal(
                    Trigger::Voice,
                    mentioned.clone(),
                    Initiative::UserInitiated,
                    EdgeState::Tentative,
                );
                let mut ids = mentioned.clone();
                for id in self.selection.iter().copied().chain(self.context.window().object_nodes()) {
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                let ctx = self.reasoner_context(&ids, Some(utterance), mentioned);
                self.queue.issue(Some(pid), RequestKind::PlanVoice, ctx, epoch);
            }
            Follow::Extract { proposal } => {
                let Some(p) = self.proposals.get_mut(&proposal) else { return };
                p.context_epoch = epoch;
                let relation = p.selection.as_ref().expect("chosen before extraction").chosen;
                let endpoints = p.endpoints.clone();
                let ctx = self.reasoner_context(&endpoints, None, Vec::new());
                self.queue.issue(Some(proposal), RequestKind::Extract { relation }, ctx, epoch);
            }
            Follow::Detect { image, frame } => {
                self.queue.issue(None, RequestKind::Detect { image, frame }, ReasonerContext::default(), epoch);
                let _ = step;
            }
        }
    }

    fn drop_proposal(&mut self, pid: ProposalId, reason: DropReason, step: &mut Step) {
        if let Some(p) = self.proposals.get_mut(&pid) {
            step.diagnostics.push(format!("proposal {pid} dropped: {reason:?}"));
            p.disposition = Disposition::Dropped;
            p.prompt = None;
            p.dropped = Some(reason);
        }
    }

    fn retry_or_drop(&mut self, request: ReasonerRequest, why: String, step: &mut Step) {
        let (id, attempt, proposal) = (request.id, request.attempt, request.proposal);
        match self.queue.retry(request) {
            Ok(()) => step.diagnostics.push(format!("{id} attempt {attempt} failed ({why}); retrying")),
            Err(_) => match proposal {
                Some(pid) => self.drop_proposal(pid, DropReason::RetriesExhausted(why), step),
                None => step.diagnostics.push(format!("{id} abandoned: {why}")),
            },
        }
    }

    fn on_outcome(&mut self, request: ReasonerRequest, outcome: ReasonerOutcome, step: &mut Step) {
        if let Some(pid) = request.proposal {
            match self.proposals.get(&pid) {
                Some(p) if p.disposition == Disposition::Pending => {}
                _ => {
                    step.diagnostics.push(format!("reply for {pid} arrived after it was settled"));
                    return;
                }
            }
            if request.context_epoch != self.context.epoch_of() {
                self.drop_proposal(pid, DropReason::Stale, step);
                return;
            }
        }
        let value = match outcome {
            ReasonerOutcome::Response(v) => v,
            ReasonerOutcome::Declined => {
                match request.proposal {
                    Some(pid) => self.drop_proposal(pid, DropReason::Declined, step),
                    None => step.diagnostics.push(format!("{} declined", request.id)),
                }
                return;
            }
            ReasonerOutcome::Malformed(m) => return self.retry_or_drop(request, m, step),
            ReasonerOutcome::Timeout => return self.retry_or_drop(request, String::from("timed out"), step),
        };
        let result = match (&request.kind, request.proposal) {
            (RequestKind::Detect { image, frame }, _) => {
                interpret_detections(&value, frame, image).map(|(good, bad)| {
                    for e in bad {
                        step.diagnostics.push(format!("detection skipped: {e}"));
                    }
                    let frame = *frame;
                    self.register(&frame, &good, step);
                })
            }
            (RequestKind::Classify, Some(pid)) => self.on_classify(pid, &request, &value, step),
            (RequestKind::PlanVoice, Some(pid)) => self.on_plan(pid, &request, &value, step),
            (RequestKind::Extract { relation }, Some(pid)) => self.on_extract(pid, &request, *relation, &value, step),
            (_, None) => Ok(()),
        };
        match (result, request.proposal) {
            (Ok(()), _) => {}
            // Ids that do not resolve will not resolve on a second try either.
            (Err(SchemaError::UnknownNode(id)), Some(pid)) => {
                self.drop_proposal(pid, DropReason::UnresolvedNode(id), step)
            }
            (Err(e), _) => self.retry_or_drop(request, e.to_string(), step),
        }
    }

    fn on_classify(&mut self, pid: ProposalId, request: &ReasonerRequest, value: &Value, step: &mut Step) -> Result<(), SchemaError> {
        let sel = parse_type_selection(value)?;
        let routing = interpret_selection(sel.clone(), &request.context, &self.config.inference);
        let now = self.now;
        let p = self.proposals.get_mut(&pid).expect("pending proposal");
        p.selection = Some(sel);
        match routing {
            Routing::Single(_) => self.follow(Follow::Extract { proposal: pid }, step),
            Routing::NeedsDisambiguation { candidates, prompt } => {
                p.disposition = Disposition::NeedsDisambiguation;
                p.candidates = candidates.clone();
                p.prompt = Some(prompt.clone());
                p.issued_at = now;
                step.notices.push(Notice::NeedsDisambiguation {
                    proposal: pid,
                    candidates,
                    prompt,
                    endpoints: p.endpoints.clone(),
                });
            }
        }
        Ok(())
    }

    fn on_plan(&mut self, pid: ProposalId, request: &ReasonerRequest, value: &Value, step: &mut Step) -> Result<(), SchemaError> {
        let plan = parse_voice_plan(value, &request.context.ids())?;
        let p = self.proposals.get_mut(&pid).expect("pending proposal");
        p.endpoints = plan.endpoints;
        p.selection = Some(TypeSelection {
            chosen: plan.relation,
            confidence: plan.confidence.unwrap_or(1.0),
            reason: String::from("spoken request"),
            alternate: None,
        });
        self.follow(Follow::Extract { proposal: pid }, step);
        Ok(())
    }

    fn on_extract(
        &mut self,
        pid: ProposalId,
        request: &ReasonerRequest,
        relation: RelationType,
        value: &Value,
        step: &mut Step,
    ) -> Result<(), SchemaError> {
        let payload = parse_payload(relation, value, &request.context.ids())?;
        let p = self.proposals.get(&pid).expect("pending proposal");
        let mut endpoints: Vec<NodeId> = Vec::new();
        for id in payload.referenced_nodes() {
            if !endpoints.contains(&id) {
                endpoints.push(id);
            }
        }
        if endpoints.len() < 2 {
            endpoints = p.endpoints.clone();
        }
        let commit = EdgeCommit {
            endpoints,
            confidence: p.selection.as_ref().map_or(1.0, |s| s.confidence),
            initiative: p.initiative,
            state: p.edge_state,
            payload: payload.clone(),
            context_epoch: request.context_epoch,
        };
        let registry = &self.registry;
        match self.graph.commit_edge(commit, |id| registry.is_live(id), self.now) {
            Ok(c) => {
                let p = self.proposals.get_mut(&pid).expect("pending proposal");
                p.payload = Some(payload);
                p.disposition = Disposition::Committed;
                p.edge = Some(c.id);
            }
            Err(e) => self.drop_proposal(pid, DropReason::Commit(e.to_string()), step),
        }
        Ok(())
    }

    fn current_state(&self) -> SessionState {
        let ttl = self.config.inference.prompt_ttl;
        SessionState {
            delta_seq: self.published.delta_seq,
            ack: self.last_seq.unwrap_or(0),
            user: self.registry.user().clone(),
            nodes: self.registry.nodes().map(|n| (n.id, n.clone())).collect(),
            edges: self.graph.edges().map(|e| (e.id, e.clone())).collect(),
            interactions: self.graph.interactions().cloned().collect(),
            selection: self.selection.clone(),
            window: self.context.window().clone(),
            prompts: self
                .proposals
                .values()
                .filter(|p| p.disposition == Disposition::NeedsDisambiguation)
                .map(|p| {
                    let prompt = Prompt {
                        proposal: p.id,
                        candidates: p.candidates.clone(),
                        text: p.prompt.clone().unwrap_or_default(),
                        endpoints: p.endpoints.clone(),
                        expires_at: p.issued_at + ttl,
                    };
                    (p.id, prompt)
                })
                .collect(),
        }
    }

    fn publish(&mut self) -> Option<Delta> {
        let next = self.current_state();
        let delta = self.published.diff(&next)?;
        self.published.apply(&delta).expect("delta follows the published state");
        debug_assert_eq!(self.published, SessionState { delta_seq: delta.delta_seq, ..next });
        Some(delta)
    }
}
