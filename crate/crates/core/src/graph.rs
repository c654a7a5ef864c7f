//! Typed edge store and edge lifecycle.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{EdgeId, NodeId};
use crate::schema::{RelationPayload, RelationType, SchemaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiative {
    UserInitiated,
    SystemInitiated,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeState {
    Tentative,
    Confirmed,
    /// Lives only while one of its endpoints is held.
    TransientHeld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Seconds a tentative edge lives without confirmation.
    pub tentative_ttl: f64,
    /// Context changes a tentative edge survives.
    pub epoch_grace: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { tentative_ttl: 10.0, epoch_grace: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedEdge {
    pub id: EdgeId,
    pub endpoints: Vec<NodeId>,
    pub relation: RelationType,
    pub confidence: f64,
    pub initiative: Initiative,
    pub state: EdgeState,
    /// Explicit user intent; the UI draws these with stronger emphasis.
    pub emphasized: bool,
    pub payload: RelationPayload,
    pub created_at: f64,
    pub ttl: Option<f64>,
    pub context_epoch: u64,
}

impl TypedEdge {
    /// Dedup key: relation plus endpoint set.
    pub fn key(&self) -> (RelationType, Vec<NodeId>) {
        edge_key(self.relation, &self.endpoints)
    }
}

fn edge_key(relation: RelationType, endpoints: &[NodeId]) -> (RelationType, Vec<NodeId>) {
    let mut set = endpoints.to_vec();
    set.sort_unstable();
    (relation, set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Holding,
    Pointing,
    Proximate,
}

/// User → node link, kept apart from the relation taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEdge {
    pub node: NodeId,
    pub kind: InteractionKind,
    pub since: f64,
}

/// Everything needed to insert one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCommit {
    pub endpoints: Vec<NodeId>,
    pub confidence: f64,
    pub initiative: Initiative,
    pub state: EdgeState,
    pub payload: RelationPayload,
    pub context_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    DeadEndpoint(NodeId),
    TooFewEndpoints(usize),
    DuplicateEndpoint(NodeId),
    InvalidPayload(SchemaError),
    ConfidenceOutOfRange(f64),
    UnknownEdge(EdgeId),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::DeadEndpoint(id) => write!(f, "endpoint {id} is not a live node"),
            GraphError::TooFewEndpoints(n) => write!(f, "an edge needs at least 2 endpoints, got {n}"),
            GraphError::DuplicateEndpoint(id) => write!(f, "endpoint {id} repeated"),
            GraphError::InvalidPayload(e) => write!(f, "invalid payload: {e}"),
            GraphError::ConfidenceOutOfRange(c) => write!(f, "confidence {c} outside [0, 1]"),
            GraphError::UnknownEdge(id) => write!(f, "unknown edge {id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Committed {
    pub id: EdgeId,
    /// An edge with the same relation and endpoint set already existed.
    pub replaced: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SemanticGraph {
    config: GraphConfig,
    edges: BTreeMap<EdgeId, TypedEdge>,
    by_key: BTreeMap<(RelationType, Vec<NodeId>), EdgeId>,
    interactions: BTreeMap<(NodeId, InteractionKind), InteractionEdge>,
    next_id: u32,
}

impl SemanticGraph {
    pub fn new(config: GraphConfig) -> Self {
        SemanticGraph { config, next_id: 1, ..Default::default() }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn edge(&self, id: EdgeId) -> Option<&TypedEdge> {
        self.edges.get(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &TypedEdge> {
        self.edges.values()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Inserts an edge, or refreshes the existing edge with the same
    /// relation and endpoint set. A confirmed edge stays confirmed.
    pub fn commit_edge(
        &mut self,
        commit: EdgeCommit,
        is_live: impl Fn(NodeId) -> bool,
        now: f64,
    ) -> Result<Committed, GraphError> {
        let EdgeCommit { endpoints, confidence, initiative, state, payload, context_epoch } = commit;
        if endpoints.len() < 2 {
            return Err(GraphError::TooFewEndpoints(endpoints.len()));
        }
        let mut seen = BTreeSet::new();
        for &id in &endpoints {
            if id.is_user() || !is_live(id) {
                return Err(GraphError::DeadEndpoint(id));
            }
            if !seen.insert(id) {
                return Err(GraphError::DuplicateEndpoint(id));
            }
        }
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(GraphError::ConfidenceOutOfRange(confidence));
        }
        payload.check(&seen).map_err(GraphError::InvalidPayload)?;
        let relation = payload.relation();
        let ttl = (state == EdgeState::Tentative).then_some(self.config.tentative_ttl);
        let emphasized = initiative == Initiative::UserInitiated;
        let key = edge_key(relation, &endpoints);

        if let Some(&id) = self.by_key.get(&key) {
            let edge = self.edges.get_mut(&id).expect("index and store agree");
            edge.endpoints = endpoints;
            edge.confidence = confidence;
            edge.payload = payload;
            edge.initiative = initiative;
            edge.emphasized = edge.emphasized || emphasized;
            edge.created_at = now;
            edge.context_epoch = context_epoch;
            if edge.state != EdgeState::Confirmed {
                edge.state = state;
                edge.ttl = ttl;
            }
            return Ok(Committed { id, replaced: true });
        }

        let id = EdgeId(self.next_id);
        self.next_id += 1;
        self.by_key.insert(key, id);
        self.edges.insert(
            id,
            TypedEdge {
                id,
                endpoints,
                relation,
                confidence,
                initiative,
                state,
                emphasized,
                payload,
                created_at: now,
                ttl,
                context_epoch,
            },
        );
        Ok(Committed { id, replaced: false })
    }

    /// Returns whether the state changed.
    pub fn confirm_edge(&mut self, id: EdgeId) -> Result<bool, GraphError> {
        let edge = self.edges.get_mut(&id).ok_or(GraphError::UnknownEdge(id))?;
        if edge.state == EdgeState::Confirmed {
            return Ok(false);
        }
        edge.state = EdgeState::Confirmed;
        edge.ttl = None;
        Ok(true)
    }

    pub fn reject_edge(&mut self, id: EdgeId) -> Result<TypedEdge, GraphError> {
        let edge = self.edges.remove(&id).ok_or(GraphError::UnknownEdge(id))?;
        self.by_key.remove(&edge.key());
        Ok(edge)
    }

    /// True when `edge` should be dropped at `now`.
    pub fn is_expired(
        &self,
        edge: &TypedEdge,
        now: f64,
        current_epoch: u64,
        held: &BTreeSet<NodeId>,
    ) -> bool {
        match edge.state {
            EdgeState::Confirmed => false,
            EdgeState::Tentative => {
                let ttl = edge.ttl.unwrap_or(self.config.tentative_ttl);
                now - edge.created_at > ttl
                    || edge.context_epoch.saturating_add(self.config.epoch_grace) < current_epoch
            }
            EdgeState::TransientHeld => !edge.endpoints.iter().any(|id| held.contains(id)),
        }
    }

    /// Removes expired edges and returns their ids in ascending order.
    pub fn decay_tick(&mut self, now: f64, current_epoch: u64, held: &BTreeSet<NodeId>) -> Vec<EdgeId> {
        let doomed: Vec<EdgeId> = self
            .edges
            .values()
            .filter(|e| self.is_expired(e, now, current_epoch, held))
            .map(|e| e.id)
            .collect();
        for id in &doomed {
            let edge = self.edges.remove(id).expect("listed above");
            self.by_key.remove(&edge.key());
        }
        doomed
    }

    /// Edges whose endpoints all lie in `ids`.
    pub fn induced_edges(&self, ids: &BTreeSet<NodeId>) -> Vec<TypedEdge> {
        self.edges
            .values()
            .filter(|e| e.endpoints.iter().all(|n| ids.contains(n)))
            .cloned()
            .collect()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &InteractionEdge> {
        self.interactions.values()
    }

    pub fn set_holding(&mut self, node: NodeId, now: f64) {
        self.interactions
            .entry((node, InteractionKind::Holding))
            .or_insert(InteractionEdge { node, kind: InteractionKind::Holding, since: now });
    }

    pub fn clear_holding(&mut self, node: NodeId) {
        self.interactions.remove(&(node, InteractionKind::Holding));
    }

    /// At most one pointing link exists at a time.
    pub fn set_pointing(&mut self, node: Option<NodeId>, now: f64) {
        let current: Vec<NodeId> = self
            .interactions
            .keys()
            .filter(|(_, k)| *k == InteractionKind::Pointing)
            .map(|(n, _)| *n)
            .collect();
        for n in current {
            if Some(n) != node {
                self.interactions.remove(&(n, InteractionKind::Pointing));
            }
        }
        if let Some(node) = node {
            self.interactions
                .entry((node, InteractionKind::Pointing))
                .or_insert(InteractionEdge { node, kind: InteractionKind::Pointing, since: now });
        }
    }

    /// Replaces the proximate links with `nodes`, keeping `since` for links
    /// that persist.
    pub fn set_proximate(&mut self, nodes: &BTreeSet<NodeId>, now: f64) {
        self.interactions
            .retain(|(n, k), _| *k != InteractionKind::Proximate || nodes.contains(n));
        for &node in nodes {
            self.interactions
                .entry((node, InteractionKind::Proximate))
                .or_insert(InteractionEdge { node, kind: InteractionKind::Proximate, since: now });
        }
    }
}
