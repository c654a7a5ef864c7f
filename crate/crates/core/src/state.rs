//! Published session state and the deltas between successive states.
//!
//! A client that starts from any snapshot and applies every later delta in
//! order ends up with exactly the engine's current snapshot.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::context::ContextWindow;
use crate::graph::{InteractionEdge, TypedEdge};
use crate::ids::{EdgeId, NodeId, ProposalId};
use crate::registry::{ObjectNode, UserNode};
use crate::schema::RelationType;

/// An open question to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub proposal: ProposalId,
    pub candidates: Vec<RelationType>,
    pub text: String,
    pub endpoints: Vec<NodeId>,
    pub expires_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SessionState {
    /// Number of deltas folded into this state.
    pub delta_seq: u64,
    /// Seq of the last interaction event applied.
    pub ack: u64,
    pub user: UserNode,
    pub nodes: BTreeMap<NodeId, ObjectNode>,
    pub edges: BTreeMap<EdgeId, TypedEdge>,
    pub interactions: Vec<InteractionEdge>,
    pub selection: Vec<NodeId>,
    pub window: ContextWindow,
    pub prompts: BTreeMap<ProposalId, Prompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Delta {
    pub delta_seq: u64,
    pub ack: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes_added: Vec<ObjectNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes_updated: Vec<ObjectNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes_removed: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges_added: Vec<TypedEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges_updated: Vec<TypedEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges_removed: Vec<EdgeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<UserNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactions: Option<Vec<InteractionEdge>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<ContextWindow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts_added: Vec<Prompt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts_removed: Vec<ProposalId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldError {
    /// The delta does not directly follow the state.
    Gap { expected: u64, got: u64 },
}

impl core::fmt::Display for FoldError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FoldError::Gap { expected, got } => write!(f, "expected delta {expected}, got {got}"),
        }
    }
}

fn diff_map<K: Ord + Copy, V: Clone + PartialEq>(
    old: &BTreeMap<K, V>,
    new: &BTreeMap<K, V>,
) -> (Vec<V>, Vec<V>, Vec<K>) {
    let mut added = Vec::new();
    let mut updated = Vec::new();
    for (k, v) in new {
        match old.get(k) {
            None => added.push(v.clone()),
            Some(o) if o != v => updated.push(v.clone()),
            Some(_) => {}
        }
    }
    let removed = old.keys().filter(|k| !new.contains_key(k)).copied().collect();
    (added, updated, removed)
}

impl SessionState {
    /// Delta taking `self` to `next`, or `None` if nothing visible changed.
    /// The returned delta carries `self.delta_seq + 1` and `next.ack`.
    pub fn diff(&self, next: &SessionState) -> Option<Delta> {
        let (nodes_added, nodes_updated, nodes_removed) = diff_map(&self.nodes, &next.nodes);
        let (edges_added, edges_updated, edges_removed) = diff_map(&self.edges, &next.edges);
        let (prompts_added, _, prompts_removed) = diff_map(&self.prompts, &next.prompts);
        let delta = Delta {
            delta_seq: self.delta_seq + 1,
            ack: next.ack,
            nodes_added,
            nodes_updated,
            nodes_removed,
            edges_added,
            edges_updated,
            edges_removed,
            user: (self.user != next.user).then(|| next.user.clone()),
            interactions: (self.interactions != next.interactions).then(|| next.interactions.clone()),
            selection: (self.selection != next.selection).then(|| next.selection.clone()),
            window: (self.window != next.window).then(|| next.window.clone()),
            prompts_added,
            prompts_removed,
        };
        let empty = Delta { delta_seq: delta.delta_seq, ack: delta.ack, ..Delta::default() };
        (delta != empty).then_some(delta)
    }

    pub fn apply(&mut self, delta: &Delta) -> Result<(), FoldError> {
        if delta.delta_seq != self.delta_seq + 1 {
            return Err(FoldError::Gap { expected: self.delta_seq + 1, got: delta.delta_seq });
        }
        self.delta_seq = delta.delta_seq;
        self.ack = delta.ack;
        for n in delta.nodes_added.iter().chain(&delta.nodes_updated) {
            self.nodes.insert(n.id, n.clone());
        }
        for id in &delta.nodes_removed {
            self.nodes.remove(id);
        }
        for e in delta.edges_added.iter().chain(&delta.edges_updated) {
            self.edges.insert(e.id, e.clone());
        }
        for id in &delta.edges_removed {
            self.edges.remove(id);
        }
        if let Some(u) = &delta.user {
            self.user = u.clone();
        }
        if let Some(i) = &delta.interactions {
            self.interactions = i.clone();
        }
        if let Some(s) = &delta.selection {
            self.selection = s.clone();
        }
        if let Some(w) = &delta.window {
            self.window = w.clone();
        }
        for p in &delta.prompts_added {
            self.prompts.insert(p.proposal, p.clone());
        }
        for id in &delta.prompts_removed {
            self.prompts.remove(id);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use alloc::string::ToString;
    use alloc::vec;

    fn node(id: u32, x: f64) -> ObjectNode {
        ObjectNode {
            id: NodeId(id),
            label: "box".to_string(),
            synonyms: vec![],
            description: String::new(),
            pose: Pose::at(Vec3::new(x, 0.0, 0.0)),
            extent: Vec3::new(0.1, 0.1, 0.1),
            crop_ref: String::new(),
            last_seen: 0.0,
            held: false,
            last_manipulated: None,
        }
    }

    #[test]
    fn diff_then_apply_round_trips() {
        let a = SessionState::default();
        let mut b = a.clone();
        b.ack = 3;
        b.nodes.insert(NodeId(1), node(1, 0.0));
        b.selection = vec![NodeId(1)];
        let d = a.diff(&b).unwrap();
        assert_eq!(d.delta_seq, 1);
        let mut folded = a.clone();
        folded.apply(&d).unwrap();
        b.delta_seq = 1;
        assert_eq!(folded, b);

        let mut c = b.clone();
        c.nodes.insert(NodeId(1), node(1, 2.0));
        c.nodes.insert(NodeId(2), node(2, 1.0));
        let d2 = b.diff(&c).unwrap();
        assert_eq!(d2.nodes_updated.len(), 1);
        assert_eq!(d2.nodes_added.len(), 1);
        assert!(d2.selection.is_none());
        folded.apply(&d2).unwrap();
        c.delta_seq = 2;
        assert_eq!(folded, c);
    }

    #[test]
    fn no_change_no_delta_and_gaps_rejected() {
        let a = SessionState::default();
        assert!(a.diff(&a.clone()).is_none());
        let mut s = SessionState::default();
        let d = Delta { delta_seq: 2, ..Delta::default() };
        assert_eq!(s.apply(&d), Err(FoldError::Gap { expected: 1, got: 2 }));
    }
}
