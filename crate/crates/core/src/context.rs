//! Active reasoning context, anchored to the user node.
//!
//! A node's weight is the maximum of the terms that apply to it:
//!
//! | source     | weight                          |
//! |------------|---------------------------------|
//! | selected   | 1.0                             |
//! | held       | 1.0                             |
//! | mentioned  | 0.9                             |
//! | proximate  | 0.7 (within the band, 1.5 m)    |
//! | recent     | 0.5 · exp(−Δt / 30 s), Δt ≤ 30 s |
//!
//! Nodes below the 0.05 cutoff are left out. All constants live in
//! [`ContextConfig`].

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::within_band;
use crate::ids::NodeId;
use crate::registry::RegistrySnapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub selected_weight: f64,
    pub held_weight: f64,
    pub mentioned_weight: f64,
    pub proximate_weight: f64,
    pub recent_weight: f64,
    pub band_radius: f64,
    /// Seconds after a manipulation during which a node counts as recent.
    pub recency_window: f64,
    /// Decay constant of the recency term, seconds.
    pub recency_tau: f64,
    pub cutoff: f64,
    /// Reserved for a field-of-view term; no geometry is attached to it yet.
    #[serde(default)]
    pub fov_weight: Option<f64>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            selected_weight: 1.0,
            held_weight: 1.0,
            mentioned_weight: 0.9,
            proximate_weight: 0.7,
            recent_weight: 0.5,
            band_radius: 1.5,
            recency_window: 30.0,
            recency_tau: 30.0,
            cutoff: 0.05,
            fov_weight: None,
        }
    }
}

/// Why a node is in the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Selected,
    Held,
    Proximate,
    Recent,
    Mentioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub node: NodeId,
    pub weight: f64,
    pub sources: BTreeSet<Source>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub epoch: u64,
    /// Descending weight, ties by node id. The user node is always first.
    pub entries: Vec<WindowEntry>,
    pub selection_order: Vec<NodeId>,
}

impl Default for ContextWindow {
    fn default() -> Self {
        ContextWindow {
            epoch: 0,
            entries: alloc::vec![user_entry()],
            selection_order: Vec::new(),
        }
    }
}

impl ContextWindow {
    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.iter().any(|e| e.node == id)
    }

    pub fn weight(&self, id: NodeId) -> Option<f64> {
        self.entries.iter().find(|e| e.node == id).map(|e| e.weight)
    }

    pub fn members(&self) -> BTreeSet<NodeId> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Object nodes in window order (the user node excluded).
    pub fn object_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().map(|e| e.node).filter(|n| !n.is_user())
    }
}

fn user_entry() -> WindowEntry {
    WindowEntry { node: NodeId::USER, weight: 1.0, sources: BTreeSet::new() }
}

/// Everything the window depends on.
#[derive(Debug, Clone, Copy)]
pub struct ContextInputs<'a> {
    pub snapshot: &'a RegistrySnapshot,
    pub selection: &'a [NodeId],
    pub held: &'a BTreeSet<NodeId>,
    pub mentioned: &'a BTreeSet<NodeId>,
    pub now: f64,
}

/// Pure weighting of every live object node.
pub fn compute_entries(config: &ContextConfig, inputs: ContextInputs<'_>) -> Vec<WindowEntry> {
    let selected: BTreeSet<NodeId> = inputs.selection.iter().copied().collect();
    let mut entries = alloc::vec![user_entry()];
    for node in &inputs.snapshot.nodes {
        let mut weight = 0.0f64;
        let mut sources = BTreeSet::new();
        let mut apply = |w: f64, s: Source| {
            weight = weight.max(w);
            sources.insert(s);
        };
        if selected.contains(&node.id) {
            apply(config.selected_weight, Source::Selected);
        }
        if inputs.held.contains(&node.id) {
            apply(config.held_weight, Source::Held);
        }
        if inputs.mentioned.contains(&node.id) {
            apply(config.mentioned_weight, Source::Mentioned);
        }
        if within_band(&inputs.snapshot.user.pose, node.position(), config.band_radius) {
            apply(config.proximate_weight, Source::Proximate);
        }
        if let Some(t) = node.last_manipulated {
            let dt = (inputs.now - t).max(0.0);
            if dt <= config.recency_window {
                apply(config.recent_weight * libm::exp(-dt / config.recency_tau), Source::Recent);
            }
        }
        if weight >= config.cutoff && weight > 0.0 {
            entries.push(WindowEntry { node: node.id, weight, sources });
        }
    }
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.node.cmp(&b.node)));
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recompute {
    /// Membership or selection order changed; the epoch was bumped.
    pub epoch_bumped: bool,
    /// Anything in the window changed, weights included.
    pub changed: bool,
}

/// Owns the current window and its epoch.
#[derive(Debug, Clone, Default)]
pub struct ContextTracker {
    config: ContextConfig,
    current: ContextWindow,
}

impl ContextTracker {
    pub fn new(config: ContextConfig) -> Self {
        ContextTracker { config, current: ContextWindow::default() }
    }

    pub fn config(&self) -> &ContextConfig {
        &self.config
    }

    pub fn window(&self) -> &ContextWindow {
        &self.current
    }

    pub fn epoch_of(&self) -> u64 {
        self.current.epoch
    }

    pub fn recompute(&mut self, inputs: ContextInputs<'_>) -> Recompute {
        let entries = compute_entries(&self.config, inputs);
        let selection_order: Vec<NodeId> = inputs
            .selection
            .iter()
            .copied()
            .filter(|id| inputs.snapshot.node(*id).is_some())
            .collect();
        let old_members = self.current.members();
        let new_members: BTreeSet<NodeId> = entries.iter().map(|e| e.node).collect();
        let epoch_bumped =
            old_members != new_members || self.current.selection_order != selection_order;
        let epoch = self.current.epoch + u64::from(epoch_bumped);
        let next = ContextWindow { epoch, entries, selection_order };
        let changed = next != self.current;
        self.current = next;
        Recompute { epoch_bumped, changed }
    }
}
