//! Deterministic reasoner backed by a scenario knowledge base.
//!
//! KB entries are keyed by the sorted, lowercased labels of the nodes a
//! request is about, joined with `|`:
//!
//! ```json
//! {
//!   "entries": {
//!     "laptop charger|phone charger": {
//!       "type": "comparison", "confidence": 0.55,
//!       "alternate": {"type": "compatibility", "confidence": 0.45},
//!       "payload": {"attributes": [...]},
//!       "payloads": {"compatibility": {"incompatible": true, "warning": "..."}}
//!     }
//!   },
//!   "detections": {"frame-001.jpg": [{"box_2d": [..], "label": "..", "description": ".."}]}
//! }
//! ```
//!
//! Payload node references may use labels; they are mapped to ids from the
//! request context. Anything the KB does not cover is declined.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::ids::NodeId;
use crate::inference::{Reasoner, ReasonerContext, ReasonerOutcome, ReasonerRequest, RequestKind};
use crate::interaction::tokenize;
use crate::schema::{Alternate, RelationType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    #[serde(rename = "type")]
    pub relation: RelationType,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<Alternate>,
    pub payload: Value,
    /// Payloads for other relation types over the same nodes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payloads: BTreeMap<RelationType, Value>,
}

impl KbEntry {
    fn payload_for(&self, relation: RelationType) -> Option<&Value> {
        if relation == self.relation {
            Some(&self.payload)
        } else {
            self.payloads.get(&relation)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KnowledgeBase {
    #[serde(default)]
    pub entries: BTreeMap<String, KbEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detections: BTreeMap<String, Value>,
}

/// KB key for a set of labels.
pub fn kb_key<'a>(labels: impl IntoIterator<Item = &'a str>) -> String {
    let mut parts: Vec<String> = labels.into_iter().map(|l| l.trim().to_lowercase()).collect();
    parts.sort();
    parts.join("|")
}

const KEYWORDS: &[(&str, RelationType)] = &[
    ("what happens if", RelationType::Causality),
    ("what happens when", RelationType::Causality),
    ("how do i", RelationType::Procedural),
    ("steps", RelationType::Procedural),
    ("compare", RelationType::Comparison),
    ("fit", RelationType::Compatibility),
    ("work with", RelationType::Compatibility),
    ("safe", RelationType::Compatibility),
    ("similar", RelationType::Similarity),
    ("same", RelationType::Similarity),
    ("part of", RelationType::Structural),
    ("assemble", RelationType::Structural),
    ("where", RelationType::Spatial),
];

/// First keyword rule matching `utterance`, on whole words.
pub fn keyword_relation(utterance: &str) -> Option<RelationType> {
    let words = tokenize(utterance);
    KEYWORDS.iter().find_map(|(phrase, relation)| {
        let p: Vec<String> = tokenize(phrase);
        words.windows(p.len()).any(|w| w == p.as_slice()).then_some(*relation)
    })
}

#[derive(Debug, Clone, Default)]
pub struct MockReasoner {
    kb: KnowledgeBase,
    calls: usize,
}

impl MockReasoner {
    pub fn new(kb: KnowledgeBase) -> Self {
        MockReasoner { kb, calls: 0 }
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    fn entry(&self, context: &ReasonerContext, ids: &[NodeId]) -> Option<&KbEntry> {
        let labels: Vec<&str> = ids
            .iter()
            .filter_map(|id| context.node(*id).map(|n| n.label.as_str()))
            .collect();
        self.kb.entries.get(&kb_key(labels))
    }

    fn answer(&self, request: &ReasonerRequest) -> ReasonerOutcome {
        let ctx = &request.context;
        let all: Vec<NodeId> = ctx.nodes.iter().map(|n| n.id).collect();
        match &request.kind {
            RequestKind::Detect { image, .. } => {
                ReasonerOutcome::Response(self.kb.detections.get(image).cloned().unwrap_or_else(|| json!([])))
            }
            RequestKind::Classify => {
                if let Some(relation) = ctx.utterance.as_deref().and_then(keyword_relation) {
                    return ReasonerOutcome::Response(json!({
                        "type": relation, "confidence": 0.9, "reason": "keyword in request"
                    }));
                }
                match self.entry(ctx, &all) {
                    Some(e) => {
                        let mut v = json!({
                            "type": e.relation,
                            "confidence": e.confidence,
                            "reason": e.reason.clone().unwrap_or_else(|| "known pairing".to_string()),
                        });
                        if let Some(alt) = &e.alternate {
                            v["alternate"] = json!(alt);
                        }
                        ReasonerOutcome::Response(v)
                    }
                    None => ReasonerOutcome::Declined,
                }
            }
            RequestKind::Extract { relation } => match self.entry(ctx, &all).and_then(|e| e.payload_for(*relation)) {
                Some(p) => ReasonerOutcome::Response(resolve_labels(p, ctx)),
                None => ReasonerOutcome::Declined,
            },
            RequestKind::PlanVoice => {
                let mut endpoints = ctx.mentioned.clone();
                if endpoints.len() < 2 {
                    for id in &ctx.selection_order {
                        if !endpoints.contains(id) {
                            endpoints.push(*id);
                        }
                    }
                }
                if endpoints.len() < 2 {
                    return ReasonerOutcome::Declined;
                }
                let keyword = ctx.utterance.as_deref().and_then(keyword_relation);
                let relation = keyword.or_else(|| self.entry(ctx, &endpoints).map(|e| e.relation));
                match relation {
                    Some(r) => ReasonerOutcome::Response(json!({"type": r, "endpoints": endpoints})),
                    None => ReasonerOutcome::Declined,
                }
            }
        }
    }
}

impl Reasoner for MockReasoner {
    fn respond(&mut self, request: &ReasonerRequest) -> ReasonerOutcome {
        self.calls += 1;
        self.answer(request)
    }
}

const NODE_FIELDS: &[&str] = &["parent", "children", "tool", "targets", "cause", "effects", "anchor", "referent"];

/// Replaces label strings in node-reference fields with context ids.
fn resolve_labels(payload: &Value, ctx: &ReasonerContext) -> Value {
    let lookup = |v: &Value| -> Value {
        match v.as_str() {
            Some(s) => match ctx.nodes.iter().find(|n| {
                n.label.eq_ignore_ascii_case(s) || n.synonyms.iter().any(|x| x.eq_ignore_ascii_case(s))
            }) {
                Some(n) => json!(n.id),
                None => v.clone(),
            },
            None => v.clone(),
        }
    };
    let Some(obj) = payload.as_object() else { return payload.clone() };
    let mut out = Map::new();
    for (k, v) in obj {
        let mapped = if NODE_FIELDS.contains(&k.as_str()) {
            match v {
                Value::Array(items) => Value::Array(items.iter().map(lookup).collect()),
                other => lookup(other),
            }
        } else {
            v.clone()
        };
        out.insert(k.clone(), mapped);
    }
    Value::Object(out)
}
