//! Reasoner output schemas and their validation.
//!
//! Every reasoner response is parsed here before it can touch the graph.
//! Parsing is strict: unknown fields, missing fields, wrong arity, blank
//! strings, out-of-range confidences and ids outside the request context are
//! all rejected as a whole.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::CameraFrame;
use crate::ids::NodeId;
use crate::registry::{label_word_count, Detection2D, PixelRect, MAX_LABEL_WORDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationType {
    Spatial,
    Structural,
    Similarity,
    Comparison,
    Affordance,
    Compatibility,
    Procedural,
    Causality,
}

impl RelationType {
    pub const ALL: [RelationType; 8] = [
        RelationType::Spatial,
        RelationType::Structural,
        RelationType::Similarity,
        RelationType::Comparison,
        RelationType::Affordance,
        RelationType::Compatibility,
        RelationType::Procedural,
        RelationType::Causality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::Spatial => "spatial",
            RelationType::Structural => "structural",
            RelationType::Similarity => "similarity",
            RelationType::Comparison => "comparison",
            RelationType::Affordance => "affordance",
            RelationType::Compatibility => "compatibility",
            RelationType::Procedural => "procedural",
            RelationType::Causality => "causality",
        }
    }

    pub fn parse(s: &str) -> Option<RelationType> {
        RelationType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Ordered types keep endpoint order (tool → targets, cause → effects).
    pub fn is_directed(self) -> bool {
        matches!(
            self,
            RelationType::Affordance
                | RelationType::Compatibility
                | RelationType::Procedural
                | RelationType::Causality
        )
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemaError {
    Malformed(String),
    Arity { field: &'static str, expected: &'static str, got: usize },
    Blank(&'static str),
    ConfidenceOutOfRange(f64),
    UnknownNode(NodeId),
    DuplicateNode(NodeId),
    WrongRelation { expected: RelationType, got: RelationType },
    TooFewEndpoints(usize),
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaError::Malformed(msg) => write!(f, "malformed payload: {msg}"),
            SchemaError::Arity { field, expected, got } => {
                write!(f, "`{field}` must have {expected} entries, got {got}")
            }
            SchemaError::Blank(field) => write!(f, "`{field}` must not be blank"),
            SchemaError::ConfidenceOutOfRange(c) => write!(f, "confidence {c} outside [0, 1]"),
            SchemaError::UnknownNode(id) => write!(f, "node {id} is not in the request context"),
            SchemaError::DuplicateNode(id) => write!(f, "node {id} appears more than once"),
            SchemaError::WrongRelation { expected, got } => {
                write!(f, "expected a {expected} payload, got {got}")
            }
            SchemaError::TooFewEndpoints(n) => write!(f, "relation needs at least 2 endpoints, got {n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AttributeRow {
    pub name: String,
    pub value_a: String,
    pub value_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonPayload {
    pub attributes: Vec<AttributeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimilarityPayload {
    pub same_type: bool,
    pub theme: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralPayload {
    pub parent: NodeId,
    pub children: Vec<NodeId>,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffordancePayload {
    pub tool: NodeId,
    pub targets: Vec<NodeId>,
    pub action: String,
    pub tip: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibilityPayload {
    pub incompatible: bool,
    pub warning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralPayload {
    pub task: String,
    pub description: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalityPayload {
    pub cause: NodeId,
    pub effects: Vec<NodeId>,
    pub action: String,
    pub consequence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preposition {
    #[serde(rename = "on")]
    On,
    #[serde(rename = "in")]
    In,
    #[serde(rename = "near")]
    Near,
    #[serde(rename = "next-to")]
    NextTo,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialPayload {
    pub anchor: NodeId,
    pub referent: NodeId,
    pub preposition: Preposition,
}

/// Validated attributes of one typed edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationPayload {
    Spatial(SpatialPayload),
    Structural(StructuralPayload),
    Similarity(SimilarityPayload),
    Comparison(ComparisonPayload),
    Affordance(AffordancePayload),
    Compatibility(CompatibilityPayload),
    Procedural(ProceduralPayload),
    Causality(CausalityPayload),
}

impl RelationPayload {
    pub fn relation(&self) -> RelationType {
        match self {
            RelationPayload::Spatial(_) => RelationType::Spatial,
            RelationPayload::Structural(_) => RelationType::Structural,
            RelationPayload::Similarity(_) => RelationType::Similarity,
            RelationPayload::Comparison(_) => RelationType::Comparison,
            RelationPayload::Affordance(_) => RelationType::Affordance,
            RelationPayload::Compatibility(_) => RelationType::Compatibility,
            RelationPayload::Procedural(_) => RelationType::Procedural,
            RelationPayload::Causality(_) => RelationType::Causality,
        }
    }

    /// Node ids named inside the payload, in payload order.
    pub fn referenced_nodes(&self) -> Vec<NodeId> {
        match self {
            RelationPayload::Spatial(p) => alloc::vec![p.anchor, p.referent],
            RelationPayload::Structural(p) => {
                core::iter::once(p.parent).chain(p.children.iter().copied()).collect()
            }
            RelationPayload::Affordance(p) => {
                core::iter::once(p.tool).chain(p.targets.iter().copied()).collect()
            }
            RelationPayload::Causality(p) => {
                core::iter::once(p.cause).chain(p.effects.iter().copied()).collect()
            }
            RelationPayload::Similarity(_)
            | RelationPayload::Comparison(_)
            | RelationPayload::Compatibility(_)
            | RelationPayload::Procedural(_) => Vec::new(),
        }
    }

    /// Re-checks a payload that did not come through [`parse_payload`]
    /// (for instance one handed directly to the graph).
    pub fn check(&self, context: &BTreeSet<NodeId>) -> Result<(), SchemaError> {
        match self {
            RelationPayload::Comparison(p) => {
                if p.attributes.len() != 3 {
                    return Err(SchemaError::Arity {
                        field: "attributes",
                        expected: "exactly 3",
                        got: p.attributes.len(),
                    });
                }
                for row in &p.attributes {
                    not_blank(&row.name, "attributes.name")?;
                    not_blank(&row.value_a, "attributes.valueA")?;
                    not_blank(&row.value_b, "attributes.valueB")?;
                }
            }
            RelationPayload::Similarity(p) => {
                not_blank(&p.theme, "theme")?;
                not_blank(&p.summary, "summary")?;
            }
            RelationPayload::Structural(p) => {
                at_least_one(p.children.len(), "children")?;
                at_least_one(p.steps.len(), "steps")?;
                for s in &p.steps {
                    not_blank(s, "steps")?;
                }
            }
            RelationPayload::Affordance(p) => {
                at_least_one(p.targets.len(), "targets")?;
                not_blank(&p.action, "action")?;
                not_blank(&p.tip, "tip")?;
            }
            RelationPayload::Compatibility(p) => not_blank(&p.warning, "warning")?,
            RelationPayload::Procedural(p) => {
                not_blank(&p.task, "task")?;
                not_blank(&p.description, "description")?;
                at_least_one(p.steps.len(), "steps")?;
                for s in &p.steps {
                    not_blank(s, "steps")?;
                }
            }
            RelationPayload::Causality(p) => {
                at_least_one(p.effects.len(), "effects")?;
                not_blank(&p.action, "action")?;
                not_blank(&p.consequence, "consequence")?;
            }
            RelationPayload::Spatial(_) => {}
        }
        let mut seen = BTreeSet::new();
        for id in self.referenced_nodes() {
            if id.is_user() || !context.contains(&id) {
                return Err(SchemaError::UnknownNode(id));
            }
            if !seen.insert(id) {
                return Err(SchemaError::DuplicateNode(id));
            }
        }
        Ok(())
    }
}

fn not_blank(s: &str, field: &'static str) -> Result<(), SchemaError> {
    if s.trim().is_empty() {
        Err(SchemaError::Blank(field))
    } else {
        Ok(())
    }
}

fn at_least_one(n: usize, field: &'static str) -> Result<(), SchemaError> {
    if n == 0 {
        Err(SchemaError::Arity { field, expected: "at least 1", got: 0 })
    } else {
        Ok(())
    }
}

fn from_value<T: DeserializeOwned>(value: &Value) -> Result<T, SchemaError> {
    T::deserialize(value).map_err(|e| SchemaError::Malformed(alloc::format!("{e}")))
}

fn check_confidence(c: f64) -> Result<f64, SchemaError> {
    if c.is_finite() && (0.0..=1.0).contains(&c) {
        Ok(c)
    } else {
        Err(SchemaError::ConfidenceOutOfRange(c))
    }
}

/// Parses the body of an extraction response for `relation`.
pub fn parse_payload(
    relation: RelationType,
    value: &Value,
    context: &BTreeSet<NodeId>,
) -> Result<RelationPayload, SchemaError> {
    let payload = match relation {
        RelationType::Spatial => RelationPayload::Spatial(from_value(value)?),
        RelationType::Structural => RelationPayload::Structural(from_value(value)?),
        RelationType::Similarity => RelationPayload::Similarity(from_value(value)?),
        RelationType::Comparison => RelationPayload::Comparison(from_value(value)?),
        RelationType::Affordance => RelationPayload::Affordance(from_value(value)?),
        RelationType::Compatibility => RelationPayload::Compatibility(from_value(value)?),
        RelationType::Procedural => RelationPayload::Procedural(from_value(value)?),
        RelationType::Causality => RelationPayload::Causality(from_value(value)?),
    };
    payload.check(context)?;
    Ok(payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alternate {
    #[serde(rename = "type")]
    pub relation: RelationType,
    pub confidence: f64,
}

/// Router output: the single best relation type, optionally with a runner-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSelection {
    #[serde(rename = "type")]
    pub chosen: RelationType,
    pub confidence: f64,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<Alternate>,
}

pub fn parse_type_selection(value: &Value) -> Result<TypeSelection, SchemaError> {
    let sel: TypeSelection = from_value(value)?;
    check_confidence(sel.confidence)?;
    not_blank(&sel.reason, "reason")?;
    if let Some(alt) = &sel.alternate {
        check_confidence(alt.confidence)?;
        if alt.relation == sel.chosen {
            return Err(SchemaError::Malformed("alternate repeats the chosen type".into()));
        }
    }
    Ok(sel)
}

/// Voice planning output: which relation to surface and over which nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoicePlan {
    #[serde(rename = "type")]
    pub relation: RelationType,
    pub endpoints: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

pub fn parse_voice_plan(value: &Value, context: &BTreeSet<NodeId>) -> Result<VoicePlan, SchemaError> {
    let plan: VoicePlan = from_value(value)?;
    if let Some(c) = plan.confidence {
        check_confidence(c)?;
    }
    if plan.endpoints.len() < 2 {
        return Err(SchemaError::TooFewEndpoints(plan.endpoints.len()));
    }
    let mut seen = BTreeSet::new();
    for &id in &plan.endpoints {
        if id.is_user() || !context.contains(&id) {
            return Err(SchemaError::UnknownNode(id));
        }
        if !seen.insert(id) {
            return Err(SchemaError::DuplicateNode(id));
        }
    }
    Ok(plan)
}

/// One raw detection entry. `box_2d` is `[ymin, xmin, ymax, xmax]`
/// normalized to 0..=1000 over the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDetection {
    pub box_2d: [f64; 4],
    pub label: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

pub const BOX_SCALE: f64 = 1000.0;

/// Converts and validates one detection entry against `frame`.
pub fn parse_detection(
    value: &Value,
    frame: &CameraFrame,
    crop_ref: String,
) -> Result<Detection2D, SchemaError> {
    let raw: RawDetection = from_value(value)?;
    let [ymin, xmin, ymax, xmax] = raw.box_2d;
    if !raw.box_2d.iter().all(|v| v.is_finite() && (0.0..=BOX_SCALE).contains(v)) {
        return Err(SchemaError::Malformed("box_2d outside 0..=1000".into()));
    }
    if !(xmin < xmax && ymin < ymax) {
        return Err(SchemaError::Malformed("box_2d is empty".into()));
    }
    not_blank(&raw.label, "label")?;
    let words = label_word_count(&raw.label);
    if words > MAX_LABEL_WORDS {
        return Err(SchemaError::Arity { field: "label", expected: "at most 4 words", got: words });
    }
    let (w, h) = (f64::from(frame.width), f64::from(frame.height));
    let det = Detection2D {
        bbox: PixelRect {
            x_min: xmin / BOX_SCALE * w,
            y_min: ymin / BOX_SCALE * h,
            x_max: xmax / BOX_SCALE * w,
            y_max: ymax / BOX_SCALE * h,
        },
        label: String::from(raw.label.trim()),
        description: raw.description,
        crop_ref,
        synonyms: raw.synonyms,
    };
    det.validate(frame).map_err(|_| SchemaError::Malformed("detection outside the frame".into()))?;
    Ok(det)
}
