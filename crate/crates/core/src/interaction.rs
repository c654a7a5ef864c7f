//! User and system events, selection sweep, and reference resolution for
//! voice requests.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::ContextWindow;
use crate::geometry::{CameraFrame, Pose, Vec3};
use crate::ids::{ItemRef, NodeId, ProposalId};
use crate::registry::{ObjectNode, RegistrySnapshot, UserNode};
use crate::schema::RelationType;

/// One entry of a session trace. The JSON form is flat:
/// `{"seq": 3, "time": 1.5, "kind": "pinch_select", "node": "n2"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub seq: u64,
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Toggle a node in the selection, by id or by image pixel.
    PinchSelect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pixel: Option<[f64; 2]>,
    },
    ClearSelection,
    /// Advance the selection one step; `direction` is a unit 2-vector in the
    /// view plane (+x right, +y up).
    Sweep { direction: [f64; 2] },
    Voice { utterance: String },
    Grab { node: NodeId },
    Aim {
        held: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pixel: Option<[f64; 2]>,
    },
    Release { node: NodeId },
    Confirm { target: ItemRef },
    Reject { target: ItemRef },
    /// Answer to a disambiguation prompt.
    Resolve { proposal: ProposalId, choice: RelationType },
    /// Scripted detections, or an image reference for the detection adapter.
    DetectionFrame {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        camera: Option<CameraFrame>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detections: Option<Vec<Value>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<String>,
    },
    UserPose { pose: Pose, gaze: Vec3 },
    Tick,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PinchSelect { .. } => "pinch_select",
            EventKind::ClearSelection => "clear_selection",
            EventKind::Sweep { .. } => "sweep",
            EventKind::Voice { .. } => "voice",
            EventKind::Grab { .. } => "grab",
            EventKind::Aim { .. } => "aim",
            EventKind::Release { .. } => "release",
            EventKind::Confirm { .. } => "confirm",
            EventKind::Reject { .. } => "reject",
            EventKind::Resolve { .. } => "resolve",
            EventKind::DetectionFrame { .. } => "detection_frame",
            EventKind::UserPose { .. } => "user_pose",
            EventKind::Tick => "tick",
        }
    }
}

/// Horizontal world direction corresponding to a view-plane sweep.
pub fn sweep_direction(direction: [f64; 2], user: &UserNode) -> Option<Vec3> {
    let flat = |v: Vec3| Vec3::new(v.x, 0.0, v.z).normalized();
    let forward = flat(user.gaze).or_else(|| flat(user.pose.forward())).unwrap_or(Vec3::NEG_Z);
    let right = forward.cross(Vec3::Y);
    (right * direction[0] + forward * direction[1]).normalized()
}

/// Next unselected node inside a cone of `half_angle_deg` around the sweep
/// direction, measured on the horizontal plane from the last selected node.
/// The nearest candidate wins; ties go to the lower id.
pub fn sweep_advance(
    selection: &[NodeId],
    direction: [f64; 2],
    half_angle_deg: f64,
    snapshot: &RegistrySnapshot,
) -> Option<NodeId> {
    let last = snapshot.node(*selection.last()?)?;
    let dir = sweep_direction(direction, &snapshot.user)?;
    let cos_limit = libm::cos(half_angle_deg.to_radians());
    let selected: BTreeSet<NodeId> = selection.iter().copied().collect();
    let mut best: Option<(f64, NodeId)> = None;
    for node in &snapshot.nodes {
        if selected.contains(&node.id) {
            continue;
        }
        let offset = node.position() - last.position();
        let flat = Vec3::new(offset.x, 0.0, offset.z);
        let len = flat.norm();
        if len <= 0.0 || flat.dot(dir) < cos_limit * len {
            continue;
        }
        let d = offset.norm();
        if best.is_none_or(|(bd, bid)| d < bd || (d == bd && node.id < bid)) {
            best = Some((d, node.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Reference resolution failed; the text is shown to the user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clarification(pub String);

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "an", "and", "any", "are", "as", "assemble", "at", "be", "between", "both",
    "by", "can", "check", "compare", "connect", "could", "do", "does", "each", "every", "fit", "for",
    "from", "go", "happen", "happens", "how", "i", "if", "in", "into", "is", "it", "its", "me",
    "my", "no", "not", "of", "on", "one", "onto", "or", "other", "part", "please", "same",
    "safe", "should", "show", "similar", "step", "steps", "that", "the", "them", "these", "they",
    "this", "those", "to", "together", "two", "three", "four", "five", "use", "what", "where",
    "which", "will", "with", "work", "would", "you",
];

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub(crate) fn singular(word: &str) -> String {
    let w = word;
    if w.len() > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    for suffix in ["sses", "ches", "shes", "xes"] {
        if w.len() > suffix.len() + 1 && w.ends_with(suffix) {
            return String::from(&w[..w.len() - 2]);
        }
    }
    if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") {
        return String::from(&w[..w.len() - 1]);
    }
    String::from(w)
}

fn number_word(t: &str) -> Option<usize> {
    match t {
        "two" | "both" | "2" => Some(2),
        "three" | "3" => Some(3),
        "four" | "4" => Some(4),
        "five" | "5" => Some(5),
        _ => None,
    }
}

fn is_stopword(t: &str) -> bool {
    STOPWORDS.contains(&t)
}

fn names(node: &ObjectNode, fold: bool) -> impl Iterator<Item = Vec<String>> + '_ {
    core::iter::once(&node.label)
        .chain(node.synonyms.iter())
        .map(move |n| {
            let tokens = tokenize(n);
            if fold {
                tokens.iter().map(|t| singular(t)).collect()
            } else {
                tokens
            }
        })
        .filter(|t: &Vec<String>| !t.is_empty())
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// A label matches a category phrase when its head noun equals the phrase's
/// head and every modifier in front of the head prefixes one of the label's
/// words (`usb` matches `usb-c`).
fn category_match(label: &[String], head: &str, modifiers: &[String]) -> bool {
    let Some(last) = label.last() else { return false };
    if last != head {
        return false;
    }
    modifiers.iter().all(|m| {
        label.iter().any(|w| w == m || w.starts_with(m.as_str()) || w.split('-').any(|p| p == m))
    })
}

/// Resolves the objects a request refers to. Deictic phrases beat names,
/// and names beat categories. Category lookups prefer the window and fall
/// back to the whole registry.
pub fn resolve_deictic(
    utterance: &str,
    selection_order: &[NodeId],
    window: &ContextWindow,
    snapshot: &RegistrySnapshot,
) -> Result<Vec<NodeId>, Clarification> {
    let tokens: Vec<String> = tokenize(utterance);
    if tokens.is_empty() {
        return Err(Clarification(String::from("What would you like to do?")));
    }

    for (i, t) in tokens.iter().enumerate() {
        let demonstrative = matches!(t.as_str(), "these" | "those" | "this" | "both" | "them" | "it");
        if !demonstrative {
            continue;
        }
        let count = if t == "both" { Some(2) } else { tokens.get(i + 1).and_then(|n| number_word(n)) };
        return match count {
            Some(n) if selection_order.len() >= n => Ok(selection_order[selection_order.len() - n..].to_vec()),
            Some(n) => Err(Clarification(format!(
                "Select {n} objects first; only {} selected.",
                selection_order.len()
            ))),
            None if !selection_order.is_empty() => Ok(selection_order.to_vec()),
            None => Err(Clarification(String::from("Which objects do you mean? Nothing is selected."))),
        };
    }

    // Names match word for word, so a plural ("the USB cables") falls
    // through to the category lookup.
    let named: Vec<NodeId> = snapshot
        .nodes
        .iter()
        .filter(|n| names(n, false).any(|phrase| contains_phrase(&tokens, &phrase)))
        .map(|n| n.id)
        .collect();
    if !named.is_empty() {
        return Ok(named);
    }

    let words: Vec<String> = tokens.iter().map(|t| singular(t)).collect();
    let in_window: BTreeSet<NodeId> = window.members();
    let matches = |restrict: bool| -> Vec<NodeId> {
        let mut out = BTreeSet::new();
        for (i, head) in words.iter().enumerate() {
            if is_stopword(head) {
                continue;
            }
            let mut start = i;
            while start > 0 && !is_stopword(&words[start - 1]) {
                start -= 1;
            }
            let modifiers = &words[start..i];
            for node in &snapshot.nodes {
                if restrict && !in_window.contains(&node.id) {
                    continue;
                }
                if names(node, true).any(|label| category_match(&label, head, modifiers)) {
                    out.insert(node.id);
                }
            }
        }
        out.into_iter().collect()
    };
    let local = matches(true);
    if !local.is_empty() {
        return Ok(local);
    }
    let global = matches(false);
    if !global.is_empty() {
        return Ok(global);
    }
    Err(Clarification(format!("I couldn't find what \"{}\" refers to.", utterance.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::WindowEntry;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(id: u32, label: &str, pos: Vec3) -> ObjectNode {
        ObjectNode {
            id: NodeId(id),
            label: label.to_string(),
            synonyms: vec![],
            description: String::new(),
            pose: Pose::at(pos),
            extent: Vec3::new(0.1, 0.1, 0.1),
            crop_ref: String::new(),
            last_seen: 0.0,
            held: false,
            last_manipulated: None,
        }
    }

    fn snap(nodes: Vec<ObjectNode>) -> RegistrySnapshot {
        RegistrySnapshot { user: UserNode::default(), nodes }
    }

    fn window_of(ids: &[u32]) -> ContextWindow {
        let mut w = ContextWindow::default();
        for &id in ids {
            w.entries.push(WindowEntry { node: NodeId(id), weight: 0.7, sources: BTreeSet::new() });
        }
        w
    }

    #[test]
    fn event_json_shape() {
        let json = r#"{"seq": 4, "time": 2.5, "kind": "pinch_select", "node": "n2"}"#;
        let ev: InteractionEvent = serde_json::from_str(json).unwrap();
        assert_eq!(ev.kind, EventKind::PinchSelect { node: Some(NodeId(2)), pixel: None });
        let tick: InteractionEvent = serde_json::from_str(r#"{"seq":5,"time":3,"kind":"tick"}"#).unwrap();
        assert_eq!(tick.kind, EventKind::Tick);
        let back = serde_json::to_value(&ev).unwrap();
        assert_eq!(back["kind"], "pinch_select");
        assert!(serde_json::from_str::<InteractionEvent>(r#"{"seq":1,"time":0,"kind":"levitate"}"#).is_err());
        let r: InteractionEvent =
            serde_json::from_str(r#"{"seq":6,"time":3,"kind":"resolve","proposal":"p2","choice":"comparison"}"#).unwrap();
        assert_eq!(r.kind, EventKind::Resolve { proposal: ProposalId(2), choice: RelationType::Comparison });
    }

    #[test]
    fn sweep_right_along_a_row() {
        let s = snap(vec![
            node(1, "jar", Vec3::new(-0.5, 0.0, -1.0)),
            node(2, "jar", Vec3::new(0.0, 0.0, -1.0)),
            node(3, "jar", Vec3::new(0.5, 0.0, -1.0)),
        ]);
        assert_eq!(sweep_advance(&[NodeId(1)], [1.0, 0.0], 30.0, &s), Some(NodeId(2)));
        assert_eq!(sweep_advance(&[NodeId(1), NodeId(2)], [1.0, 0.0], 30.0, &s), Some(NodeId(3)));
        assert_eq!(sweep_advance(&[NodeId(3)], [1.0, 0.0], 30.0, &s), None);
        assert_eq!(sweep_advance(&[], [1.0, 0.0], 30.0, &s), None);
    }

    fn sweep_oracle(sel: &[NodeId], dir: [f64; 2], s: &RegistrySnapshot) -> Option<NodeId> {
        // Default user: gaze −z, so view-right is +x and view-up is −z.
        let last = s.nodes.iter().find(|n| n.id == *sel.last().unwrap()).unwrap();
        let want = libm::atan2(-dir[1], dir[0]);
        let mut scored: Vec<(f64, NodeId)> = Vec::new();
        for n in &s.nodes {
            if sel.contains(&n.id) {
                continue;
            }
            let dx = n.pose.position.x - last.pose.position.x;
            let dz = n.pose.position.z - last.pose.position.z;
            if dx == 0.0 && dz == 0.0 {
                continue;
            }
            let mut diff = (libm::atan2(dz, dx) - want).abs();
            if diff > core::f64::consts::PI {
                diff = 2.0 * core::f64::consts::PI - diff;
            }
            if diff.to_degrees() <= 30.0 {
                scored.push((n.pose.position.distance(last.pose.position), n.id));
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.first().map(|x| x.1)
    }

    #[test]
    fn sweep_matches_cone_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.gen_range(2..12);
            let nodes: Vec<ObjectNode> = (1..=n)
                .map(|i| node(i, "item", Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0))))
                .collect();
            let s = snap(nodes);
            let angle: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
            let dir = [libm::cos(angle), libm::sin(angle)];
            let sel = [NodeId(rng.gen_range(1..=n))];
            assert_eq!(sweep_advance(&sel, dir, 30.0, &s), sweep_oracle(&sel, dir, &s));
        }
    }

    #[test]
    fn these_two_takes_the_last_two() {
        let s = snap(vec![node(1, "a", Vec3::ZERO), node(2, "b", Vec3::ZERO), node(3, "c", Vec3::ZERO)]);
        let sel = [NodeId(1), NodeId(2), NodeId(3)];
        let got = resolve_deictic("compare these two", &sel, &window_of(&[1, 2, 3]), &s).unwrap();
        assert_eq!(got, vec![NodeId(2), NodeId(3)]);
        assert!(resolve_deictic("compare these two", &sel[..1], &window_of(&[1]), &s).is_err());
        let all = resolve_deictic("are these similar?", &sel, &window_of(&[1, 2, 3]), &s).unwrap();
        assert_eq!(all, sel.to_vec());
    }

    #[test]
    fn category_phrases() {
        let s = snap(vec![
            node(1, "USB-C cable", Vec3::ZERO),
            node(2, "USB cable", Vec3::ZERO),
            node(3, "Lightning cable", Vec3::ZERO),
            node(4, "laptop", Vec3::ZERO),
        ]);
        let got = resolve_deictic("check the USB cables", &[], &window_of(&[]), &s).unwrap();
        assert_eq!(got, vec![NodeId(1), NodeId(2)]);
        let got = resolve_deictic("which cables fit", &[], &window_of(&[3]), &s).unwrap();
        assert_eq!(got, vec![NodeId(3)]);
        let got = resolve_deictic("which cables fit", &[], &window_of(&[]), &s).unwrap();
        assert_eq!(got, vec![NodeId(1), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn names_beat_categories() {
        let mut knife = node(1, "chef's knife", Vec3::ZERO);
        knife.synonyms.push("knife".to_string());
        let s = snap(vec![knife, node(2, "charging cable", Vec3::ZERO), node(3, "USB cable", Vec3::ZERO)]);
        let got = resolve_deictic("is the knife safe with the charging cable", &[], &window_of(&[]), &s).unwrap();
        assert_eq!(got, vec![NodeId(1), NodeId(2)]);
    }

    #[test]
    fn unresolvable_asks_for_clarification() {
        let s = snap(vec![node(1, "mug", Vec3::ZERO)]);
        assert!(resolve_deictic("frobnicate the zork", &[], &window_of(&[1]), &s).is_err());
        assert!(resolve_deictic("   ", &[], &window_of(&[1]), &s).is_err());
    }

    #[test]
    fn singular_forms() {
        assert_eq!(singular("cables"), "cable");
        assert_eq!(singular("batteries"), "battery");
        assert_eq!(singular("boxes"), "box");
        assert_eq!(singular("glasses"), "glass");
        assert_eq!(singular("bus"), "bus");
    }
}
