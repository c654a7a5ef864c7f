//! Scene registry: anchors 2D detections into persistent object nodes and
//! tracks the user node.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{pixel_to_ray, raycast, CameraFrame, Pose, SceneMesh, Vec3};
use crate::ids::NodeId;

pub const MAX_LABEL_WORDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    /// Same-label detections closer than this to a node update it in place.
    pub reid_radius: f64,
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig { reid_radius: 0.15, min_extent: 0.01, max_extent: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegistryError {
    /// The ray through the detection missed the scene mesh.
    Unanchorable,
    InvalidDetection(&'static str),
    UnknownNode(NodeId),
    NotHeld(NodeId),
    NonFinite(&'static str),
}

impl fmt::Display for RegistryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegistryError::Unanchorable => f.write_str("unanchorable detection"),
            RegistryError::InvalidDetection(why) => write!(f, "invalid detection: {why}"),
            RegistryError::UnknownNode(id) => write!(f, "unknown node {id}"),
            RegistryError::NotHeld(id) => write!(f, "node {id} is not held"),
            RegistryError::NonFinite(what) => write!(f, "{what} is not finite"),
        }
    }
}

/// Axis-aligned pixel rectangle, `min` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelRect {
    pub fn center(&self) -> [f64; 2] {
        [(self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub bbox: PixelRect,
    pub label: String,
    pub description: String,
    pub crop_ref: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

pub fn label_word_count(label: &str) -> usize {
    label.split_whitespace().count()
}

impl Detection2D {
    pub fn validate(&self, frame: &CameraFrame) -> Result<(), RegistryError> {
        let b = &self.bbox;
        let finite = [b.x_min, b.y_min, b.x_max, b.y_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(RegistryError::InvalidDetection("bbox is not finite"));
        }
        if !(b.x_min < b.x_max && b.y_min < b.y_max) {
            return Err(RegistryError::InvalidDetection("bbox is empty"));
        }
        if b.x_min < 0.0
            || b.y_min < 0.0
            || b.x_max > f64::from(frame.width)
            || b.y_max > f64::from(frame.height)
        {
            return Err(RegistryError::InvalidDetection("bbox outside the frame"));
        }
        let words = label_word_count(&self.label);
        if words == 0 {
            return Err(RegistryError::InvalidDetection("empty label"));
        }
        if words > MAX_LABEL_WORDS {
            return Err(RegistryError::InvalidDetection("label longer than four words"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: NodeId,
    pub label: String,
    pub synonyms: Vec<String>,
    pub description: String,
    pub pose: Pose,
    /// Approximate axis-aligned half-sizes in meters.
    pub extent: Vec3,
    pub crop_ref: String,
    pub last_seen: f64,
    pub held: bool,
    /// Last grab, aim or release involving this node.
    pub last_manipulated: Option<f64>,
}

impl ObjectNode {
    pub fn position(&self) -> Vec3 {
        self.pose.position
    }

    /// Case-insensitive match against the label or any synonym.
    pub fn answers_to(&self, name: &str) -> bool {
        eq_fold(&self.label, name) || self.synonyms.iter().any(|s| eq_fold(s, name))
    }
}

fn eq_fold(a: &str, b: &str) -> bool {
    let a = a.trim();
    let b = b.trim();
    a.len() == b.len() && a.chars().zip(b.chars()).all(|(x, y)| x.to_lowercase().eq(y.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserNode {
    pub pose: Pose,
    pub gaze: Vec3,
    pub held_ids: BTreeSet<NodeId>,
    pub pointed_id: Option<NodeId>,
    pub updated_at: f64,
}

impl Default for UserNode {
    fn default() -> Self {
        UserNode {
            pose: Pose::IDENTITY,
            gaze: Vec3::NEG_Z,
            held_ids: BTreeSet::new(),
            pointed_id: None,
            updated_at: 0.0,
        }
    }
}

/// Point-in-time copy of the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RegistrySnapshot {
    pub user: UserNode,
    pub nodes: Vec<ObjectNode>,
}

impl RegistrySnapshot {
    pub fn node(&self, id: NodeId) -> Option<&ObjectNode> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub id: NodeId,
    pub created: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    config: RegistryConfig,
    nodes: BTreeMap<NodeId, ObjectNode>,
    user: UserNode,
    next_id: u32,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Registry { config, nodes: BTreeMap::new(), user: UserNode::default(), next_id: 1 }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&ObjectNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ObjectNode> {
        self.nodes.values()
    }

    /// Object nodes and the user node are live; nodes are never removed.
    pub fn is_live(&self, id: NodeId) -> bool {
        id.is_user() || self.nodes.contains_key(&id)
    }

    pub fn user(&self) -> &UserNode {
        &self.user
    }

    pub fn register_detection(
        &mut self,
        frame: &CameraFrame,
        det: &Detection2D,
        mesh: &SceneMesh,
        now: f64,
    ) -> Result<Registration, RegistryError> {
        self.register_frame(frame, core::slice::from_ref(det), mesh, now)
            .pop()
            .expect("one result per detection")
    }

    /// Registers every detection of one frame. Matching runs against the
    /// nodes as they were before the frame and each node is claimed by at
    /// most one detection (closest pairs first), so replaying a frame
    /// updates the same nodes instead of drifting or duplicating.
    pub fn register_frame(
        &mut self,
        frame: &CameraFrame,
        dets: &[Detection2D],
        mesh: &SceneMesh,
        now: f64,
    ) -> Vec<Result<Registration, RegistryError>> {
        let mut hits: Vec<Result<(Vec3, f64), RegistryError>> = Vec::with_capacity(dets.len());
        for det in dets {
            hits.push(det.validate(frame).and_then(|()| {
                let ray = pixel_to_ray(frame, det.bbox.center())
                    .map_err(|_| RegistryError::InvalidDetection("bbox center outside the frame"))?;
                raycast(mesh, &ray)
                    .map(|h| (h.point, h.distance))
                    .ok_or(RegistryError::Unanchorable)
            }));
        }

        let radius = self.config.reid_radius;
        let mut pairs: Vec<(f64, usize, NodeId)> = Vec::new();
        for (i, hit) in hits.iter().enumerate() {
            let Ok((point, _)) = hit else { continue };
            for node in self.nodes.values() {
                if !labels_match(node, &dets[i]) {
                    continue;
                }
                let d = node.position().distance(*point);
                if d <= radius {
                    pairs.push((d, i, node.id));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut assigned: BTreeMap<usize, NodeId> = BTreeMap::new();
        let mut claimed: BTreeSet<NodeId> = BTreeSet::new();
        for (_, i, id) in pairs {
            if assigned.contains_key(&i) || claimed.contains(&id) {
                continue;
            }
            assigned.insert(i, id);
            claimed.insert(id);
        }

        let mut out = Vec::with_capacity(dets.len());
        for (i, hit) in hits.into_iter().enumerate() {
            let det = &dets[i];
            let (point, distance) = match hit {
                Ok(h) => h,
                Err(e) => {
                    out.push(Err(e));
                    continue;
                }
            };
            let extent = self.estimate_extent(frame, det, distance);
            let pose = Pose::at(point);
            match assigned.get(&i) {
                Some(&id) => {
                    let node = self.nodes.get_mut(&id).expect("assigned node exists");
                    if !eq_fold(&node.label, &det.label) && !node.synonyms.iter().any(|s| eq_fold(s, &node.label)) {
                        let old = core::mem::take(&mut node.label);
                        node.synonyms.push(old);
                    }
                    node.label = det.label.clone();
                    node.synonyms.retain(|s| !eq_fold(s, &det.label));
                    for s in &det.synonyms {
                        if !node.answers_to(s) {
                            node.synonyms.push(s.clone());
                        }
                    }
                    node.description = det.description.clone();
                    node.pose = pose;
                    node.extent = extent;
                    node.crop_ref = det.crop_ref.clone();
                    node.last_seen = now;
                    out.push(Ok(Registration { id, created: false }));
                }
                None => {
                    let id = NodeId(self.next_id);
                    self.next_id += 1;
                    let mut synonyms: Vec<String> = Vec::new();
                    for s in &det.synonyms {
                        if !eq_fold(s, &det.label) && !synonyms.iter().any(|x| eq_fold(x, s)) {
                            synonyms.push(s.clone());
                        }
                    }
                    self.nodes.insert(
                        id,
                        ObjectNode {
                            id,
                            label: det.label.clone(),
                            synonyms,
                            description: det.description.clone(),
                            pose,
                            extent,
                            crop_ref: det.crop_ref.clone(),
                            last_seen: now,
                            held: false,
                            last_manipulated: None,
                        },
                    );
                    out.push(Ok(Registration { id, created: true }));
                }
            }
        }
        out
    }

    /// Pinhole similar triangles: size in pixels × range / focal length.
    fn estimate_extent(&self, frame: &CameraFrame, det: &Detection2D, distance: f64) -> Vec3 {
        let (lo, hi) = (self.config.min_extent, self.config.max_extent);
        let half_w = (det.bbox.width() * distance / frame.intrinsics.fx * 0.5).clamp(lo, hi);
        let half_h = (det.bbox.height() * distance / frame.intrinsics.fy * 0.5).clamp(lo, hi);
        Vec3::new(half_w, half_h, half_w.min(half_h))
    }

    pub fn update_user(&mut self, pose: Pose, gaze: Vec3, now: f64) -> Result<(), RegistryError> {
        if !now.is_finite() {
            return Err(RegistryError::NonFinite("timestamp"));
        }
        let gaze = crate::geometry::unit_direction(gaze, "gaze")
            .map_err(|_| RegistryError::NonFinite("gaze direction"))?;
        self.user.pose = pose;
        self.user.gaze = gaze;
        self.user.updated_at = now;
        Ok(())
    }

    pub fn grab(&mut self, id: NodeId, now: f64) -> Result<(), RegistryError> {
        let node = self.nodes.get_mut(&id).ok_or(RegistryError::UnknownNode(id))?;
        node.held = true;
        node.last_manipulated = Some(now);
        self.user.held_ids.insert(id);
        Ok(())
    }

    pub fn release(&mut self, id: NodeId, now: f64) -> Result<(), RegistryError> {
        let node = self.nodes.get_mut(&id).ok_or(RegistryError::UnknownNode(id))?;
        if !node.held {
            return Err(RegistryError::NotHeld(id));
        }
        node.held = false;
        node.last_manipulated = Some(now);
        self.user.held_ids.remove(&id);
        if self.user.pointed_id == Some(id) {
            self.user.pointed_id = None;
        }
        Ok(())
    }

    pub fn touch(&mut self, id: NodeId, now: f64) -> Result<(), RegistryError> {
        let node = self.nodes.get_mut(&id).ok_or(RegistryError::UnknownNode(id))?;
        node.last_manipulated = Some(now);
        Ok(())
    }

    pub fn point_at(&mut self, id: Option<NodeId>) -> Result<(), RegistryError> {
        if let Some(id) = id {
            if !self.nodes.contains_key(&id) {
                return Err(RegistryError::UnknownNode(id));
            }
        }
        self.user.pointed_id = id;
        Ok(())
    }

    pub fn nodes_snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot { user: self.user.clone(), nodes: self.nodes.values().cloned().collect() }
    }
}

fn labels_match(node: &ObjectNode, det: &Detection2D) -> bool {
    node.answers_to(&det.label) || det.synonyms.iter().any(|s| eq_fold(s, &node.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use alloc::string::ToString;
    use alloc::vec;

    fn camera() -> CameraFrame {
        CameraFrame::new(
            Pose::IDENTITY,
            Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 },
            640,
            480,
        )
        .unwrap()
    }

    fn wall() -> SceneMesh {
        let z = -2.0;
        SceneMesh::new(
            vec![
                Vec3::new(-5.0, -5.0, z),
                Vec3::new(5.0, -5.0, z),
                Vec3::new(5.0, 5.0, z),
                Vec3::new(-5.0, 5.0, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    /// Detection whose bbox center unprojects to `(x, y, -2)` on the wall.
    fn det_at(label: &str, x: f64, y: f64) -> Detection2D {
        let u = 320.0 + 500.0 * x / 2.0;
        let v = 240.0 - 500.0 * y / 2.0;
        Detection2D {
            bbox: PixelRect { x_min: u - 10.0, y_min: v - 10.0, x_max: u + 10.0, y_max: v + 10.0 },
            label: label.to_string(),
            description: String::new(),
            crop_ref: "crop".to_string(),
            synonyms: vec![],
        }
    }

    #[test]
    fn first_registration_creates_node_at_hit() {
        let mut reg = Registry::new(RegistryConfig::default());
        let r = reg.register_detection(&camera(), &det_at("mug", 0.0, 0.0), &wall(), 1.0).unwrap();
        assert!(r.created);
        let node = reg.node(r.id).unwrap();
        assert_eq!(node.position(), Vec3::new(0.0, 0.0, -2.0));
    }

    /// Nearest live node with a matching label within the radius, by brute force.
    fn nearest_same_label(reg: &Registry, label: &str, p: Vec3, radius: f64) -> Option<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for n in reg.nodes() {
            if n.label.to_lowercase() != label.to_lowercase() {
                continue;
            }
            let d = ((n.pose.position.x - p.x).powi(2)
                + (n.pose.position.y - p.y).powi(2)
                + (n.pose.position.z - p.z).powi(2))
            .sqrt();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, n.id));
            }
        }
        best.map(|(_, id)| id)
    }

    #[test]
    fn nearby_same_label_updates_in_place() {
        let mut reg = Registry::new(RegistryConfig::default());
        let first = reg.register_detection(&camera(), &det_at("Mug", 0.0, 0.0), &wall(), 1.0).unwrap();
        let target = Vec3::new(0.05, 0.0, -2.0);
        let expected = nearest_same_label(&reg, "mug", target, 0.15);
        assert_eq!(expected, Some(first.id));
        let second = reg.register_detection(&camera(), &det_at("mug", 0.05, 0.0), &wall(), 2.0).unwrap();
        assert_eq!(second.id, first.id);
        assert!(!second.created);
        assert_eq!(reg.len(), 1);
        let node = reg.node(first.id).unwrap();
        assert!((node.position().x - 0.05).abs() < 1e-12);
        assert_eq!(node.last_seen, 2.0);
        assert_eq!(node.label, "mug");
    }

    #[test]
    fn same_label_far_away_is_a_new_node() {
        let mut reg = Registry::new(RegistryConfig::default());
        let a = reg.register_detection(&camera(), &det_at("mug", 0.0, 0.0), &wall(), 1.0).unwrap();
        let b = reg.register_detection(&camera(), &det_at("mug", 0.5, 0.0), &wall(), 1.0).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn different_label_nearby_is_a_new_node() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.register_detection(&camera(), &det_at("mug", 0.0, 0.0), &wall(), 1.0).unwrap();
        reg.register_detection(&camera(), &det_at("spoon", 0.02, 0.0), &wall(), 1.0).unwrap();
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn synonym_match_reidentifies() {
        let mut reg = Registry::new(RegistryConfig::default());
        let mut d = det_at("coffee mug", 0.0, 0.0);
        d.synonyms = vec!["cup".to_string()];
        let a = reg.register_detection(&camera(), &d, &wall(), 1.0).unwrap();
        let b = reg.register_detection(&camera(), &det_at("cup", 0.01, 0.0), &wall(), 2.0).unwrap();
        assert_eq!(a.id, b.id);
        let node = reg.node(a.id).unwrap();
        assert_eq!(node.label, "cup");
        assert!(node.answers_to("coffee mug"));
    }

    #[test]
    fn miss_is_unanchorable() {
        let mut reg = Registry::new(RegistryConfig::default());
        let err = reg.register_detection(&camera(), &det_at("mug", 0.0, 0.0), &SceneMesh::empty(), 1.0);
        assert_eq!(err, Err(RegistryError::Unanchorable));
        assert!(reg.is_empty());
    }

    #[test]
    fn detection_validation() {
        let f = camera();
        let mut d = det_at("a long label here", 0.0, 0.0);
        assert!(d.validate(&f).is_ok());
        d.label = "one two three four five".to_string();
        assert!(d.validate(&f).is_err());
        let mut d = det_at("mug", 0.0, 0.0);
        d.bbox.x_max = 700.0;
        assert!(d.validate(&f).is_err());
        let mut d = det_at("mug", 0.0, 0.0);
        d.bbox.x_max = d.bbox.x_min;
        assert!(d.validate(&f).is_err());
    }

    #[test]
    fn extent_is_clamped() {
        let mut reg = Registry::new(RegistryConfig::default());
        let mut d = det_at("poster", 0.0, 0.0);
        d.bbox = PixelRect { x_min: 0.0, y_min: 0.0, x_max: 640.0, y_max: 480.0 };
        let r = reg.register_detection(&camera(), &d, &wall(), 0.0).unwrap();
        let e = reg.node(r.id).unwrap().extent;
        // 640 px * 2 m / 500 px / 2 = 1.28 m
        assert!((e.x - 1.28).abs() < 1e-12);
        let mut tiny = det_at("pin", 0.5, 0.5);
        tiny.bbox.x_max = tiny.bbox.x_min + 0.5;
        let r = reg.register_detection(&camera(), &tiny, &wall(), 0.0).unwrap();
        assert_eq!(reg.node(r.id).unwrap().extent.x, 0.01);
    }

    #[test]
    fn user_updates_are_last_write_wins() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.update_user(Pose::IDENTITY, Vec3::NEG_Z, 1.0).unwrap();
        assert_eq!(reg.user().pose, Pose::IDENTITY);
        assert_eq!(reg.user().gaze, Vec3::NEG_Z);
        let p2 = Pose::at(Vec3::new(1.0, 1.6, 0.0));
        reg.update_user(p2, Vec3::X, 2.0).unwrap();
        assert_eq!(reg.user().pose, p2);
        assert_eq!(reg.user().gaze, Vec3::X);
        assert_eq!(reg.user().updated_at, 2.0);
        assert!(reg.update_user(p2, Vec3::new(0.0, 0.0, 0.0), 3.0).is_err());
    }

    #[test]
    fn replayed_user_trace_ends_at_last_input() {
        let mut reg = Registry::new(RegistryConfig::default());
        let mut last = Pose::IDENTITY;
        for i in 0..50 {
            let t = f64::from(i);
            last = Pose::at(Vec3::new(t * 0.1, 1.6, -t * 0.05));
            reg.update_user(last, Vec3::NEG_Z, t).unwrap();
        }
        assert_eq!(reg.user().pose, last);
        assert_eq!(reg.user().updated_at, 49.0);
    }

    #[test]
    fn snapshot_cardinality() {
        let mut reg = Registry::new(RegistryConfig::default());
        assert!(reg.nodes_snapshot().nodes.is_empty());
        for i in 0..5 {
            reg.register_detection(&camera(), &det_at("box", f64::from(i) * 0.25, 0.0), &wall(), 0.0).unwrap();
        }
        let snap = reg.nodes_snapshot();
        assert_eq!(snap.nodes.len(), 5);
        assert_eq!(snap.user, *reg.user());
    }

    #[test]
    fn grab_and_release_keep_held_consistent() {
        let mut reg = Registry::new(RegistryConfig::default());
        let r = reg.register_detection(&camera(), &det_at("mug", 0.0, 0.0), &wall(), 0.0).unwrap();
        reg.grab(r.id, 1.0).unwrap();
        assert!(reg.node(r.id).unwrap().held);
        assert!(reg.user().held_ids.contains(&r.id));
        reg.release(r.id, 2.0).unwrap();
        assert!(!reg.node(r.id).unwrap().held);
        assert!(reg.user().held_ids.is_empty());
        assert_eq!(reg.release(r.id, 3.0), Err(RegistryError::NotHeld(r.id)));
        assert_eq!(reg.grab(NodeId(99), 3.0), Err(RegistryError::UnknownNode(NodeId(99))));
    }

    #[test]
    fn identical_frame_twice_is_idempotent() {
        let mut reg = Registry::new(RegistryConfig::default());
        let frame = vec![det_at("mug", 0.0, 0.0), det_at("mug", 0.1, 0.0), det_at("mug", 0.2, 0.0), det_at("pen", 0.0, 0.05)];
        reg.register_frame(&camera(), &frame, &wall(), 0.0);
        let before = reg.nodes_snapshot();
        reg.register_frame(&camera(), &frame, &wall(), 0.0);
        assert_eq!(before, reg.nodes_snapshot());
        assert_eq!(before.nodes.len(), 4);
    }
}
