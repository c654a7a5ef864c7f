use relgraph_core::engine::{Engine, EngineConfig, EventError, Notice, Step};
use relgraph_core::geometry::{CameraFrame, Intrinsics, Pose, SceneMesh, Vec3};
use relgraph_core::graph::{EdgeState, Initiative};
use relgraph_core::ids::{NodeId, ProposalId};
use relgraph_core::inference::{Disposition, DropReason, ReasonerOutcome, RequestKind};
use relgraph_core::interaction::{EventKind, InteractionEvent};
use relgraph_core::mock::{KnowledgeBase, MockReasoner};
use relgraph_core::schema::RelationType;
use relgraph_core::state::SessionState;
use serde_json::{json, Value};

fn camera() -> CameraFrame {
    CameraFrame::new(Pose::IDENTITY, Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 }, 640, 480).unwrap()
}

fn wall() -> SceneMesh {
    let z = -2.0;
    SceneMesh::new(
        vec![Vec3::new(-5.0, -5.0, z), Vec3::new(5.0, -5.0, z), Vec3::new(5.0, 5.0, z), Vec3::new(-5.0, 5.0, z)],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

/// Raw detection whose box is centered on the wall point `(x, y, -2)`.
fn det(label: &str, x: f64, y: f64) -> Value {
    let u = 320.0 + 250.0 * x;
    let v = 240.0 - 250.0 * y;
    let b = |px: f64, size: f64| px / size * 1000.0;
    json!({
        "box_2d": [b(v - 10.0, 480.0), b(u - 10.0, 640.0), b(v + 10.0, 480.0), b(u + 10.0, 640.0)],
        "label": label,
        "description": format!("a {label}"),
    })
}

struct Harness {
    engine: Engine,
    mock: MockReasoner,
    seq: u64,
    steps: Vec<Step>,
}

impl Harness {
    fn new(kb: Value) -> Self {
        let kb: KnowledgeBase = serde_json::from_value(kb).unwrap();
        Harness {
            engine: Engine::new(EngineConfig::default(), wall(), Some(camera())),
            mock: MockReasoner::new(kb),
            seq: 0,
            steps: Vec::new(),
        }
    }

    fn send(&mut self, time: f64, kind: EventKind) -> Result<Step, EventError> {
        self.seq += 1;
        let step = self.engine.apply(&InteractionEvent { seq: self.seq, time, kind })?;
        self.steps.push(step.clone());
        Ok(step)
    }

    /// Sends and then lets the mock answer every queued request.
    fn act(&mut self, time: f64, kind: EventKind) -> Vec<Step> {
        let first = self.send(time, kind).unwrap();
        let mut out = vec![first];
        let rest = self.engine.run_to_idle(&mut self.mock);
        self.steps.extend(rest.iter().cloned());
        out.extend(rest);
        out
    }

    fn detect(&mut self, time: f64, dets: Vec<Value>) {
        self.act(time, EventKind::DetectionFrame { camera: None, detections: Some(dets), image: None });
    }

    fn pinch(&mut self, time: f64, id: u32) -> Vec<Step> {
        self.act(time, EventKind::PinchSelect { node: Some(NodeId(id)), pixel: None })
    }

    fn folded(&self) -> SessionState {
        let mut s = SessionState::default();
        for d in self.steps.iter().filter_map(|s| s.delta.as_ref()) {
            s.apply(d).unwrap();
        }
        s
    }
}

fn charger_kb() -> Value {
    json!({
        "entries": {
            "laptop charger|phone charger": {
                "type": "comparison", "confidence": 0.55,
                "alternate": {"type": "compatibility", "confidence": 0.45},
                "payload": {"attributes": [
                    {"name": "Output", "valueA": "65 W", "valueB": "20 W"},
                    {"name": "Connector", "valueA": "USB-C", "valueB": "USB-C"},
                    {"name": "Weight", "valueA": "300 g", "valueB": "60 g"}
                ]},
                "payloads": {"compatibility": {"incompatible": false, "warning": "The laptop charger can power the phone."}}
            },
            "charging cable|knife": {
                "type": "compatibility", "confidence": 0.9,
                "payload": {"incompatible": true, "warning": "Keep blades away from live cables."}
            },
            "lemon|orange": {
                "type": "similarity", "confidence": 0.9,
                "payload": {"sameType": true, "theme": "Citrus", "summary": "Both are citrus fruit."}
            }
        },
        "detections": {
            "kitchen.jpg": [
                {"box_2d": [450, 450, 550, 550], "label": "cutting board", "description": "wood"},
                {"box_2d": [100, 100, 200, 200], "label": "a very long six word label", "description": "x"},
                {"box_2d": [900, 900, 1001, 950], "label": "pan", "description": "x"}
            ]
        }
    })
}

fn chargers() -> Harness {
    let mut h = Harness::new(charger_kb());
    h.detect(0.0, vec![det("phone charger", -0.4, 0.0), det("laptop charger", 0.4, 0.0), det("knife", 0.0, 0.8), det("charging cable", 0.0, -0.8)]);
    assert_eq!(h.engine.registry().len(), 4);
    h
}

#[test]
fn two_pinches_issue_one_classification() {
    let mut h = chargers();
    let epoch0 = h.engine.epoch();
    h.send(1.0, EventKind::PinchSelect { node: Some(NodeId(1)), pixel: None }).unwrap();
    assert!(h.engine.poll_request().is_none());
    h.send(1.5, EventKind::PinchSelect { node: Some(NodeId(2)), pixel: None }).unwrap();
    assert_eq!(h.engine.selection(), &[NodeId(1), NodeId(2)]);
    assert!(h.engine.epoch() > epoch0);
    let req = h.engine.poll_request().unwrap();
    assert_eq!(req.kind, RequestKind::Classify);
    let ids: Vec<NodeId> = req.context.nodes.iter().map(|n| n.id).collect();
    assert_eq!(ids, vec![NodeId(1), NodeId(2)]);
    assert_eq!(req.context.selection_order, vec![NodeId(1), NodeId(2)]);
    assert!(h.engine.poll_request().is_none());
}

#[test]
fn close_call_asks_the_user_then_commits_hybrid() {
    let mut h = chargers();
    h.pinch(1.0, 1);
    let steps = h.pinch(1.5, 2);
    let notice = steps.iter().flat_map(|s| &s.notices).next().expect("a prompt");
    let Notice::NeedsDisambiguation { proposal, candidates, prompt, .. } = notice else { panic!("{notice:?}") };
    assert_eq!(prompt, "Compare these two chargers, or show compatibility?");
    assert_eq!(candidates, &vec![RelationType::Comparison, RelationType::Compatibility]);
    assert_eq!(h.engine.snapshot().prompts.len(), 1);
    assert_eq!(h.engine.graph().len(), 0);

    let pid = *proposal;
    let before = h.engine.proposal(pid).cloned();
    let err = h.send(2.0, EventKind::Resolve { proposal: pid, choice: RelationType::Spatial }).unwrap_err();
    assert!(matches!(err, EventError::ChoiceNotOffered { .. }));
    assert_eq!(h.engine.proposal(pid).cloned(), before);

    h.act(2.5, EventKind::Resolve { proposal: pid, choice: RelationType::Comparison });
    let edges: Vec<_> = h.engine.graph().edges().collect();
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0].relation, RelationType::Comparison);
    assert_eq!(edges[0].initiative, Initiative::Hybrid);
    assert_eq!(edges[0].state, EdgeState::Confirmed);
    assert!(h.engine.snapshot().prompts.is_empty());
    assert_eq!(h.folded(), *h.engine.snapshot());
}

#[test]
fn confirming_a_proposal_takes_the_first_candidate() {
    let mut h = chargers();
    h.pinch(1.0, 1);
    h.pinch(1.5, 2);
    h.act(2.0, EventKind::Confirm { target: "p1".parse().unwrap() });
    let e = h.engine.graph().edges().next().unwrap();
    assert_eq!(e.relation, RelationType::Comparison);
}

#[test]
fn prompts_expire_and_reject_drops() {
    let mut h = chargers();
    h.pinch(1.0, 1);
    h.pinch(1.5, 2);
    let steps = h.act(12.0, EventKind::Tick);
    let d = steps[0].delta.as_ref().unwrap();
    assert_eq!(d.prompts_removed, vec![ProposalId(1)]);
    assert_eq!(h.engine.proposal(ProposalId(1)).unwrap().dropped, Some(DropReason::Expired));
    assert!(h.send(13.0, EventKind::Resolve { proposal: ProposalId(1), choice: RelationType::Comparison }).is_err());

    h.pinch(14.0, 2);
    h.pinch(14.5, 2);
    let pid = h.engine.proposals().last().unwrap().id;
    assert_eq!(h.engine.proposal(pid).unwrap().disposition, Disposition::NeedsDisambiguation);
    h.act(15.0, EventKind::Reject { target: relgraph_core::ItemRef::Proposal(pid) });
    assert_eq!(h.engine.proposal(pid).unwrap().disposition, Disposition::Dropped);
    assert_eq!(h.engine.graph().len(), 0);
}

#[test]
fn two_held_items_route_to_comparison() {
    let mut h = chargers();
    h.act(1.0, EventKind::Grab { node: NodeId(1) });
    h.act(1.1, EventKind::Grab { node: NodeId(2) });
    h.send(1.2, EventKind::Aim { held: NodeId(1), node: Some(NodeId(2)), pixel: None }).unwrap();
    let req = h.engine.poll_request().unwrap();
    assert_eq!(req.kind, RequestKind::Extract { relation: RelationType::Comparison });
}

#[test]
fn transient_pair_decays_after_release() {
    let mut h = chargers();
    h.act(1.0, EventKind::Grab { node: NodeId(3) });
    h.act(1.5, EventKind::Aim { held: NodeId(3), node: Some(NodeId(4)), pixel: None });
    let e = h.engine.graph().edges().next().cloned().expect("transient edge");
    assert_eq!(e.state, EdgeState::TransientHeld);
    assert_eq!(e.relation, RelationType::Compatibility);
    assert_eq!(e.initiative, Initiative::UserInitiated);
    assert!(e.emphasized);
    assert_eq!(h.engine.snapshot().user.pointed_id, Some(NodeId(4)));

    h.act(2.0, EventKind::Release { node: NodeId(3) });
    assert_eq!(h.engine.graph().len(), 1, "removal waits for the next tick");
    assert!(h.engine.snapshot().interactions.iter().all(|i| i.node != NodeId(3) || i.kind != relgraph_core::graph::InteractionKind::Holding));
    let steps = h.act(2.5, EventKind::Tick);
    assert_eq!(steps[0].delta.as_ref().unwrap().edges_removed, vec![e.id]);
    assert_eq!(h.engine.graph().len(), 0);
}

#[test]
fn voice_with_deictic_reference() {
    let mut h = chargers();
    h.pinch(1.0, 1);
    h.pinch(1.2, 2);
    h.act(1.3, EventKind::Resolve { proposal: ProposalId(1), choice: RelationType::Compatibility });
    h.act(2.0, EventKind::Voice { utterance: "compare these two".into() });
    let cmp = h.engine.graph().edges().find(|e| e.relation == RelationType::Comparison).expect("comparison edge");
    assert_eq!(cmp.initiative, Initiative::UserInitiated);
    assert!(cmp.emphasized);
    assert_eq!(cmp.state, EdgeState::Tentative);
    assert_eq!(h.engine.graph().len(), 2);
}

#[test]
fn voice_by_name_and_unresolvable_voice() {
    let mut h = chargers();
    h.act(1.0, EventKind::Voice { utterance: "is the knife safe near the charging cable?".into() });
    let e = h.engine.graph().edges().next().expect("edge");
    assert_eq!(e.relation, RelationType::Compatibility);
    let mut ends = e.endpoints.clone();
    ends.sort();
    assert_eq!(ends, vec![NodeId(3), NodeId(4)]);

    let before = h.engine.snapshot().clone();
    let steps = h.act(2.0, EventKind::Voice { utterance: "frobnicate the zork".into() });
    assert!(matches!(steps[0].notices[0], Notice::Clarification { .. }));
    assert!(h.engine.is_idle());
    assert_eq!(h.engine.graph().len(), 1);
    assert_eq!(h.engine.snapshot().edges, before.edges);
}

#[test]
fn stale_epoch_replies_commit_nothing() {
    let mut h = chargers();
    h.send(1.0, EventKind::PinchSelect { node: Some(NodeId(3)), pixel: None }).unwrap();
    h.send(1.1, EventKind::PinchSelect { node: Some(NodeId(4)), pixel: None }).unwrap();
    let req = h.engine.poll_request().unwrap();
    h.send(1.2, EventKind::PinchSelect { node: Some(NodeId(1)), pixel: None }).unwrap();
    let v = json!({"type": "compatibility", "confidence": 0.9, "reason": "r"});
    let step = h.engine.deliver(req.id, req.attempt, ReasonerOutcome::Response(v));
    assert!(step.delta.is_none());
    let p = h.engine.proposal(req.proposal.unwrap()).unwrap();
    assert_eq!(p.dropped, Some(DropReason::Stale));
    assert_eq!(h.engine.graph().len(), 0);
}

#[test]
fn malformed_replies_are_retried_at_most_twice() {
    let mut h = chargers();
    h.send(1.0, EventKind::PinchSelect { node: Some(NodeId(3)), pixel: None }).unwrap();
    h.send(1.1, EventKind::PinchSelect { node: Some(NodeId(4)), pixel: None }).unwrap();
    let r1 = h.engine.poll_request().unwrap();
    h.engine.deliver(r1.id, 1, ReasonerOutcome::Malformed("not json".into()));
    let r2 = h.engine.poll_request().unwrap();
    assert_eq!((r2.id, r2.attempt), (r1.id, 2));
    h.engine.deliver(r2.id, 2, ReasonerOutcome::Response(json!({"type": "compatibility"})));
    let r3 = h.engine.poll_request().unwrap();
    assert_eq!(r3.attempt, 3);
    h.engine.deliver(r3.id, 3, ReasonerOutcome::Timeout);
    assert!(h.engine.poll_request().is_none());
    let p = h.engine.proposal(r1.proposal.unwrap()).unwrap();
    assert!(matches!(p.dropped, Some(DropReason::RetriesExhausted(_))));
    assert_eq!(h.engine.graph().len(), 0);

    // A two-row comparison is an arity error and gets retried.
    let mut h = chargers();
    h.act(1.0, EventKind::Grab { node: NodeId(1) });
    h.act(1.1, EventKind::Grab { node: NodeId(2) });
    h.send(1.2, EventKind::Aim { held: NodeId(1), node: Some(NodeId(2)), pixel: None }).unwrap();
    let r = h.engine.poll_request().unwrap();
    let two_rows = json!({"attributes": [{"name": "a", "valueA": "1", "valueB": "2"}, {"name": "b", "valueA": "1", "valueB": "2"}]});
    h.engine.deliver(r.id, 1, ReasonerOutcome::Response(two_rows));
    let again = h.engine.poll_request().unwrap();
    assert_eq!(again.attempt, 2);
    assert_eq!(again.kind, RequestKind::Extract { relation: RelationType::Comparison });
}

#[test]
fn in_flight_bound_holds() {
    let mut h = chargers();
    for (i, id) in [1, 2, 3, 4, 1, 2, 3].into_iter().enumerate() {
        h.send(1.0 + i as f64 * 0.1, EventKind::PinchSelect { node: Some(NodeId(id)), pixel: None }).unwrap();
    }
    let mut out = Vec::new();
    while let Some(r) = h.engine.poll_request() {
        out.push(r);
    }
    assert_eq!(out.len(), 4);
    assert_eq!(h.engine.in_flight(), 4);
    h.engine.deliver(out[0].id, 1, ReasonerOutcome::Declined);
    assert!(h.engine.poll_request().is_some());
    assert!(h.engine.poll_request().is_none());
}

#[test]
fn rejected_events_leave_no_trace() {
    let mut h = chargers();
    let snap = h.engine.snapshot().clone();
    let epoch = h.engine.epoch();
    assert!(matches!(h.send(1.0, EventKind::PinchSelect { node: Some(NodeId(99)), pixel: None }), Err(EventError::UnknownNode(_))));
    assert!(matches!(h.send(1.0, EventKind::Release { node: NodeId(1) }), Err(EventError::NotHeld(_))));
    assert!(matches!(h.send(1.0, EventKind::Aim { held: NodeId(1), node: Some(NodeId(2)), pixel: None }), Err(EventError::NotHeld(_))));
    assert!(matches!(h.send(1.0, EventKind::Sweep { direction: [1.0, 0.0] }), Err(EventError::EmptySelection)));
    assert!(matches!(h.send(1.0, EventKind::Sweep { direction: [3.0, 0.0] }), Err(EventError::Invalid(_))));
    assert!(matches!(h.send(1.0, EventKind::Confirm { target: "e7".parse().unwrap() }), Err(EventError::UnknownEdge(_))));
    assert_eq!(*h.engine.snapshot(), snap);
    assert_eq!(h.engine.epoch(), epoch);
    assert!(h.engine.is_idle());
    let stale = InteractionEvent { seq: 1, time: 5.0, kind: EventKind::Tick };
    assert!(matches!(h.engine.apply(&stale), Err(EventError::OutOfOrder { .. })));
    let back = InteractionEvent { seq: 100, time: -1.0, kind: EventKind::Tick };
    assert!(matches!(h.engine.apply(&back), Err(EventError::BadTime { .. })));
}

#[test]
fn pixel_pinch_and_sweep() {
    let mut h = chargers();
    // Phone charger sits at (-0.4, 0, -2): pixel (220, 240).
    h.act(1.0, EventKind::PinchSelect { node: None, pixel: Some([220.0, 240.0]) });
    assert_eq!(h.engine.selection(), &[NodeId(1)]);
    h.act(1.5, EventKind::Sweep { direction: [1.0, 0.0] });
    // The wall is perpendicular to view; on the floor plane every node lies
    // on the x axis at z = -2, so sweeping right reaches the nearest one.
    assert_eq!(h.engine.selection().len(), 2);
    assert!(matches!(
        h.send(2.0, EventKind::PinchSelect { node: None, pixel: Some([5.0, 5.0]) }),
        Err(EventError::NoTarget)
    ));
}

#[test]
fn detection_images_go_through_the_reasoner() {
    let mut h = Harness::new(charger_kb());
    let steps = h.act(0.0, EventKind::DetectionFrame { camera: None, detections: None, image: Some("kitchen.jpg".into()) });
    assert_eq!(h.engine.registry().len(), 1);
    let diags: Vec<&String> = steps.iter().flat_map(|s| &s.diagnostics).collect();
    assert_eq!(diags.iter().filter(|d| d.contains("detection skipped")).count(), 2);
    // Same frame again: in-place update, no new node.
    h.act(1.0, EventKind::DetectionFrame { camera: None, detections: None, image: Some("kitchen.jpg".into()) });
    assert_eq!(h.engine.registry().len(), 1);
}

#[test]
fn tentative_edges_decay_unless_confirmed() {
    let mut h = Harness::new(charger_kb());
    h.detect(0.0, vec![det("lemon", -0.4, 0.0), det("orange", 0.4, 0.0), det("knife", 0.0, 0.8), det("charging cable", 0.0, -0.8)]);
    h.pinch(1.0, 1);
    h.pinch(1.1, 2);
    let sim = h.engine.graph().edges().next().cloned().unwrap();
    assert_eq!(sim.relation, RelationType::Similarity);
    assert_eq!(sim.state, EdgeState::Tentative);
    assert_eq!(sim.initiative, Initiative::SystemInitiated);
    h.act(11.0, EventKind::Tick);
    assert_eq!(h.engine.graph().len(), 1, "ttl not yet exceeded");
    h.act(11.2, EventKind::Tick);
    assert_eq!(h.engine.graph().len(), 0);

    h.act(12.0, EventKind::ClearSelection);
    h.pinch(12.1, 3);
    h.pinch(12.2, 4);
    let id = h.engine.graph().edges().next().unwrap().id;
    h.act(12.3, EventKind::Confirm { target: relgraph_core::ItemRef::Edge(id) });
    h.act(1e6, EventKind::Tick);
    assert_eq!(h.engine.graph().len(), 1);
    assert_eq!(h.folded(), *h.engine.snapshot());
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut h = chargers();
        h.pinch(1.0, 1);
        h.pinch(1.5, 2);
        h.act(2.0, EventKind::Resolve { proposal: ProposalId(1), choice: RelationType::Compatibility });
        h.act(3.0, EventKind::Grab { node: NodeId(3) });
        h.act(3.5, EventKind::Aim { held: NodeId(3), node: Some(NodeId(4)), pixel: None });
        h.act(4.0, EventKind::Voice { utterance: "compare the chargers".into() });
        h.act(20.0, EventKind::Tick);
        serde_json::to_string(&h.steps).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resolving_equals_direct_commit() {
    for choice in [RelationType::Comparison, RelationType::Compatibility] {
        let mut h = chargers();
        h.pinch(1.0, 1);
        h.pinch(1.5, 2);
        h.act(2.0, EventKind::Resolve { proposal: ProposalId(1), choice });
        let e = h.engine.graph().edges().next().unwrap().clone();
        let kb: KnowledgeBase = serde_json::from_value(charger_kb()).unwrap();
        let entry = &kb.entries["laptop charger|phone charger"];
        let want = if choice == entry.relation { entry.payload.clone() } else { entry.payloads[&choice].clone() };
        let got = serde_json::to_value(&e.payload).unwrap();
        assert_eq!(got[choice.as_str()], want);
    }
}
