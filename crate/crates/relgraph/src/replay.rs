//! Scenario replay and golden timeline verification.
//!
//! A timeline is JSON Lines: one `initial` record, one `event` record per
//! trace event and one `final` record. Every line is canonical JSON, so two
//! runs of the same scenario produce byte-identical files.

use std::fmt;

use relgraph_core::engine::{Engine, Notice, Step};
use relgraph_core::mock::MockReasoner;
use relgraph_core::state::{Delta, SessionState};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical::{digest, to_canonical};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TimelineRecord {
    Initial {
        scenario: String,
        seed: u64,
        hash: String,
        snapshot: SessionState,
    },
    Event {
        seq: u64,
        kind: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rejected: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        deltas: Vec<Delta>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        notices: Vec<Notice>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        diagnostics: Vec<String>,
        hash: String,
    },
    Final {
        hash: String,
        snapshot: SessionState,
    },
}

impl TimelineRecord {
    pub fn hash(&self) -> &str {
        match self {
            TimelineRecord::Initial { hash, .. }
            | TimelineRecord::Event { hash, .. }
            | TimelineRecord::Final { hash, .. } => hash,
        }
    }
}

/// Settles the reasoner work an event leaves queued.
pub trait Settle {
    fn settle(&mut self, engine: &mut Engine) -> Vec<Step>;
}

/// Answers every request from the scenario's knowledge base, in issue order.
pub struct MockSettle(pub MockReasoner);

impl Settle for MockSettle {
    fn settle(&mut self, engine: &mut Engine) -> Vec<Step> {
        engine.run_to_idle(&mut self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub records: Vec<TimelineRecord>,
}

impl Timeline {
    pub fn final_snapshot(&self) -> Option<&SessionState> {
        match self.records.last() {
            Some(TimelineRecord::Final { snapshot, .. }) => Some(snapshot),
            _ => None,
        }
    }

    /// Canonical JSON Lines text, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&to_canonical(r).expect("timeline records serialize"));
            out.push('\n');
        }
        out
    }
}

fn state_hash(state: &SessionState) -> String {
    digest(state).expect("session state serializes")
}

/// Builds an engine for the scenario.
pub fn engine_for(scenario: &Scenario) -> Engine {
    Engine::new(scenario.config.clone(), scenario.mesh.clone(), Some(scenario.camera))
}

/// Replays with the deterministic mock reasoner.
pub fn run(scenario: &Scenario) -> Timeline {
    run_with(scenario, &mut MockSettle(MockReasoner::new(scenario.kb.clone())))
}

pub fn run_with(scenario: &Scenario, settle: &mut dyn Settle) -> Timeline {
    let mut engine = engine_for(scenario);
    let mut records = vec![TimelineRecord::Initial {
        scenario: scenario.metadata.name.clone(),
        seed: scenario.metadata.seed,
        hash: state_hash(engine.snapshot()),
        snapshot: engine.snapshot().clone(),
    }];
    for event in &scenario.trace {
        let mut deltas = Vec::new();
        let mut notices = Vec::new();
        let mut diagnostics = Vec::new();
        let rejected = match engine.apply(event) {
            Ok(step) => {
                let mut steps = vec![step];
                steps.extend(settle.settle(&mut engine));
                for s in steps {
                    deltas.extend(s.delta);
                    notices.extend(s.notices);
                    diagnostics.extend(s.diagnostics);
                }
                None
            }
            Err(e) => Some(e.to_string()),
        };
        records.push(TimelineRecord::Event {
            seq: event.seq,
            kind: event.kind.name().to_string(),
            rejected,
            deltas,
            notices,
            diagnostics,
            hash: state_hash(engine.snapshot()),
        });
    }
    records.push(TimelineRecord::Final {
        hash: state_hash(engine.snapshot()),
        snapshot: engine.snapshot().clone(),
    });
    Timeline { records }
}

/// First structural difference between an expected and an actual timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Line of the golden file, 1-based.
    pub line: usize,
    /// Seq of the event record, if the difference is inside one.
    pub seq: Option<u64>,
    /// JSON path inside the record, e.g. `deltas[0].edges_added[0].relation`.
    pub field: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(seq) => write!(f, "seq {seq}")?,
            None => write!(f, "line {}", self.line)?,
        }
        write!(f, ", field {}: expected {}, got {}", self.field, self.expected, self.actual)
    }
}

#[derive(Debug)]
pub enum VerifyError {
    /// The golden file is not a timeline.
    Golden { line: usize, message: String },
    Mismatch(Mismatch),
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyError::Golden { line, message } => write!(f, "golden line {line}: {message}"),
            VerifyError::Mismatch(m) => write!(f, "timeline differs at {m}"),
        }
    }
}

impl std::error::Error for VerifyError {}

/// Compares a freshly produced timeline with golden JSONL text.
pub fn verify(actual: &Timeline, golden: &str) -> Result<(), VerifyError> {
    let mut expected = Vec::new();
    for (i, line) in golden.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| VerifyError::Golden { line: i + 1, message: e.to_string() })?;
        expected.push((i + 1, v));
    }
    let got: Vec<Value> = actual
        .records
        .iter()
        .map(|r| {
            // Round-trip through canonical text so float rounding matches.
            serde_json::from_str(&to_canonical(r).expect("records serialize")).expect("canonical text parses")
        })
        .collect();
    for (k, (line, exp)) in expected.iter().enumerate() {
        let seq = exp.get("seq").and_then(Value::as_u64);
        let Some(act) = got.get(k) else {
            return Err(VerifyError::Mismatch(Mismatch {
                line: *line,
                seq,
                field: String::new(),
                expected: short(exp),
                actual: "end of timeline".into(),
            }));
        };
        if let Some((field, e, a)) = first_difference(exp, act, String::new()) {
            return Err(VerifyError::Mismatch(Mismatch { line: *line, seq, field, expected: e, actual: a }));
        }
    }
    if let Some(extra) = got.get(expected.len()) {
        return Err(VerifyError::Mismatch(Mismatch {
            line: expected.last().map_or(1, |(l, _)| l + 1),
            seq: extra.get("seq").and_then(Value::as_u64),
            field: String::new(),
            expected: "end of timeline".into(),
            actual: short(extra),
        }));
    }
    Ok(())
}

fn short(v: &Value) -> String {
    let s = to_canonical(v).unwrap_or_default();
    if s.chars().count() > 120 {
        let cut: String = s.chars().take(117).collect();
        format!("{cut}...")
    } else {
        s
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn first_difference(e: &Value, a: &Value, path: String) -> Option<(String, String, String)> {
    match (e, a) {
        (Value::Object(em), Value::Object(am)) => {
            let mut keys: Vec<&String> = em.keys().chain(am.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = join(&path, k);
                match (em.get(k), am.get(k)) {
                    (Some(x), Some(y)) => {
                        if let Some(d) = first_difference(x, y, p) {
                            return Some(d);
                        }
                    }
                    (Some(x), None) => return Some((p, short(x), "missing".into())),
                    (None, Some(y)) => return Some((p, "missing".into(), short(y))),
                    (None, None) => unreachable!(),
                }
            }
            None
        }
        (Value::Array(ev), Value::Array(av)) => {
            for (i, (x, y)) in ev.iter().zip(av).enumerate() {
                if let Some(d) = first_difference(x, y, format!("{path}[{i}]")) {
                    return Some(d);
                }
            }
            if ev.len() != av.len() {
                return Some((
                    format!("{path}.length"),
                    ev.len().to_string(),
                    av.len().to_string(),
                ));
            }
            None
        }
        (Value::Number(x), Value::Number(y)) if x.as_f64() == y.as_f64() => None,
        _ if e == a => None,
        _ => Some((path, short(e), short(a))),
    }
}
