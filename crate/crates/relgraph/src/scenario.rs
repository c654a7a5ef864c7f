//! Scenario files: mesh, camera, mock knowledge base and an event trace.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use relgraph_core::engine::EngineConfig;
use relgraph_core::geometry::{CameraFrame, SceneMesh};
use relgraph_core::interaction::{EventKind, InteractionEvent};
use relgraph_core::mock::KnowledgeBase;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub metadata: Metadata,
    #[serde(default)]
    pub config: EngineConfig,
    pub mesh: SceneMesh,
    pub camera: CameraFrame,
    #[serde(default)]
    pub kb: KnowledgeBase,
    #[serde(default)]
    pub trace: Vec<InteractionEvent>,
}

/// A load or validation failure, with a 1-based source position when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
            if let Some(col) = self.column {
                write!(f, ":{col}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for Diagnostic {}

pub fn load(path: &Path) -> Result<Scenario, Diagnostic> {
    let text = std::fs::read_to_string(path).map_err(|e| Diagnostic {
        path: path.to_path_buf(),
        line: None,
        column: None,
        message: format!("cannot read scenario: {e}"),
    })?;
    parse(&text, path)
}

pub fn parse(text: &str, path: &Path) -> Result<Scenario, Diagnostic> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| Diagnostic {
        path: path.to_path_buf(),
        line: Some(e.line()).filter(|l| *l > 0),
        column: Some(e.column()).filter(|c| *c > 0),
        message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
    })?;
    if let Err((segments, message)) = validate(&scenario) {
        let pos = locate(text, &segments);
        return Err(Diagnostic {
            path: path.to_path_buf(),
            line: pos.map(|p| p.0),
            column: pos.map(|p| p.1),
            message,
        });
    }
    Ok(scenario)
}

/// Path into a JSON document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seg {
    Key(String),
    Index(usize),
}

fn key(k: &str) -> Seg {
    Seg::Key(k.to_string())
}

fn validate(s: &Scenario) -> Result<(), (Vec<Seg>, String)> {
    if s.metadata.name.trim().is_empty() {
        return Err((vec![key("metadata"), key("name")], "scenario name is empty".into()));
    }
    let mut last: Option<(u64, f64)> = None;
    let mut labels: BTreeSet<String> = BTreeSet::new();
    for dets in s.kb.detections.values() {
        collect_labels(dets, &mut labels);
    }
    for (i, ev) in s.trace.iter().enumerate() {
        let at = |field: &str| vec![key("trace"), Seg::Index(i), key(field)];
        if let Some((seq, time)) = last {
            if ev.seq <= seq {
                return Err((at("seq"), format!("seq {} does not increase (previous {seq})", ev.seq)));
            }
            if ev.time < time {
                return Err((at("time"), format!("time {} goes backwards (previous {time})", ev.time)));
            }
        }
        if !ev.time.is_finite() || ev.time < 0.0 {
            return Err((at("time"), format!("time {} is not a non-negative number", ev.time)));
        }
        last = Some((ev.seq, ev.time));
        if let EventKind::DetectionFrame { detections: Some(d), .. } = &ev.kind {
            collect_labels(&serde_json::Value::Array(d.clone()), &mut labels);
        }
        if let EventKind::DetectionFrame { image: Some(img), .. } = &ev.kind {
            if !s.kb.detections.contains_key(img) {
                return Err((at("image"), format!("image '{img}' has no detections in the kb")));
            }
        }
    }
    for k in s.kb.entries.keys() {
        for label in k.split('|') {
            if !labels.contains(label) {
                return Err((
                    vec![key("kb"), key("entries"), key(k)],
                    format!("kb label '{label}' never appears in a detection"),
                ));
            }
        }
    }
    Ok(())
}

fn collect_labels(dets: &serde_json::Value, out: &mut BTreeSet<String>) {
    for d in dets.as_array().into_iter().flatten() {
        if let Some(l) = d.get("label").and_then(|l| l.as_str()) {
            out.insert(l.trim().to_lowercase());
        }
        for s in d.get("synonyms").and_then(|s| s.as_array()).into_iter().flatten() {
            if let Some(s) = s.as_str() {
                out.insert(s.trim().to_lowercase());
            }
        }
    }
}

/// 1-based line and column of the value at `path`, or of the deepest
/// prefix that exists.
pub fn locate(text: &str, path: &[Seg]) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut pos = skip_ws(bytes, 0);
    let mut found = pos;
    for seg in path {
        match (seg, bytes.get(pos)) {
            (Seg::Key(k), Some(b'{')) => {
                let mut p = skip_ws(bytes, pos + 1);
                let mut hit = None;
                while bytes.get(p) == Some(&b'"') {
                    let end = skip_string(bytes, p)?;
                    let name: String = serde_json::from_str(&text[p..end]).ok()?;
                    p = skip_ws(bytes, end);
                    p = skip_ws(bytes, p + 1); // ':'
                    if &name == k {
                        hit = Some(p);
                        break;
                    }
                    p = skip_ws(bytes, skip_value(bytes, p)?);
                    if bytes.get(p) == Some(&b',') {
                        p = skip_ws(bytes, p + 1);
                    }
                }
                match hit {
                    Some(h) => pos = h,
                    None => break,
                }
            }
            (Seg::Index(i), Some(b'[')) => {
                let mut p = skip_ws(bytes, pos + 1);
                for _ in 0..*i {
                    p = skip_ws(bytes, skip_value(bytes, p)?);
                    if bytes.get(p) != Some(&b',') {
                        return line_col(text, found);
                    }
                    p = skip_ws(bytes, p + 1);
                }
                pos = p;
            }
            _ => break,
        }
        found = pos;
    }
    line_col(text, found)
}

fn line_col(text: &str, offset: usize) -> Option<(usize, usize)> {
    let before = text.get(..offset)?;
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    Some((line, col))
}

fn skip_ws(b: &[u8], mut p: usize) -> usize {
    while p < b.len() && b[p].is_ascii_whitespace() {
        p += 1;
    }
    p
}

fn skip_string(b: &[u8], p: usize) -> Option<usize> {
    let mut i = p + 1;
    while i < b.len() {
        match b[i] {
            b'\\' => i += 2,
            b'"' => return Some(i + 1),
            _ => i += 1,
        }
    }
    None
}

fn skip_value(b: &[u8], p: usize) -> Option<usize> {
    match b.get(p)? {
        b'"' => skip_string(b, p),
        b'{' | b'[' => {
            let mut depth = 0usize;
            let mut i = p;
            while i < b.len() {
                match b[i] {
                    b'"' => {
                        i = skip_string(b, i)?;
                        continue;
                    }
                    b'{' | b'[' => depth += 1,
                    b'}' | b']' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(i + 1);
                        }
                    }
                    _ => {}
                }
                i += 1;
            }
            None
        }
        _ => {
            let mut i = p;
            while i < b.len() && !matches!(b[i], b',' | b'}' | b']') && !b[i].is_ascii_whitespace() {
                i += 1;
            }
            Some(i)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_nested_values() {
        let text = "{\n  \"a\": 1,\n  \"trace\": [\n    {\"seq\": 1},\n    {\"seq\": 1, \"s\": \"x]}\"}\n  ]\n}";
        assert_eq!(locate(text, &[key("trace"), Seg::Index(1), key("seq")]), Some((5, 13)));
        assert_eq!(locate(text, &[key("a")]), Some((2, 8)));
        assert_eq!(locate(text, &[key("missing")]), Some((1, 1)));
    }
}
