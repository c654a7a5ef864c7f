//! Prompt templates for the HTTP reasoner. The text lives in `prompts/`.

use relgraph_core::inference::{ReasonerRequest, RequestKind};
use relgraph_core::schema::RelationType;

const DETECT: &str = include_str!("../prompts/detect.txt");
const CLASSIFY: &str = include_str!("../prompts/classify.txt");
const PLAN_VOICE: &str = include_str!("../prompts/plan_voice.txt");

fn extract_template(relation: RelationType) -> &'static str {
    match relation {
        RelationType::Spatial => include_str!("../prompts/extract_spatial.txt"),
        RelationType::Structural => include_str!("../prompts/extract_structural.txt"),
        RelationType::Similarity => include_str!("../prompts/extract_similarity.txt"),
        RelationType::Comparison => include_str!("../prompts/extract_comparison.txt"),
        RelationType::Affordance => include_str!("../prompts/extract_affordance.txt"),
        RelationType::Compatibility => include_str!("../prompts/extract_compatibility.txt"),
        RelationType::Procedural => include_str!("../prompts/extract_procedural.txt"),
        RelationType::Causality => include_str!("../prompts/extract_causality.txt"),
    }
}

pub fn template(kind: &RequestKind) -> &'static str {
    match kind {
        RequestKind::Detect { .. } => DETECT,
        RequestKind::Classify => CLASSIFY,
        RequestKind::Extract { relation } => extract_template(*relation),
        RequestKind::PlanVoice => PLAN_VOICE,
    }
}

fn id_list<T: ToString>(ids: &[T]) -> String {
    if ids.is_empty() {
        return "(none)".into();
    }
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Expands the template for `request`.
pub fn render(request: &ReasonerRequest) -> String {
    let ctx = &request.context;
    let image = match &request.kind {
        RequestKind::Detect { image, .. } => image.as_str(),
        _ => "",
    };
    let nodes = serde_json::to_string_pretty(&ctx.nodes).expect("context serializes");
    template(&request.kind)
        .replace("{{context}}", &nodes)
        .replace("{{selection}}", &id_list(&ctx.selection_order))
        .replace("{{mentioned}}", &id_list(&ctx.mentioned))
        .replace("{{utterance}}", ctx.utterance.as_deref().unwrap_or("(none)"))
        .replace("{{image}}", image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use relgraph_core::ids::RequestId;
    use relgraph_core::inference::ReasonerContext;

    #[test]
    fn every_placeholder_is_filled() {
        let mut kinds = vec![RequestKind::Classify, RequestKind::PlanVoice];
        kinds.extend(RelationType::ALL.iter().map(|&relation| RequestKind::Extract { relation }));
        for kind in kinds {
            let req = ReasonerRequest {
                id: RequestId(1),
                attempt: 1,
                proposal: None,
                kind,
                context: ReasonerContext { utterance: Some("compare these".into()), ..Default::default() },
                context_epoch: 0,
            };
            let text = render(&req);
            assert!(!text.contains("{{"), "{text}");
        }
    }
}
