//! Hooks for an external rewriter model: build the request, gate the reply.

use serde::{Deserialize, Serialize};

use super::prompts::{fill, GROUND_TRUTH_REWRITE_TEMPLATE, REASONING_CHAIN_REWRITE_TEMPLATE};
use super::record::{Outcome, SampleRecord, Stage, Verdict};
use super::verify::{extract_final_answer, signals_of, verify_format};
use crate::replay_parser::ParserConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteMode {
    /// Align reasoning and answer with the ground truth.
    GroundTruthAlign,
    /// Normalize into `<think>` form with grounded signals kept verbatim.
    ReasoningChain,
}

pub fn rewrite_request(sample: &SampleRecord, mode: RewriteMode) -> String {
    let gt = sample.ground_truth.display();
    let answer = if sample.final_answer.is_empty() || extract_final_answer(&sample.reasoning).is_some() {
        sample.reasoning.clone()
    } else {
        format!("{}\nFinal answer: {}", sample.reasoning, sample.final_answer)
    };
    let template = match mode {
        RewriteMode::GroundTruthAlign => GROUND_TRUTH_REWRITE_TEMPLATE,
        RewriteMode::ReasoningChain => REASONING_CHAIN_REWRITE_TEMPLATE,
    };
    fill(template, &[("question", &sample.question), ("gt", &gt), ("answer", &answer)])
}

/// Applies a rewriter reply if it survives format verification. On success
/// the returned sample carries the new reasoning and final answer with no
/// verdicts; on failure the reject verdict is returned.
pub fn accept_rewrite(
    sample: &SampleRecord,
    response: &str,
    mode: RewriteMode,
    parser: ParserConfig,
) -> Result<SampleRecord, Verdict> {
    let mut candidate = sample.clone();
    candidate.reasoning = response.trim().to_string();
    candidate.final_answer = String::new();
    candidate.verdicts.clear();

    let verdict = verify_format(&candidate, parser);
    if verdict.outcome != Outcome::Pass {
        return Err(verdict);
    }
    if mode == RewriteMode::ReasoningChain {
        let text = &candidate.reasoning;
        let open = text.find("<think>");
        let close = text.find("</think>");
        match (open, close) {
            (Some(o), Some(c)) if o < c => {}
            _ => return Err(Verdict::reject(Stage::Format, "missing_think_tags")),
        }
        let marker_count = text.matches("Final answer:").count() + text.matches("Final Answer:").count();
        if marker_count != 1 {
            return Err(Verdict::reject(Stage::Format, "multiple_final_answers"));
        }
        if signals_of(text, parser).is_empty() {
            return Err(Verdict::reject(Stage::Format, "no_grounding"));
        }
    }
    candidate.final_answer = extract_final_answer(&candidate.reasoning)
        .unwrap_or_default()
        .to_string();
    Ok(candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::record::TaskType;

    fn sample() -> SampleRecord {
        SampleRecord {
            id: "s1".into(),
            image: "a.png".into(),
            question: "What color is the car?".into(),
            reasoning: "The car <sot>{\"bbox_2d\":[1,2,30,40],\"label\":\"car\"}<eot> looks blue.".into(),
            final_answer: "blue".into(),
            ground_truth: "red".into(),
            task_type: TaskType::OpenEnded,
            source: "GQA".into(),
            data_type: "General VQA".into(),
            verdicts: vec![],
        }
    }

    #[test]
    fn ground_truth_prompt_fields() {
        let p = rewrite_request(&sample(), RewriteMode::GroundTruthAlign);
        assert!(p.contains("Question:What color is the car?"));
        assert!(p.contains("Ground truth: red"));
        assert!(p.contains("looks blue.\nFinal answer: blue"));
        assert!(!p.contains("{gt}"));
    }

    #[test]
    fn reasoning_chain_prompt_requires_think() {
        let p = rewrite_request(&sample(), RewriteMode::ReasoningChain);
        assert!(p.contains("<think></think>"));
        assert!(p.contains("single-line final answer"));
    }

    #[test]
    fn good_reply_is_accepted() {
        let reply = "<think>The car <sot>{\"bbox_2d\":[1,2,30,40],\"label\":\"car\"}<eot> is red.</think>\nFinal answer: red";
        let out = accept_rewrite(&sample(), reply, RewriteMode::ReasoningChain, ParserConfig::default()).unwrap();
        assert_eq!(out.final_answer, "red");
        assert!(out.verdicts.is_empty());
    }

    #[test]
    fn malformed_reply_stays_rejected() {
        let reply = "<think>car <sot>[1,2,3]<eot></think>\nFinal answer: red";
        let v = accept_rewrite(&sample(), reply, RewriteMode::GroundTruthAlign, ParserConfig::default()).unwrap_err();
        assert_eq!(v.outcome, Outcome::Reject);
        assert_eq!(v.reason.as_deref(), Some("bad_box_arity"));

        let no_marker = accept_rewrite(&sample(), "just text", RewriteMode::GroundTruthAlign, ParserConfig::default()).unwrap_err();
        assert_eq!(no_marker.reason.as_deref(), Some("missing_final_answer"));
    }

    #[test]
    fn reasoning_chain_gate_checks_shape() {
        let cfg = ParserConfig::default();
        let no_think = "car <sot>[1,2,30,40]<eot>\nFinal answer: red";
        assert_eq!(
            accept_rewrite(&sample(), no_think, RewriteMode::ReasoningChain, cfg).unwrap_err().reason.as_deref(),
            Some("missing_think_tags")
        );
        let no_signal = "<think>it is red</think>\nFinal answer: red";
        assert_eq!(
            accept_rewrite(&sample(), no_signal, RewriteMode::ReasoningChain, cfg).unwrap_err().reason.as_deref(),
            Some("no_grounding")
        );
        assert!(accept_rewrite(&sample(), no_signal, RewriteMode::GroundTruthAlign, cfg).is_ok());
    }
}
