//! The three rejection-sampling gates: format, correctness, grounding.

use serde::{Deserialize, Serialize};

use super::anls::{anls_best, DEFAULT_ANLS_THRESHOLD};
use super::judge::{parse_judge_score, JudgeClient, JudgeRequest, JudgeTask, DEFAULT_JUDGE_THRESHOLD};
use super::prompts::{fill, CORRECTNESS_TEMPLATE, GROUNDING_TEMPLATE};
use super::record::{Outcome, SampleRecord, Stage, TaskType, Verdict};
use crate::feature_pool::PixelGrid;
use crate::geometry::{expand_box, validate_box, ImageFrame};
use crate::replay_parser::{parse_all, ParserConfig, ReplaySignal, StreamEvent};

pub const FINAL_ANSWER_MARKERS: [&str; 2] = ["Final Answer:", "Final answer:"];
pub const DEFAULT_EXPAND_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// ANLS similarity floor `tau`; similarities below it score 0.
    pub anls_threshold: f64,
    /// ANLS at or above this passes unchanged.
    pub anls_pass: f64,
    /// ANLS above this (and below `anls_pass`) is rewritten to the ground
    /// truth; at or below it the sample is rejected.
    pub anls_rewrite_floor: f64,
    pub judge_threshold: u8,
    /// Fraction of the box extent added on every side before cropping.
    pub expand_margin: f64,
    pub parser: ParserConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            anls_threshold: DEFAULT_ANLS_THRESHOLD,
            anls_pass: 1.0,
            anls_rewrite_floor: 0.0,
            judge_threshold: DEFAULT_JUDGE_THRESHOLD,
            expand_margin: DEFAULT_EXPAND_MARGIN,
            parser: ParserConfig::default(),
        }
    }
}

/// Byte range of the answer after the last final-answer marker, up to the
/// end of that line, trimmed.
fn final_answer_range(text: &str) -> Option<(usize, usize)> {
    let (pos, marker) = FINAL_ANSWER_MARKERS
        .iter()
        .filter_map(|m| text.rfind(m).map(|p| (p, *m)))
        .max_by_key(|(p, _)| *p)?;
    let start = pos + marker.len();
    let line_end = text[start..].find('\n').map_or(text.len(), |n| start + n);
    let line = &text[start..line_end];
    let lead = line.len() - line.trim_start().len();
    let trimmed = line.trim();
    Some((start + lead, start + lead + trimmed.len()))
}

pub fn extract_final_answer(text: &str) -> Option<&str> {
    final_answer_range(text).map(|(a, b)| &text[a..b])
}

/// Well-formed signals of a reasoning text, in order.
pub fn signals_of(text: &str, parser: ParserConfig) -> Vec<ReplaySignal> {
    parse_all(text, parser)
        .into_iter()
        .filter_map(|e| match e {
            StreamEvent::Signal { signal, .. } => Some(signal),
            _ => None,
        })
        .collect()
}

pub fn verify_format(sample: &SampleRecord, parser: ParserConfig) -> Verdict {
    match extract_final_answer(&sample.reasoning) {
        None => return Verdict::reject(Stage::Format, "missing_final_answer"),
        Some("") => return Verdict::reject(Stage::Format, "empty_final_answer"),
        Some(_) => {}
    }
    let mut index = 0;
    for event in parse_all(&sample.reasoning, parser) {
        match event {
            StreamEvent::Text(_) => {}
            StreamEvent::Signal { .. } => index += 1,
            StreamEvent::Malformed { error, .. } => {
                return Verdict::reject(Stage::Format, error.code()).with_signal(index)
            }
            StreamEvent::Incomplete { .. } => {
                return Verdict::reject(Stage::Format, "unterminated_signal").with_signal(index)
            }
        }
    }
    Verdict::pass(Stage::Format)
}

/// The answer under test: the `final_answer` field, or the text after the
/// final-answer marker when the field is empty.
pub fn answer_of(sample: &SampleRecord) -> &str {
    if sample.final_answer.trim().is_empty() {
        extract_final_answer(&sample.reasoning).unwrap_or("")
    } else {
        &sample.final_answer
    }
}

/// Replaces the final answer in both the field and the reasoning text.
pub fn replace_final_answer(sample: &mut SampleRecord, answer: &str) {
    if let Some((a, b)) = final_answer_range(&sample.reasoning) {
        sample.reasoning.replace_range(a..b, answer);
    }
    sample.final_answer = answer.to_string();
}

/// Closed-ended samples are scored by ANLS; near misses are rewritten in
/// place to the best-matching ground truth. Open-ended samples go to the
/// judge.
pub fn verify_correctness(
    sample: &mut SampleRecord,
    judge: &dyn JudgeClient,
    cfg: &VerifyConfig,
) -> Verdict {
    match sample.task_type {
        TaskType::ClosedEnded => {
            let truths = sample.ground_truth.answers();
            let (score, best) = anls_best(answer_of(sample), &truths, cfg.anls_threshold);
            if score >= cfg.anls_pass {
                Verdict::pass(Stage::Correctness).with_anls(score)
            } else if score > cfg.anls_rewrite_floor {
                let truth = truths[best.expect("non-empty truths when score > 0")].to_string();
                replace_final_answer(sample, &truth);
                Verdict {
                    outcome: Outcome::Rewritten,
                    reason: Some("answer_replaced_by_ground_truth".into()),
                    ..Verdict::pass(Stage::Correctness)
                }
                .with_anls(score)
            } else {
                Verdict::reject(Stage::Correctness, "incorrect_answer").with_anls(score)
            }
        }
        TaskType::OpenEnded => {
            let prompt = correctness_prompt(sample);
            let request = JudgeRequest {
                task: JudgeTask::Correctness,
                sample_id: &sample.id,
                signal_index: None,
                prompt,
                images: Vec::new(),
            };
            match judge.complete(&request) {
                Err(e) => Verdict::deferred(Stage::Correctness, format!("judge_unavailable: {e}")),
                Ok(text) => match parse_judge_score(&text) {
                    None => Verdict::deferred(Stage::Correctness, "unparseable_judge_output"),
                    Some(s) if s >= cfg.judge_threshold => {
                        Verdict::pass(Stage::Correctness).with_judge_score(s)
                    }
                    Some(s) => Verdict::reject(Stage::Correctness, "judge_misaligned").with_judge_score(s),
                },
            }
        }
    }
}

pub fn correctness_prompt(sample: &SampleRecord) -> String {
    fill(
        CORRECTNESS_TEMPLATE,
        &[
            ("question", &sample.question),
            ("gt", &sample.ground_truth.display()),
            ("answer", &sample.reasoning),
            ("final_answer", answer_of(sample)),
        ],
    )
}

pub fn grounding_prompt(label: &str) -> String {
    fill(GROUNDING_TEMPLATE, &[("content", label)])
}

/// Crops every (expanded) signal region and asks the judge whether it shows
/// the signal's label. Boxes are in original-image pixels.
pub fn verify_grounding(
    sample: &SampleRecord,
    image: &PixelGrid,
    judge: &dyn JudgeClient,
    cfg: &VerifyConfig,
) -> Verdict {
    let signals = signals_of(&sample.reasoning, cfg.parser);
    if signals.is_empty() {
        let mut v = Verdict::pass(Stage::Grounding);
        v.warnings.push("no_grounding".into());
        return v;
    }
    let frame = ImageFrame::bounds(image.width, image.height);
    let original = image.to_ppm();
    let mut warnings = Vec::new();
    let mut scores = Vec::new();
    for (i, signal) in signals.iter().enumerate() {
        let Ok(bbox) = validate_box(signal.bbox.to_array(), &frame) else {
            return Verdict::reject(Stage::Grounding, "empty_crop").with_signal(i);
        };
        let expanded = expand_box(&bbox, &frame, cfg.expand_margin);
        let Some(crop) = image.crop_box(&expanded) else {
            return Verdict::reject(Stage::Grounding, "empty_crop").with_signal(i);
        };
        let Some(label) = signal.label.as_deref() else {
            warnings.push(format!("signal {i}: no label, passed without judging"));
            continue;
        };
        let crop = crop.to_ppm();
        let request = JudgeRequest {
            task: JudgeTask::Grounding,
            sample_id: &sample.id,
            signal_index: Some(i),
            prompt: grounding_prompt(label),
            images: vec![&original, &crop],
        };
        let score = match judge.complete(&request) {
            Err(e) => {
                return Verdict::deferred(Stage::Grounding, format!("judge_unavailable: {e}")).with_signal(i)
            }
            Ok(text) => match parse_judge_score(&text) {
                None => return Verdict::deferred(Stage::Grounding, "unparseable_judge_output").with_signal(i),
                Some(s) => s,
            },
        };
        if score < cfg.judge_threshold {
            return Verdict::reject(Stage::Grounding, "grounding_mismatch")
                .with_signal(i)
                .with_judge_score(score);
        }
        scores.push(score);
    }
    let mut v = Verdict::pass(Stage::Grounding);
    v.judge_score = scores.iter().min().copied();
    v.warnings = warnings;
    v
}
