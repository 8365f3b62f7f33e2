//! Generation with feature replay, and assembly of masked training
//! sequences.
//!
//! During generation the engine parses the model output as it streams. Each
//! completed `<sot>…<eot>` signal is resolved against the [`FeaturePool`] and
//! the selected tokens are pushed back into the generator before the next
//! chunk is requested. For training, the same resolution is applied to a
//! finished reasoning chain and every element of the resulting sequence is
//! tagged with a loss-mask bit.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::{extract_final_answer, SampleRecord};
use crate::feature_pool::{replay_tokens, FeaturePool, TokenSequence};
use crate::geometry::{normalize_box, validate_box, BoxForm, CellRange, CenterBox, PixelBox};
use crate::replay_parser::{ParserConfig, ReplaySignal, SignalParser, StreamEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeneratorError {
    #[error("generator backend failed: {0}")]
    Backend(String),
    #[error("generator rejected injection: {0}")]
    Injection(String),
}

/// A pluggable token source. The engine calls [`Generator::inject`] for a
/// signal before it asks for the chunk after it.
pub trait Generator {
    /// The next piece of output, or `None` when generation has ended.
    fn next_chunk(&mut self) -> Result<Option<String>, GeneratorError>;
    fn inject(&mut self, tokens: &TokenSequence, signal: &ReplaySignal) -> Result<(), GeneratorError>;
}

/// Plays back fixed chunks and logs what was injected.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    chunks: VecDeque<String>,
    /// Fail with a backend error once this many chunks have been served.
    pub fail_after: Option<usize>,
    served: usize,
    /// Token count of each acknowledged injection, in order.
    pub injected: Vec<usize>,
}

impl ScriptedGenerator {
    pub fn new(chunks: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            chunks: chunks.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// Splits `text` into chunks of at most `chunk_chars` characters.
    pub fn from_text(text: &str, chunk_chars: usize) -> Self {
        let chars: Vec<char> = text.chars().collect();
        Self::new(
            chars
                .chunks(chunk_chars.max(1))
                .map(|c| c.iter().collect::<String>()),
        )
    }

    pub fn failing_after(mut self, chunks: usize) -> Self {
        self.fail_after = Some(chunks);
        self
    }
}

impl Generator for ScriptedGenerator {
    fn next_chunk(&mut self) -> Result<Option<String>, GeneratorError> {
        if self.fail_after == Some(self.served) {
            return Err(GeneratorError::Backend(format!("scripted failure after {} chunks", self.served)));
        }
        self.served += 1;
        Ok(self.chunks.pop_front())
    }

    fn inject(&mut self, tokens: &TokenSequence, _signal: &ReplaySignal) -> Result<(), GeneratorError> {
        self.injected.push(tokens.len());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidSignalAction {
    #[default]
    Skip,
    Halt,
}

/// Coordinate space of signal boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    /// Pixels of the resized frame the pool covers.
    #[default]
    Resized,
    /// Pixels of the original image; mapped through the grid scale.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayPolicy {
    pub max_replays: usize,
    /// Signals whose replay would exceed this are recorded but not injected.
    pub max_tokens_per_replay: usize,
    pub on_invalid: InvalidSignalAction,
    pub coords: CoordSpace,
    pub parser: ParserConfig,
}

impl Default for ReplayPolicy {
    fn default() -> Self {
        Self {
            max_replays: 8,
            max_tokens_per_replay: 256,
            on_invalid: InvalidSignalAction::Skip,
            coords: CoordSpace::Resized,
            parser: ParserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid replay policy: {0}")]
pub struct PolicyError(pub String);

impl ReplayPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_replays == 0 {
            return Err(PolicyError("max_replays must be at least 1".into()));
        }
        if self.max_tokens_per_replay == 0 {
            return Err(PolicyError("max_tokens_per_replay must be at least 1".into()));
        }
        Ok(())
    }
}

/// A signal box resolved against a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    /// Box in resized-frame pixels, clamped.
    pub bbox: PixelBox,
    pub cells: CellRange,
    pub tokens: TokenSequence,
}

/// Maps a signal box into the pool frame and slices its tokens.
pub fn resolve_signal(pool: &FeaturePool, signal: &ReplaySignal, coords: CoordSpace) -> Result<Resolved, String> {
    let raw = match coords {
        CoordSpace::Resized => signal.bbox,
        CoordSpace::Original => pool.grid.to_resized(signal.bbox),
    };
    let frame = pool.frame();
    let bbox = validate_box(raw.to_array(), &frame).map_err(|e| format!("malformed_box: {e}"))?;
    let cells = pool.cells_for(&bbox).map_err(|e| format!("malformed_box: {e}"))?;
    let tokens = replay_tokens(pool, &bbox).map_err(|e| format!("malformed_box: {e}"))?;
    Ok(Resolved { bbox, cells, tokens })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptElement {
    Text {
        text: String,
    },
    Signal {
        raw: String,
        signal: ReplaySignal,
        /// Whether a `Replay` element follows.
        replayed: bool,
    },
    InvalidSignal {
        raw: String,
        reason: String,
    },
    /// An unterminated signal at end of output.
    Incomplete {
        raw: String,
    },
    Replay {
        #[serde(rename = "box")]
        bbox: PixelBox,
        cells: CellRange,
        token_count: usize,
        tokens: TokenSequence,
    },
}

impl TranscriptElement {
    /// Generator text this element stands for; empty for replays.
    pub fn raw(&self) -> &str {
        match self {
            TranscriptElement::Text { text } => text,
            TranscriptElement::Signal { raw, .. }
            | TranscriptElement::InvalidSignal { raw, .. }
            | TranscriptElement::Incomplete { raw } => raw,
            TranscriptElement::Replay { .. } => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    BackendError,
    PolicyHalt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub elements: Vec<TranscriptElement>,
    pub termination: Termination,
    pub replay_count: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct TranscriptSummary<'a> {
    kind: &'static str,
    termination: Termination,
    replay_count: usize,
    warnings: &'a [String],
}

impl Transcript {
    /// Everything the generator produced, with replays removed.
    pub fn raw_output(&self) -> String {
        self.elements.iter().map(TranscriptElement::raw).collect()
    }

    pub fn replays(&self) -> impl Iterator<Item = &TranscriptElement> {
        self.elements
            .iter()
            .filter(|e| matches!(e, TranscriptElement::Replay { .. }))
    }

    /// One element per line, then a `{"kind":"end", ...}` summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.elements {
            out.push_str(&serde_json::to_string(e).expect("transcript serializes"));
            out.push('\n');
        }
        let summary = TranscriptSummary {
            kind: "end",
            termination: self.termination,
            replay_count: self.replay_count,
            warnings: &self.warnings,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

struct Session<'a> {
    pool: &'a FeaturePool,
    policy: &'a ReplayPolicy,
    elements: Vec<TranscriptElement>,
    replay_count: usize,
    warnings: Vec<String>,
}

enum Step {
    Continue,
    Halt,
    Failed,
}

impl Session<'_> {
    fn push_text(&mut self, text: String) {
        if let Some(TranscriptElement::Text { text: last }) = self.elements.last_mut() {
            last.push_str(&text);
        } else if !text.is_empty() {
            self.elements.push(TranscriptElement::Text { text });
        }
    }

    fn invalid(&mut self, raw: String, reason: String) -> Step {
        self.elements.push(TranscriptElement::InvalidSignal { raw, reason });
        match self.policy.on_invalid {
            InvalidSignalAction::Skip => Step::Continue,
            InvalidSignalAction::Halt => Step::Halt,
        }
    }

    fn handle(&mut self, event: StreamEvent, generator: &mut dyn Generator) -> Step {
        match event {
            StreamEvent::Text(t) => {
                self.push_text(t);
                Step::Continue
            }
            StreamEvent::Malformed { raw, error, .. } => self.invalid(raw, error.code().to_string()),
            StreamEvent::Incomplete { raw, .. } => {
                self.warnings.push("generation ended inside a signal".into());
                self.elements.push(TranscriptElement::Incomplete { raw });
                Step::Continue
            }
            StreamEvent::Signal { signal, raw } => {
                let resolved = match resolve_signal(self.pool, &signal, self.policy.coords) {
                    Ok(r) => r,
                    Err(reason) => return self.invalid(raw, reason),
                };
                let index = self.elements.len();
                let mut replayed = false;
                if self.replay_count >= self.policy.max_replays {
                    self.warnings.push(format!(
                        "replay cap {} reached; signal at element {index} not replayed",
                        self.policy.max_replays
                    ));
                } else if resolved.tokens.len() > self.policy.max_tokens_per_replay {
                    self.warnings.push(format!(
                        "replay of {} tokens exceeds cap {}; signal at element {index} not replayed",
                        resolved.tokens.len(),
                        self.policy.max_tokens_per_replay
                    ));
                } else {
                    replayed = true;
                }
                if replayed {
                    if let Err(e) = generator.inject(&resolved.tokens, &signal) {
                        self.warnings.push(e.to_string());
                        self.elements.push(TranscriptElement::Signal { raw, signal, replayed: false });
                        return Step::Failed;
                    }
                }
                self.elements.push(TranscriptElement::Signal { raw, signal, replayed });
                if replayed {
                    self.replay_count += 1;
                    self.elements.push(TranscriptElement::Replay {
                        bbox: resolved.bbox,
                        cells: resolved.cells,
                        token_count: resolved.tokens.len(),
                        tokens: resolved.tokens,
                    });
                }
                Step::Continue
            }
        }
    }
}

/// Drives `generator` to completion, replaying pool features after each
/// valid signal.
pub fn run_generation(generator: &mut dyn Generator, pool: &FeaturePool, policy: &ReplayPolicy) -> Transcript {
    let mut parser = SignalParser::new(policy.parser);
    let mut session = Session {
        pool,
        policy,
        elements: Vec::new(),
        replay_count: 0,
        warnings: Vec::new(),
    };
    let termination = 'run: loop {
        let events = match generator.next_chunk() {
            Ok(Some(chunk)) => parser.feed(&chunk),
            Ok(None) => {
                for e in parser.finish() {
                    if let Step::Halt = session.handle(e, generator) {
                        break 'run Termination::PolicyHalt;
                    }
                }
                break Termination::Completed;
            }
            Err(e) => {
                session.warnings.push(e.to_string());
                // Keep whatever text was already produced.
                for e in parser.finish() {
                    if let StreamEvent::Text(t) = e {
                        session.push_text(t);
                    } else {
                        session.elements.push(TranscriptElement::Incomplete { raw: e.raw().to_string() });
                    }
                }
                break Termination::BackendError;
            }
        };
        for e in events {
            match session.handle(e, generator) {
                Step::Continue => {}
                Step::Halt => break 'run Termination::PolicyHalt,
                Step::Failed => break 'run Termination::BackendError,
            }
        }
    };
    Transcript {
        elements: session.elements,
        termination,
        replay_count: session.replay_count,
        warnings: session.warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    PromptText,
    ImageInput,
    Signal,
    ResponseText,
    ReplayedImage,
}

impl ElementKind {
    /// Whether this kind is supervised.
    pub fn supervised(self) -> bool {
        matches!(self, ElementKind::Signal | ElementKind::ResponseText)
    }

    pub fn is_image(self) -> bool {
        matches!(self, ElementKind::ImageInput | ElementKind::ReplayedImage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TokenOrigin {
    Snapshot,
    Local { crop: usize },
    Replay { signal: usize },
}

/// One sequence element: a text run or a single image token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftElement {
    pub kind: ElementKind,
    pub mask: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin: Option<TokenOrigin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl SftElement {
    fn text(kind: ElementKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            mask: kind.supervised(),
            text: Some(text.into()),
            origin: None,
            values: None,
        }
    }

    fn image(kind: ElementKind, origin: TokenOrigin, values: &[f64]) -> Self {
        Self {
            kind,
            mask: kind.supervised(),
            text: None,
            origin: Some(origin),
            values: Some(values.to_vec()),
        }
    }
}

/// Regression target for the detection head at a signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetTarget {
    /// Index of the signal element.
    pub element: usize,
    pub signal: usize,
    /// Box normalized to the resized frame.
    pub bbox: CenterBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementCounts {
    pub prompt_text: usize,
    pub image_input: usize,
    pub signal: usize,
    pub response_text: usize,
    pub replayed_image: usize,
    pub supervised: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSequence {
    pub sample_id: String,
    pub elements: Vec<SftElement>,
    pub det_targets: Vec<DetTarget>,
    pub warnings: Vec<String>,
}

impl SftSequence {
    pub fn mask(&self) -> Vec<bool> {
        self.elements.iter().map(|e| e.mask).collect()
    }

    pub fn counts(&self) -> ElementCounts {
        let mut c = ElementCounts::default();
        for e in &self.elements {
            match e.kind {
                ElementKind::PromptText => c.prompt_text += 1,
                ElementKind::ImageInput => c.image_input += 1,
                ElementKind::Signal => c.signal += 1,
                ElementKind::ResponseText => c.response_text += 1,
                ElementKind::ReplayedImage => c.replayed_image += 1,
            }
            c.supervised += usize::from(e.mask);
            c.total += 1;
        }
        c
    }

    /// Elements in order, each with `kind`, `mask` and its payload.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.elements {
            out.push_str(&serde_json::to_string(e).expect("element serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub span: Range<usize>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SftError {
    #[error("sample {id} has {} malformed signal(s)", .diagnostics.len())]
    Malformed { id: String, diagnostics: Vec<Diagnostic> },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Builds the supervised sequence: question, input image tokens, then the
/// response with replayed tokens after each signal.
pub fn build_sft_sequence(
    sample: &SampleRecord,
    pool: &FeaturePool,
    policy: &ReplayPolicy,
) -> Result<SftSequence, SftError> {
    policy.validate()?;
    let mut response = sample.reasoning.clone();
    if extract_final_answer(&response).is_none() && !sample.final_answer.is_empty() {
        response.push_str("\nFinal answer: ");
        response.push_str(&sample.final_answer);
    }

    let mut parser = SignalParser::new(policy.parser);
    let mut events = parser.feed(&response);
    events.extend(parser.finish());

    let mut diagnostics = Vec::new();
    let mut resolved = Vec::new();
    for e in &events {
        match e {
            StreamEvent::Malformed { raw, error, span } => diagnostics.push(Diagnostic {
                code: error.code().into(),
                span: span.clone(),
                raw: raw.clone(),
            }),
            StreamEvent::Incomplete { raw, span } => diagnostics.push(Diagnostic {
                code: "unterminated_signal".into(),
                span: span.clone(),
                raw: raw.clone(),
            }),
            StreamEvent::Signal { signal, raw } => match resolve_signal(pool, signal, policy.coords) {
                Ok(r) => resolved.push(r),
                Err(reason) => diagnostics.push(Diagnostic {
                    code: reason,
                    span: signal.span.clone(),
                    raw: raw.clone(),
                }),
            },
            StreamEvent::Text(_) => {}
        }
    }
    if !diagnostics.is_empty() {
        return Err(SftError::Malformed {
            id: sample.id.clone(),
            diagnostics,
        });
    }

    let mut elements = vec![SftElement::text(ElementKind::PromptText, sample.question.clone())];
    for token in pool.snapshot.flatten().iter() {
        elements.push(SftElement::image(ElementKind::ImageInput, TokenOrigin::Snapshot, token));
    }
    for (crop, local) in pool.input_locals().iter().enumerate() {
        for token in local.flatten().iter() {
            elements.push(SftElement::image(ElementKind::ImageInput, TokenOrigin::Local { crop }, token));
        }
    }

    let frame = pool.frame();
    let mut det_targets = Vec::new();
    let mut warnings = Vec::new();
    let mut resolved = resolved.into_iter();
    let mut signal_index = 0;
    for e in events {
        match e {
            StreamEvent::Text(t) if !t.is_empty() => elements.push(SftElement::text(ElementKind::ResponseText, t)),
            StreamEvent::Text(_) => {}
            StreamEvent::Signal { raw, .. } => {
                let r = resolved.next().expect("one resolution per signal");
                let normalized = normalize_box(&r.bbox, &frame, BoxForm::Center).expect("pool frame is non-empty");
                det_targets.push(DetTarget {
                    element: elements.len(),
                    signal: signal_index,
                    bbox: normalized.as_center(),
                });
                elements.push(SftElement::text(ElementKind::Signal, raw));
                if signal_index >= policy.max_replays {
                    warnings.push(format!("signal {signal_index} beyond replay cap"));
                } else if r.tokens.len() > policy.max_tokens_per_replay {
                    warnings.push(format!("signal {signal_index} replay exceeds token cap"));
                } else {
                    for token in r.tokens.iter() {
                        elements.push(SftElement::image(
                            ElementKind::ReplayedImage,
                            TokenOrigin::Replay { signal: signal_index },
                            token,
                        ));
                    }
                }
                signal_index += 1;
            }
            StreamEvent::Malformed { .. } | StreamEvent::Incomplete { .. } => unreachable!("rejected above"),
        }
    }

    Ok(SftSequence {
        sample_id: sample.id.clone(),
        elements,
        det_targets,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::TaskType;
    use crate::feature_pool::{build_pool_blank, CoordinateEncoder, GridSpec, PoolingConfig};

    fn pool(rows: usize, cols: usize) -> FeaturePool {
        let grid = GridSpec::from_layout(rows, cols, 336, 14).unwrap();
        build_pool_blank(&grid, &CoordinateEncoder { channels: 2 }, &PoolingConfig::default()).unwrap()
    }

    fn sample(reasoning: &str) -> SampleRecord {
        SampleRecord {
            id: "s".into(),
            image: "i.png".into(),
            question: "What is shown?".into(),
            reasoning: reasoning.into(),
            final_answer: String::new(),
            ground_truth: "x".into(),
            task_type: TaskType::ClosedEnded,
            source: "GQA".into(),
            data_type: "General VQA".into(),
            verdicts: vec![],
        }
    }

    #[test]
    fn single_signal_injects_one_token() {
        let p = pool(1, 1);
        let text = "see <sot>[0,0,28,28]<eot> then answer";
        let mut g = ScriptedGenerator::from_text(text, 5);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        assert_eq!(t.termination, Termination::Completed);
        assert_eq!(t.replay_count, 1);
        assert_eq!(g.injected, vec![1]);
        assert_eq!(t.raw_output(), text);
        let (i, replay) = t
            .elements
            .iter()
            .enumerate()
            .find(|(_, e)| matches!(e, TranscriptElement::Replay { .. }))
            .unwrap();
        assert!(matches!(t.elements[i - 1], TranscriptElement::Signal { replayed: true, .. }));
        let TranscriptElement::Replay { cells, tokens, .. } = replay else { unreachable!() };
        assert_eq!(cells.cell_count(), 4);
        let expected = replay_tokens(&p, &PixelBox::new(0.0, 0.0, 28.0, 28.0)).unwrap();
        assert_eq!(tokens, &expected);
        // Mean of cells (0,0),(0,1),(1,0),(1,1) in channel 0.
        assert_eq!(tokens.token(0)[0], 500.5);
    }

    #[test]
    fn replay_cap_is_enforced() {
        let p = pool(1, 1);
        let text: String = (0..9).map(|i| format!("r{i} <sot>[0,0,28,28]<eot> ")).collect();
        let mut g = ScriptedGenerator::from_text(&text, 7);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        assert_eq!(t.replay_count, 8);
        assert_eq!(t.replays().count(), 8);
        let signals: Vec<bool> = t
            .elements
            .iter()
            .filter_map(|e| match e {
                TranscriptElement::Signal { replayed, .. } => Some(*replayed),
                _ => None,
            })
            .collect();
        assert_eq!(signals.len(), 9);
        assert!(!signals[8]);
        assert_eq!(t.warnings.len(), 1);
        assert_eq!(t.raw_output(), text);
    }

    #[test]
    fn invalid_signal_skip_and_halt() {
        let p = pool(1, 1);
        let text = "a <sot>[1,2]<eot> b";
        let mut g = ScriptedGenerator::from_text(text, 3);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        assert_eq!(t.termination, Termination::Completed);
        assert_eq!(t.replay_count, 0);
        assert!(t.elements.iter().any(
            |e| matches!(e, TranscriptElement::InvalidSignal { reason, .. } if reason == "bad_box_arity")
        ));
        assert_eq!(t.raw_output(), text);

        let halt = ReplayPolicy { on_invalid: InvalidSignalAction::Halt, ..ReplayPolicy::default() };
        let mut g = ScriptedGenerator::from_text(text, 3);
        let t = run_generation(&mut g, &p, &halt);
        assert_eq!(t.termination, Termination::PolicyHalt);
    }

    #[test]
    fn out_of_frame_box_is_invalid() {
        let p = pool(1, 1);
        let mut g = ScriptedGenerator::new(["<sot>[400,400,500,500]<eot>"]);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        assert_eq!(t.replay_count, 0);
        assert!(matches!(t.elements[0], TranscriptElement::InvalidSignal { .. }));
    }

    #[test]
    fn backend_failure_terminates() {
        let p = pool(1, 1);
        let mut g = ScriptedGenerator::new(["hello ", "<sot>[0,0", ",28,28]<eot>"]).failing_after(2);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        assert_eq!(t.termination, Termination::BackendError);
        assert_eq!(t.raw_output(), "hello <sot>[0,0");
        assert_eq!(t.replay_count, 0);
    }

    #[test]
    fn token_cap_skips_injection() {
        let p = pool(2, 2);
        let policy = ReplayPolicy { max_tokens_per_replay: 4, ..ReplayPolicy::default() };
        let mut g = ScriptedGenerator::new(["<sot>[0,0,112,112]<eot>"]);
        let t = run_generation(&mut g, &p, &policy);
        assert_eq!(t.replay_count, 0);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn original_coordinates_are_rescaled() {
        let mut p = pool(1, 1);
        p.grid.original_width = 672;
        p.grid.original_height = 672;
        p.grid.scale_x = 0.5;
        p.grid.scale_y = 0.5;
        let policy = ReplayPolicy { coords: CoordSpace::Original, ..ReplayPolicy::default() };
        let mut g = ScriptedGenerator::new(["<sot>[0,0,56,56]<eot>"]);
        let t = run_generation(&mut g, &p, &policy);
        let TranscriptElement::Replay { cells, .. } = &t.elements[1] else { panic!() };
        assert_eq!(cells.cell_count(), 4);
    }

    #[test]
    fn transcript_jsonl_has_summary() {
        let p = pool(1, 1);
        let mut g = ScriptedGenerator::new(["x <sot>[0,0,28,28]<eot>"]);
        let t = run_generation(&mut g, &p, &ReplayPolicy::default());
        let jsonl = t.to_jsonl();
        let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2]["kind"], "replay");
        assert_eq!(lines[3]["kind"], "end");
        assert_eq!(lines[3]["termination"], "completed");
        let back: TranscriptElement = serde_json::from_value(lines[2].clone()).unwrap();
        assert_eq!(back, t.elements[2]);
    }

    #[test]
    fn sft_one_signal_four_tokens() {
        let p = pool(1, 1);
        let s = sample("Look <sot>{\"bbox_2d\":[0,0,56,56],\"label\":\"cat\"}<eot> it is a cat.\nFinal answer: cat");
        let seq = build_sft_sequence(&s, &p, &ReplayPolicy::default()).unwrap();
        let c = seq.counts();
        assert_eq!(c.image_input, 144);
        assert_eq!(c.replayed_image, 4);
        assert_eq!(c.signal, 1);
        assert_eq!(c.response_text, 2);
        assert_eq!(c.supervised, 3);
        let sig = seq.det_targets[0].element;
        assert_eq!(seq.elements[sig].kind, ElementKind::Signal);
        assert!(seq.elements[sig + 1..sig + 5]
            .iter()
            .all(|e| e.kind == ElementKind::ReplayedImage && !e.mask));
        let b = seq.det_targets[0].bbox;
        assert!((b.xc - 28.0 / 336.0).abs() < 1e-12 && (b.w - 56.0 / 336.0).abs() < 1e-12);
    }

    #[test]
    fn sft_without_signals() {
        let p = pool(2, 2);
        let seq = build_sft_sequence(&sample("Plain text.\nFinal answer: x"), &p, &ReplayPolicy::default()).unwrap();
        let c = seq.counts();
        assert_eq!(c.replayed_image, 0);
        assert_eq!(c.image_input, 144 + 4 * 36);
        assert!(seq.elements.iter().filter(|e| e.kind == ElementKind::ResponseText).all(|e| e.mask));
        assert!(seq.elements.iter().filter(|e| e.kind.is_image()).all(|e| !e.mask));
    }

    #[test]
    fn sft_rejects_malformed_training_text() {
        let p = pool(1, 1);
        let err = build_sft_sequence(&sample("a <sot>[1,2]<eot> b <sot>[0,0"), &p, &ReplayPolicy::default()).unwrap_err();
        let SftError::Malformed { diagnostics, .. } = err else { panic!() };
        let codes: Vec<_> = diagnostics.iter().map(|d| d.code.as_str()).collect();
        assert_eq!(codes, ["bad_box_arity", "unterminated_signal"]);
    }

    #[test]
    fn sft_appends_missing_final_answer() {
        let p = pool(1, 1);
        let mut s = sample("Reasoning only.");
        s.final_answer = "cat".into();
        let seq = build_sft_sequence(&s, &p, &ReplayPolicy::default()).unwrap();
        let last = seq.elements.last().unwrap();
        assert_eq!(last.text.as_deref(), Some("Reasoning only.\nFinal answer: cat"));
    }
}
