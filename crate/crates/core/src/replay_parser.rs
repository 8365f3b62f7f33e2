//! Incremental recognizer for `<sot>…<eot>` replay signals.
//!
//! Two body syntaxes are accepted:
//!
//! * bare array: `<sot>[x1, y1, x2, y2]<eot>`
//! * JSON object: `<sot>{"bbox_2d":[x1,y1,x2,y2],"label":"..."}<eot>`
//!
//! The parser never fails. Text outside signals passes through as
//! [`StreamEvent::Text`]; concatenating every event's raw text reproduces the
//! input exactly, however the input was chunked.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PixelBox};

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalFormat {
    BareArray,
    JsonObject,
}

/// Order of the four numbers inside a signal body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordOrder {
    /// `[x1, y1, x2, y2]`
    #[default]
    X1Y1X2Y2,
    /// `[x1, x2, y1, y2]`
    X1X2Y1Y2,
}

impl CoordOrder {
    fn to_canonical(self, v: [f64; 4]) -> [f64; 4] {
        match self {
            CoordOrder::X1Y1X2Y2 => v,
            CoordOrder::X1X2Y1Y2 => [v[0], v[2], v[1], v[3]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySignal {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub label: Option<String>,
    pub format: SignalFormat,
    /// Byte range of the whole `<sot>…<eot>` span in the stream.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("expected 4 coordinates, found {found}")]
    Arity { found: usize },
    #[error("not a number: {token:?}")]
    Number { token: String },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("JSON signal has no bbox_2d array")]
    MissingBbox,
    #[error("label must be a string")]
    LabelType,
    #[error("signal body is neither an array nor an object")]
    Syntax,
    #[error(transparent)]
    Box(#[from] GeometryError),
    #[error("<eot> without an open <sot>")]
    UnmatchedEot,
    #[error("<sot> was not closed before the next <sot>")]
    Unterminated,
}

impl ParseError {
    /// Short stable identifier used in verdict reasons.
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::Arity { .. } => "bad_box_arity",
            ParseError::Number { .. } => "bad_box_number",
            ParseError::Json(_) => "bad_box_json",
            ParseError::MissingBbox => "missing_bbox",
            ParseError::LabelType => "bad_label",
            ParseError::Syntax => "bad_signal_syntax",
            ParseError::Box(_) => "malformed_box",
            ParseError::UnmatchedEot => "unmatched_eot",
            ParseError::Unterminated => "unterminated_signal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Text(String),
    Signal { signal: ReplaySignal, raw: String },
    Malformed {
        raw: String,
        error: ParseError,
        span: Range<usize>,
    },
    /// A `<sot>` still open when the stream ended.
    Incomplete { raw: String, span: Range<usize> },
}

impl StreamEvent {
    pub fn raw(&self) -> &str {
        match self {
            StreamEvent::Text(t) => t,
            StreamEvent::Signal { raw, .. }
            | StreamEvent::Malformed { raw, .. }
            | StreamEvent::Incomplete { raw, .. } => raw,
        }
    }
}

fn parse_number(token: &str) -> Result<f64, ParseError> {
    let t = token.trim();
    let v: f64 = t.parse().map_err(|_| ParseError::Number { token: t.to_string() })?;
    // `f64::from_str` also accepts "inf" and "NaN".
    if !v.is_finite() {
        return Err(ParseError::Number { token: t.to_string() });
    }
    Ok(v)
}

fn parse_bare(body: &str) -> Result<[f64; 4], ParseError> {
    let inner = body
        .strip_prefix('[')
        .and_then(|b| b.strip_suffix(']'))
        .ok_or(ParseError::Syntax)?;
    if inner.trim().is_empty() {
        return Err(ParseError::Arity { found: 0 });
    }
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 4 {
        return Err(ParseError::Arity { found: parts.len() });
    }
    let mut out = [0.0; 4];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = parse_number(part)?;
    }
    Ok(out)
}

fn parse_json(body: &str) -> Result<([f64; 4], Option<String>), ParseError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ParseError::Json(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ParseError::Json("expected an object".into()))?;
    let coords = obj
        .get("bbox_2d")
        .and_then(|v| v.as_array())
        .ok_or(ParseError::MissingBbox)?;
    if coords.len() != 4 {
        return Err(ParseError::Arity { found: coords.len() });
    }
    let mut out = [0.0; 4];
    for (slot, v) in out.iter_mut().zip(coords) {
        *slot = v.as_f64().ok_or_else(|| ParseError::Number { token: v.to_string() })?;
    }
    let label = match obj.get("label") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ParseError::LabelType),
    };
    Ok((out, label))
}

/// Parses the text between `<sot>` and `<eot>`. The returned span is empty;
/// stream parsers fill it in.
pub fn parse_signal_body(body: &str, order: CoordOrder) -> Result<ReplaySignal, ParseError> {
    let body = body.trim();
    let (raw, label, format) = if body.starts_with('{') {
        let (raw, label) = parse_json(body)?;
        (raw, label, SignalFormat::JsonObject)
    } else if body.starts_with('[') {
        (parse_bare(body)?, None, SignalFormat::BareArray)
    } else {
        return Err(ParseError::Syntax);
    };
    Ok(ReplaySignal {
        bbox: PixelBox::from_raw(order.to_canonical(raw))?,
        label,
        format,
        span: 0..0,
    })
}

fn render_number(v: f64) -> String {
    // Shortest round-trip representation; integral values print without a
    // decimal point.
    format!("{v}")
}

/// Canonical text for a signal, markers included. The bare format has no
/// room for a label and drops it. `<` inside labels is written as `\u003c`
/// so a label can never close the signal early.
pub fn render_signal(signal: &ReplaySignal, format: SignalFormat) -> String {
    let nums: Vec<String> = signal.bbox.to_array().into_iter().map(render_number).collect();
    match format {
        SignalFormat::BareArray => format!("{SOT}[{}]{EOT}", nums.join(", ")),
        SignalFormat::JsonObject => {
            let mut s = format!("{SOT}{{\"bbox_2d\":[{}]", nums.join(","));
            if let Some(label) = &signal.label {
                let quoted = serde_json::to_string(label).expect("strings always serialize");
                s.push_str(",\"label\":");
                s.push_str(&quoted.replace('<', "\\u003c"));
            }
            s.push('}');
            s.push_str(EOT);
            s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParserConfig {
    pub order: CoordOrder,
}

#[derive(Debug, Default)]
struct OpenSignal {
    start: usize,
    raw: String,
    body_start: usize,
}

/// Marker-level state shared by the text and token front ends.
#[derive(Debug, Default)]
struct Machine {
    config: ParserConfig,
    open: Option<OpenSignal>,
    pos: usize,
}

impl Machine {
    fn push_text(&mut self, events: &mut Vec<StreamEvent>, text: &str) {
        if text.is_empty() {
            return;
        }
        self.pos += text.len();
        match &mut self.open {
            Some(open) => open.raw.push_str(text),
            None => match events.last_mut() {
                Some(StreamEvent::Text(t)) => t.push_str(text),
                _ => events.push(StreamEvent::Text(text.to_string())),
            },
        }
    }

    fn open_marker(&mut self, events: &mut Vec<StreamEvent>, marker: &str) {
        if let Some(prev) = self.open.take() {
            events.push(StreamEvent::Malformed {
                span: prev.start..self.pos,
                raw: prev.raw,
                error: ParseError::Unterminated,
            });
        }
        self.open = Some(OpenSignal {
            start: self.pos,
            raw: marker.to_string(),
            body_start: marker.len(),
        });
        self.pos += marker.len();
    }

    fn close_marker(&mut self, events: &mut Vec<StreamEvent>, marker: &str) {
        let start = self.pos;
        self.pos += marker.len();
        match self.open.take() {
            None => events.push(StreamEvent::Malformed {
                raw: marker.to_string(),
                error: ParseError::UnmatchedEot,
                span: start..self.pos,
            }),
            Some(mut open) => {
                let body = &open.raw[open.body_start..];
                let parsed = parse_signal_body(body, self.config.order);
                open.raw.push_str(marker);
                let span = open.start..self.pos;
                events.push(match parsed {
                    Ok(mut signal) => {
                        signal.span = span;
                        StreamEvent::Signal {
                            signal,
                            raw: open.raw,
                        }
                    }
                    Err(error) => StreamEvent::Malformed {
                        raw: open.raw,
                        error,
                        span,
                    },
                });
            }
        }
    }

    fn finish(&mut self, events: &mut Vec<StreamEvent>) {
        if let Some(open) = self.open.take() {
            events.push(StreamEvent::Incomplete {
                span: open.start..self.pos,
                raw: open.raw,
            });
        }
        self.pos = 0;
    }
}

/// Longest suffix of `s` that is a proper prefix of a marker.
fn marker_prefix_len(s: &str) -> usize {
    let b = s.as_bytes();
    (1..SOT.len())
        .rev()
        .find(|&k| {
            k <= b.len() && {
                let tail = &b[b.len() - k..];
                SOT.as_bytes().starts_with(tail) || EOT.as_bytes().starts_with(tail)
            }
        })
        .unwrap_or(0)
}

/// Parser over decoded text; markers are matched literally and may be split
/// across chunks. One instance per stream.
#[derive(Debug, Default)]
pub struct SignalParser {
    machine: Machine,
    pending: String,
}

impl SignalParser {
    pub fn new(config: ParserConfig) -> Self {
        Self {
            machine: Machine {
                config,
                ..Machine::default()
            },
            pending: String::new(),
        }
    }

    pub fn is_inside_signal(&self) -> bool {
        self.machine.open.is_some()
    }

    pub fn feed(&mut self, chunk: &str) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        self.pending.push_str(chunk);
        let input = std::mem::take(&mut self.pending);
        let mut rest: &str = &input;
        loop {
            let sot = rest.find(SOT);
            let eot = rest.find(EOT);
            let next = match (sot, eot) {
                (Some(a), Some(b)) if a < b => Some((a, true)),
                (Some(_), Some(b)) => Some((b, false)),
                (Some(a), None) => Some((a, true)),
                (None, Some(b)) => Some((b, false)),
                (None, None) => None,
            };
            match next {
                Some((i, is_open)) => {
                    self.machine.push_text(&mut events, &rest[..i]);
                    if is_open {
                        self.machine.open_marker(&mut events, SOT);
                    } else {
                        self.machine.close_marker(&mut events, EOT);
                    }
                    rest = &rest[i + SOT.len()..];
                }
                None => {
                    let keep = marker_prefix_len(rest);
                    let (emit, held) = rest.split_at(rest.len() - keep);
                    self.machine.push_text(&mut events, emit);
                    self.pending = held.to_string();
                    break;
                }
            }
        }
        events
    }

    /// Flushes held bytes and reports an unclosed signal. The parser can be
    /// reused for a new stream afterwards.
    pub fn finish(&mut self) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        let held = std::mem::take(&mut self.pending);
        self.machine.push_text(&mut events, &held);
        self.machine.finish(&mut events);
        events
    }
}

/// Parses a complete string in one go.
pub fn parse_all(text: &str, config: ParserConfig) -> Vec<StreamEvent> {
    let mut p = SignalParser::new(config);
    let mut events = p.feed(text);
    events.extend(p.finish());
    coalesce(events)
}

/// Merges adjacent text events.
pub fn coalesce(events: Vec<StreamEvent>) -> Vec<StreamEvent> {
    let mut out: Vec<StreamEvent> = Vec::with_capacity(events.len());
    for e in events {
        match (out.last_mut(), e) {
            (Some(StreamEvent::Text(a)), StreamEvent::Text(b)) => a.push_str(&b),
            (_, StreamEvent::Text(b)) if b.is_empty() => {}
            (_, e) => out.push(e),
        }
    }
    out
}

/// Parser over raw token ids, for decoders that emit the markers as
/// dedicated vocabulary entries. Literal marker text inside ordinary tokens
/// is not special in this mode.
#[derive(Debug)]
pub struct TokenSignalParser {
    sot_id: u32,
    eot_id: u32,
    machine: Machine,
}

impl TokenSignalParser {
    pub fn new(sot_id: u32, eot_id: u32, config: ParserConfig) -> Self {
        Self {
            sot_id,
            eot_id,
            machine: Machine {
                config,
                ..Machine::default()
            },
        }
    }

    /// `text` is the decoded form of `id`.
    pub fn feed_token(&mut self, id: u32, text: &str) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        if id == self.sot_id {
            self.machine.open_marker(&mut events, text);
        } else if id == self.eot_id {
            self.machine.close_marker(&mut events, text);
        } else {
            self.machine.push_text(&mut events, text);
        }
        events
    }

    pub fn finish(&mut self) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        self.machine.finish(&mut events);
        events
    }
}
