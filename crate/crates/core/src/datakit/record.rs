use serde::{Deserialize, Serialize};

/// One candidate training sample, one JSON object per JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Image reference, usually a path relative to an image root.
    pub image: String,
    pub question: String,
    /// Reasoning chain with embedded `<sot>…<eot>` signals.
    pub reasoning: String,
    #[serde(default)]
    pub final_answer: String,
    pub ground_truth: GroundTruth,
    pub task_type: TaskType,
    pub source: String,
    pub data_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    One(String),
    Many(Vec<String>),
}

impl GroundTruth {
    pub fn answers(&self) -> Vec<&str> {
        match self {
            GroundTruth::One(s) => vec![s.as_str()],
            GroundTruth::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }

    /// The answers joined for prompt templates.
    pub fn display(&self) -> String {
        self.answers().join(" | ")
    }
}

impl From<&str> for GroundTruth {
    fn from(s: &str) -> Self {
        GroundTruth::One(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    ClosedEnded,
    OpenEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Schema,
    Format,
    Correctness,
    Grounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Reject,
    Rewritten,
    /// The stage could not decide (judge unavailable or unparseable).
    Deferred,
}

impl Outcome {
    /// Pass and rewritten samples continue to the next stage.
    pub fn continues(self) -> bool {
        matches!(self, Outcome::Pass | Outcome::Rewritten)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub stage: Stage,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Verdict {
    pub fn pass(stage: Stage) -> Self {
        Self {
            stage,
            outcome: Outcome::Pass,
            judge_score: None,
            anls: None,
            reason: None,
            signal_index: None,
            warnings: Vec::new(),
        }
    }

    pub fn reject(stage: Stage, reason: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Reject,
            reason: Some(reason.into()),
            ..Self::pass(stage)
        }
    }

    pub fn deferred(stage: Stage, reason: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Deferred,
            reason: Some(reason.into()),
            ..Self::pass(stage)
        }
    }

    pub fn with_judge_score(mut self, score: u8) -> Self {
        self.judge_score = Some(score);
        self
    }

    pub fn with_anls(mut self, anls: f64) -> Self {
        self.anls = Some(anls);
        self
    }

    pub fn with_signal(mut self, index: usize) -> Self {
        self.signal_index = Some(index);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_schema_field_names() {
        let line = r#"{"id":"a1","image":"img/a1.png","question":"Q?","reasoning":"r Final Answer: x",
            "final_answer":"x","ground_truth":["x","y"],"task_type":"closed_ended","source":"AI2D","data_type":"ScienceQA"}"#;
        let r: SampleRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.ground_truth.answers(), vec!["x", "y"]);
        assert_eq!(r.task_type, TaskType::ClosedEnded);
        let out = serde_json::to_value(&r).unwrap();
        assert!(out.get("verdicts").is_none());
        let back: SampleRecord = serde_json::from_value(out).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn unknown_task_type_is_a_schema_error() {
        let line = r#"{"id":"a","image":"","question":"","reasoning":"","ground_truth":"x","task_type":"maybe","source":"s","data_type":"OCR"}"#;
        assert!(serde_json::from_str::<SampleRecord>(line).is_err());
    }
}
