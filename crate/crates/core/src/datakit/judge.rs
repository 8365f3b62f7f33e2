//! Scoring backends for the correctness and grounding gates.

use std::collections::HashMap;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    Correctness,
    Grounding,
}

#[derive(Debug, Clone)]
pub struct JudgeRequest<'a> {
    pub task: JudgeTask,
    pub sample_id: &'a str,
    pub signal_index: Option<usize>,
    pub prompt: String,
    /// Encoded images (PPM), in the order the prompt refers to them.
    pub images: Vec<&'a [u8]>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("bad judge response: {0}")]
    Protocol(String),
}

/// A judge answers one prompt with free text that should contain a 0–5 score.
pub trait JudgeClient: Sync {
    fn complete(&self, request: &JudgeRequest<'_>) -> Result<String, JudgeError>;
}

pub const MAX_JUDGE_SCORE: u8 = 5;
pub const DEFAULT_JUDGE_THRESHOLD: u8 = 3;

/// First integer in the judge output, clamped to `0..=5`.
pub fn parse_judge_score(text: &str) -> Option<u8> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(u8::is_ascii_digit)?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |n| start + n);
    let negative = start > 0 && bytes[start - 1] == b'-';
    if negative {
        return Some(0);
    }
    // Very long digit runs overflow; they are still "above 5".
    let value = text[start..end].parse::<u64>().unwrap_or(u64::MAX);
    Some(value.min(MAX_JUDGE_SCORE as u64) as u8)
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(std::iter::once(&0xffu8)) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Deterministic judge: the score is a hash of the seed, task, sample id and
/// signal index. Prompts and images are ignored.
#[derive(Debug, Clone, Copy)]
pub struct MockJudge {
    pub seed: u64,
}

impl MockJudge {
    pub fn score_for(&self, task: JudgeTask, sample_id: &str, signal_index: Option<usize>) -> u8 {
        let task = match task {
            JudgeTask::Correctness => b"c",
            JudgeTask::Grounding => b"g",
        };
        let sig = signal_index.map_or(u64::MAX, |i| i as u64).to_le_bytes();
        let h = fnv1a(&[&self.seed.to_le_bytes(), task, sample_id.as_bytes(), &sig]);
        (h % (MAX_JUDGE_SCORE as u64 + 1)) as u8
    }
}

impl JudgeClient for MockJudge {
    fn complete(&self, r: &JudgeRequest<'_>) -> Result<String, JudgeError> {
        Ok(format!("Score: {}", self.score_for(r.task, r.sample_id, r.signal_index)))
    }
}

/// Judge with canned responses keyed by `(sample id, signal index)`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedJudge {
    pub responses: HashMap<(String, Option<usize>), String>,
    /// Used when no entry matches; `None` makes the judge unavailable.
    pub fallback: Option<String>,
}

impl ScriptedJudge {
    pub fn constant(score: u8) -> Self {
        Self {
            responses: HashMap::new(),
            fallback: Some(score.to_string()),
        }
    }

    pub fn with(mut self, sample_id: &str, signal_index: Option<usize>, response: impl Into<String>) -> Self {
        self.responses
            .insert((sample_id.to_string(), signal_index), response.into());
        self
    }
}

impl JudgeClient for ScriptedJudge {
    fn complete(&self, r: &JudgeRequest<'_>) -> Result<String, JudgeError> {
        self.responses
            .get(&(r.sample_id.to_string(), r.signal_index))
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| JudgeError::Unavailable(format!("no scripted response for {}", r.sample_id)))
    }
}

/// Wire format of [`HttpJudge`] requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpJudgeRequest {
    pub task: JudgeTask,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_index: Option<usize>,
    pub prompt: String,
    /// Base64 (standard alphabet, padded) image payloads.
    #[serde(default)]
    pub images: Vec<String>,
}

/// Wire format of [`HttpJudge`] responses: either raw model text or an
/// already-parsed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpJudgeResponse {
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub score: Option<i64>,
}

/// Posts each request as JSON to a fixed endpoint.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl JudgeClient for HttpJudge {
    fn complete(&self, r: &JudgeRequest<'_>) -> Result<String, JudgeError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = HttpJudgeRequest {
            task: r.task,
            sample_id: r.sample_id.to_string(),
            signal_index: r.signal_index,
            prompt: r.prompt.clone(),
            images: r.images.iter().map(|img| b64.encode(img)).collect(),
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        let parsed: HttpJudgeResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| JudgeError::Protocol(e.to_string()))?;
        match (parsed.output, parsed.score) {
            (Some(text), _) => Ok(text),
            (None, Some(score)) => Ok(score.to_string()),
            (None, None) => Err(JudgeError::Protocol("response has neither output nor score".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn score_parser_clamps_and_finds_first_integer() {
        assert_eq!(parse_judge_score("4"), Some(4));
        assert_eq!(parse_judge_score("Score: 3/5"), Some(3));
        assert_eq!(parse_judge_score("I'd say 9"), Some(5));
        assert_eq!(parse_judge_score("-2"), Some(0));
        assert_eq!(parse_judge_score("99999999999999999999999"), Some(5));
        assert_eq!(parse_judge_score("no idea"), None);
    }

    #[test]
    fn mock_judge_is_deterministic_and_seeded() {
        let a = MockJudge { seed: 7 };
        let s1: Vec<u8> = (0..50).map(|i| a.score_for(JudgeTask::Grounding, &format!("s{i}"), Some(0))).collect();
        let s2: Vec<u8> = (0..50).map(|i| a.score_for(JudgeTask::Grounding, &format!("s{i}"), Some(0))).collect();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|s| *s <= 5));
        assert!(s1.iter().any(|s| *s >= 3) && s1.iter().any(|s| *s < 3));
        let b = MockJudge { seed: 8 };
        let s3: Vec<u8> = (0..50).map(|i| b.score_for(JudgeTask::Grounding, &format!("s{i}"), Some(0))).collect();
        assert_ne!(s1, s3);
    }

    #[test]
    fn scripted_judge_falls_back() {
        let j = ScriptedJudge::default().with("a", None, "5");
        let req = |id| JudgeRequest {
            task: JudgeTask::Correctness,
            sample_id: id,
            signal_index: None,
            prompt: String::new(),
            images: vec![],
        };
        assert_eq!(j.complete(&req("a")).unwrap(), "5");
        assert!(j.complete(&req("b")).is_err());
    }

    fn serve_once(body: &'static str) -> (String, std::thread::JoinHandle<HttpJudgeRequest>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/judge", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            serde_json::from_slice(&buf).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn http_judge_round_trip() {
        let (url, server) = serve_once(r#"{"output":"Score: 4"}"#);
        let judge = HttpJudge::new(url, Duration::from_secs(5));
        let image = [1u8, 2, 3];
        let out = judge
            .complete(&JudgeRequest {
                task: JudgeTask::Grounding,
                sample_id: "s1",
                signal_index: Some(2),
                prompt: "check".into(),
                images: vec![&image],
            })
            .unwrap();
        assert_eq!(parse_judge_score(&out), Some(4));
        let seen = server.join().unwrap();
        assert_eq!(seen.task, JudgeTask::Grounding);
        assert_eq!(seen.signal_index, Some(2));
        assert_eq!(seen.images, vec!["AQID".to_string()]);
    }

    #[test]
    fn http_judge_unreachable_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/judge", listener.local_addr().unwrap());
        drop(listener);
        let judge = HttpJudge::new(url, Duration::from_secs(2));
        let err = judge
            .complete(&JudgeRequest {
                task: JudgeTask::Correctness,
                sample_id: "s",
                signal_index: None,
                prompt: String::new(),
                images: vec![],
            })
            .unwrap_err();
        assert!(matches!(err, JudgeError::Unavailable(_)));
    }
}
