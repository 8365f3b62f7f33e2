//! End-to-end rejection sampling over a JSONL dataset.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::judge::JudgeClient;
use super::record::{Outcome, SampleRecord, Stage, Verdict};
use super::verify::{verify_correctness, verify_format, verify_grounding, VerifyConfig};
use crate::feature_pool::PixelGrid;

/// One input line that failed to parse as a [`SampleRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

/// Reads JSONL, one record (or error) per non-blank line. Line numbers are
/// 1-based.
pub fn read_jsonl(reader: impl BufRead) -> Vec<Result<SampleRecord, RecordError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(RecordError {
                line: i + 1,
                message: e.to_string(),
            })),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(serde_json::from_str(&l).map_err(|e| RecordError {
                line: i + 1,
                message: e.to_string(),
            })),
        })
        .collect()
}

pub fn write_jsonl(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Resolves a record's image reference to pixels.
pub trait ImageSource: Sync {
    fn load(&self, reference: &str) -> Result<PixelGrid, String>;
}

/// Images on disk, relative to a root directory.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    pub root: PathBuf,
}

impl ImageSource for DirImageSource {
    fn load(&self, reference: &str) -> Result<PixelGrid, String> {
        PixelGrid::open(self.root.join(reference)).map_err(|e| e.to_string())
    }
}

/// A uniform grey canvas for every reference; lets the grounding gate run
/// against mock judges without image files.
#[derive(Debug, Clone, Copy)]
pub struct BlankImageSource {
    pub width: u32,
    pub height: u32,
}

impl ImageSource for BlankImageSource {
    fn load(&self, _reference: &str) -> Result<PixelGrid, String> {
        Ok(PixelGrid::filled(self.width, self.height, [128, 128, 128]))
    }
}

#[derive(Clone, Copy)]
pub struct Judges<'a> {
    pub correctness: &'a dyn JudgeClient,
    pub grounding: &'a dyn JudgeClient,
}

impl<'a> Judges<'a> {
    pub fn single(judge: &'a dyn JudgeClient) -> Self {
        Self {
            correctness: judge,
            grounding: judge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub verify: VerifyConfig,
    /// Worker threads; 1 runs inline.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            verify: VerifyConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTotals {
    pub entered: usize,
    /// Includes rewritten samples.
    pub passed: usize,
    pub rewritten: usize,
    pub rejected: usize,
    pub deferred: usize,
}

impl StageTotals {
    fn record(&mut self, outcome: Outcome) {
        self.entered += 1;
        match outcome {
            Outcome::Pass => self.passed += 1,
            Outcome::Rewritten => {
                self.passed += 1;
                self.rewritten += 1;
            }
            Outcome::Reject => self.rejected += 1,
            Outcome::Deferred => self.deferred += 1,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.entered == self.passed + self.rejected + self.deferred
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTotals {
    pub input: usize,
    pub passed: usize,
}

/// A sample that did not survive, with the stage that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub id: Option<String>,
    pub stage: Stage,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input: usize,
    pub schema_rejected: usize,
    pub format: StageTotals,
    pub correctness: StageTotals,
    pub grounding: StageTotals,
    pub survivors: usize,
    /// `survivors / input`, 0 for an empty input.
    pub pass_rate: f64,
    pub per_source: BTreeMap<String, SourceTotals>,
    pub rejected: Vec<Rejection>,
}

impl PipelineReport {
    /// Stage counts chain into each other and every stage balances.
    pub fn is_conserved(&self) -> bool {
        self.input == self.schema_rejected + self.format.entered
            && self.format.passed == self.correctness.entered
            && self.correctness.passed == self.grounding.entered
            && self.grounding.passed == self.survivors
            && [self.format, self.correctness, self.grounding]
                .iter()
                .all(StageTotals::is_conserved)
            && self.rejected.len() == self.input - self.survivors
    }

    pub fn has_failures(&self) -> bool {
        self.survivors < self.input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    /// Surviving samples in input order, each carrying its verdicts.
    pub survivors: Vec<SampleRecord>,
}

/// Runs one sample through format, correctness and grounding. Verdicts from
/// earlier runs are discarded first; the first non-continuing stage ends it.
pub fn process_sample(
    mut sample: SampleRecord,
    cfg: &VerifyConfig,
    judges: Judges<'_>,
    images: &dyn ImageSource,
) -> SampleRecord {
    sample.verdicts.clear();
    let format = verify_format(&sample, cfg.parser);
    let go = format.outcome.continues();
    sample.verdicts.push(format);
    if !go {
        return sample;
    }
    let correctness = verify_correctness(&mut sample, judges.correctness, cfg);
    let go = correctness.outcome.continues();
    sample.verdicts.push(correctness);
    if !go {
        return sample;
    }
    let grounding = match images.load(&sample.image) {
        Ok(img) => verify_grounding(&sample, &img, judges.grounding, cfg),
        Err(e) => Verdict::deferred(Stage::Grounding, format!("image_unavailable: {e}")),
    };
    sample.verdicts.push(grounding);
    sample
}

pub fn run_pipeline(
    records: Vec<Result<SampleRecord, RecordError>>,
    cfg: &PipelineConfig,
    judges: Judges<'_>,
    images: &dyn ImageSource,
) -> PipelineOutput {
    let mut report = PipelineReport {
        input: records.len(),
        ..PipelineReport::default()
    };

    // Schema checks and duplicate ids are resolved in input order before any
    // parallel work.
    let mut seen = HashSet::new();
    let mut accepted = Vec::new();
    for (idx, rec) in records.into_iter().enumerate() {
        match rec {
            Err(e) => {
                report.schema_rejected += 1;
                report.rejected.push(Rejection {
                    line: e.line,
                    id: None,
                    stage: Stage::Schema,
                    outcome: Outcome::Reject,
                    reason: format!("schema: {}", e.message),
                });
            }
            Ok(r) if !seen.insert(r.id.clone()) => {
                report.schema_rejected += 1;
                report.rejected.push(Rejection {
                    line: idx + 1,
                    id: Some(r.id),
                    stage: Stage::Schema,
                    outcome: Outcome::Reject,
                    reason: "duplicate_id".into(),
                });
            }
            Ok(r) => accepted.push((idx + 1, r)),
        }
    }

    let verify = &cfg.verify;
    let processed: Vec<(usize, SampleRecord)> = if cfg.workers <= 1 {
        accepted
            .into_iter()
            .map(|(line, r)| (line, process_sample(r, verify, judges, images)))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            accepted
                .into_par_iter()
                .map(|(line, r)| (line, process_sample(r, verify, judges, images)))
                .collect()
        })
    };

    let mut survivors = Vec::new();
    for (line, sample) in processed {
        let totals = report.per_source.entry(sample.source.clone()).or_default();
        totals.input += 1;
        for v in &sample.verdicts {
            match v.stage {
                Stage::Format => report.format.record(v.outcome),
                Stage::Correctness => report.correctness.record(v.outcome),
                Stage::Grounding => report.grounding.record(v.outcome),
                Stage::Schema => {}
            }
        }
        let last = sample.verdicts.last().expect("format verdict always present");
        if last.stage == Stage::Grounding && last.outcome.continues() {
            totals.passed += 1;
            survivors.push(sample);
        } else {
            report.rejected.push(Rejection {
                line,
                id: Some(sample.id.clone()),
                stage: last.stage,
                outcome: last.outcome,
                reason: last.reason.clone().unwrap_or_default(),
            });
        }
    }
    report.rejected.sort_by_key(|r| r.line);
    report.survivors = survivors.len();
    report.pass_rate = if report.input == 0 {
        0.0
    } else {
        report.survivors as f64 / report.input as f64
    };
    PipelineOutput { report, survivors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::judge::ScriptedJudge;
    use crate::datakit::record::TaskType;

    fn rec(id: &str, reasoning: &str, answer: &str, truth: &str, task: TaskType) -> Result<SampleRecord, RecordError> {
        Ok(SampleRecord {
            id: id.into(),
            image: "img.png".into(),
            question: "q".into(),
            reasoning: reasoning.into(),
            final_answer: answer.into(),
            ground_truth: truth.into(),
            task_type: task,
            source: if id.starts_with('a') { "AI2D".into() } else { "GQA".into() },
            data_type: "General VQA".into(),
            verdicts: vec![],
        })
    }

    fn signal(label: &str) -> String {
        format!("look <sot>{{\"bbox_2d\":[10,10,50,50],\"label\":\"{label}\"}}<eot> ok\nFinal Answer: yes")
    }

    /// Four format rejects, two correctness rejects, one grounding reject.
    fn fixture() -> Vec<Result<SampleRecord, RecordError>> {
        use TaskType::*;
        vec![
            rec("a0", "no marker", "", "yes", ClosedEnded),
            rec("a1", "<sot>[1,2]<eot>\nFinal Answer: yes", "yes", "yes", ClosedEnded),
            rec("a2", "<sot>[1,2,3,4\nFinal Answer: yes", "yes", "yes", ClosedEnded),
            rec("a3", "Final Answer:", "", "yes", ClosedEnded),
            rec("b4", &signal("cat"), "zzz", "yes", ClosedEnded),
            rec("b5", &signal("cat"), "yes", "yes", OpenEnded),
            rec("b6", &signal("dog"), "yes", "yes", ClosedEnded),
            rec("b7", &signal("cat"), "yes", "yes", ClosedEnded),
            rec("b8", &signal("cat"), "yes", "yes", ClosedEnded),
            rec("b9", "plain reasoning\nFinal Answer: yes", "yes", "yes", ClosedEnded),
        ]
    }

    fn judge() -> ScriptedJudge {
        ScriptedJudge::constant(5).with("b5", None, "1").with("b6", Some(0), "2")
    }

    #[test]
    fn stage_counts_and_pass_rate() {
        let j = judge();
        let out = run_pipeline(fixture(), &PipelineConfig::default(), Judges::single(&j), &BlankImageSource { width: 64, height: 64 });
        let r = &out.report;
        assert_eq!(r.input, 10);
        assert_eq!(r.format.rejected, 4);
        assert_eq!(r.correctness.rejected, 2);
        assert_eq!(r.grounding.rejected, 1);
        assert_eq!(r.survivors, 3);
        assert_eq!(r.pass_rate, 0.3);
        assert!(r.is_conserved());
        assert_eq!(r.per_source["AI2D"], SourceTotals { input: 4, passed: 0 });
        assert_eq!(r.per_source["GQA"], SourceTotals { input: 6, passed: 3 });
        let ids: Vec<_> = out.survivors.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["b7", "b8", "b9"]);
        assert!(out.survivors.iter().all(|s| s.verdicts.len() == 3));
    }

    #[test]
    fn empty_input_reports_zero() {
        let j = judge();
        let out = run_pipeline(vec![], &PipelineConfig::default(), Judges::single(&j), &BlankImageSource { width: 8, height: 8 });
        assert_eq!(out.report, PipelineReport::default());
        assert_eq!(out.report.pass_rate, 0.0);
    }

    #[test]
    fn schema_errors_and_duplicates_do_not_abort() {
        let j = judge();
        let mut records = fixture();
        records.push(Err(RecordError { line: 11, message: "bad json".into() }));
        records.push(rec("b9", "dup\nFinal Answer: yes", "yes", "yes", TaskType::ClosedEnded));
        let out = run_pipeline(records, &PipelineConfig::default(), Judges::single(&j), &BlankImageSource { width: 64, height: 64 });
        assert_eq!(out.report.schema_rejected, 2);
        assert_eq!(out.report.survivors, 3);
        assert!(out.report.is_conserved());
    }

    #[test]
    fn parallel_run_matches_inline() {
        let j = judge();
        let imgs = BlankImageSource { width: 64, height: 64 };
        let a = run_pipeline(fixture(), &PipelineConfig::default(), Judges::single(&j), &imgs);
        let cfg = PipelineConfig { workers: 4, ..PipelineConfig::default() };
        let b = run_pipeline(fixture(), &cfg, Judges::single(&j), &imgs);
        assert_eq!(a, b);
    }

    #[test]
    fn missing_image_defers_grounding() {
        struct NoImages;
        impl ImageSource for NoImages {
            fn load(&self, r: &str) -> Result<PixelGrid, String> {
                Err(format!("{r}: not found"))
            }
        }
        let j = judge();
        let out = run_pipeline(fixture(), &PipelineConfig::default(), Judges::single(&j), &NoImages);
        assert_eq!(out.report.grounding.deferred, out.report.grounding.entered);
        assert_eq!(out.report.survivors, 0);
        assert!(out.report.is_conserved());
    }

    #[test]
    fn jsonl_reader_numbers_lines() {
        let text = "{\"id\":1}\n\n{bad\n";
        let rows = read_jsonl(text.as_bytes());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].as_ref().unwrap_err().line, 3);
    }
}
