//! Curation of grounded reasoning samples.

pub mod anls;
pub mod judge;
pub mod pipeline;
pub mod prompts;
pub mod record;
pub mod rewrite;
pub mod stats;
pub mod verify;

pub use anls::{anls, anls_best, DEFAULT_ANLS_THRESHOLD};
pub use judge::{
    parse_judge_score, HttpJudge, JudgeClient, JudgeError, JudgeRequest, JudgeTask, MockJudge, ScriptedJudge,
    DEFAULT_JUDGE_THRESHOLD, MAX_JUDGE_SCORE,
};
pub use pipeline::{
    process_sample, read_jsonl, run_pipeline, write_jsonl, BlankImageSource, DirImageSource, ImageSource, Judges,
    PipelineConfig, PipelineOutput, PipelineReport, RecordError, Rejection, SourceTotals, StageTotals,
};
pub use record::{GroundTruth, Outcome, SampleRecord, Stage, TaskType, Verdict};
pub use rewrite::{accept_rewrite, rewrite_request, RewriteMode};
pub use stats::{dataset_stats, StatsTable};
pub use verify::{
    extract_final_answer, verify_correctness, verify_format, verify_grounding, VerifyConfig, DEFAULT_EXPAND_MARGIN,
};
