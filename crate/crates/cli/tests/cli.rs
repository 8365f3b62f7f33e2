use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output};

use vgr_core::datakit::{PipelineReport, StatsTable};
use vgr_core::replay_engine::TranscriptElement;
use vgr_core::{BudgetReport, LossValue};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fixtures.jsonl")
}

fn vgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgr"))
        .args(args)
        .env_remove("VGR_JUDGE_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn temp_file(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn budget_json_round_trips() {
    let o = vgr(&["budget", "--crops", "20"]);
    assert_eq!(o.status.code(), Some(0));
    let b: BudgetReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((b.total, b.baseline_total), (864, 2880));
}

#[test]
fn budget_from_image_size_reports_layout() {
    let o = vgr(&["budget", "--width", "672", "--height", "672"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((v["rows"].as_u64(), v["cols"].as_u64()), (Some(2), Some(2)));
    assert_eq!(v["total"], 144 + 4 * 36);
}

#[test]
fn budget_table() {
    let o = vgr(&["--table", "budget", "--crops", "20"]);
    let text = stdout(&o);
    assert!(text.contains("total            864"));
    assert!(text.contains("ratio            0.30"));
}

#[test]
fn config_file_values_and_flag_precedence() {
    let cfg = temp_file("[pooling]\nlocal_stride = 2\n", ".toml");
    let path = cfg.path().to_str().unwrap();
    let o = vgr(&["--config", path, "budget", "--crops", "20"]);
    let b: BudgetReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(b.local_tokens, 20 * 144);
    let o = vgr(&["--config", path, "budget", "--crops", "20", "--local-pool", "4"]);
    let b: BudgetReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(b.local_tokens, 720);
}

#[test]
fn bad_config_is_a_usage_error() {
    let cfg = temp_file("patch_stride = 13\n", ".toml");
    let o = vgr(&["--config", cfg.path().to_str().unwrap(), "budget", "--crops", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("patch_stride"));
}

#[test]
fn loss_json_and_gradient() {
    let o = vgr(&["loss", "--pred", "0,0,0.5,0.5", "--gt", "0.25,0.25,0.75,0.75", "--grad"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let l: LossValue = serde_json::from_value(v.clone()).unwrap();
    assert!((l.total - 2.658730).abs() < 1e-6);
    assert_eq!(v["grad"].as_array().unwrap().len(), 4);

    let o = vgr(&["loss", "--pred", "0.5,0.5,0.2,0.2", "--gt", "0.5,0.5,0.2,0.2", "--form", "center", "--beta", "0"]);
    let l: LossValue = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn loss_rejects_bad_boxes() {
    assert_eq!(vgr(&["loss", "--pred", "0,0,1", "--gt", "0,0,1,1"]).status.code(), Some(2));
    assert_eq!(vgr(&["loss", "--pred", "0,0,x,1", "--gt", "0,0,1,1"]).status.code(), Some(2));
    assert_eq!(vgr(&["loss", "--pred", "0,0,1,1"]).status.code(), Some(2));
}

#[test]
fn validate_report_round_trips_and_writes_survivors() {
    let out = tempfile::NamedTempFile::new().unwrap();
    let o = vgr(&[
        "validate",
        "--mock-judge",
        "--seed",
        "7",
        "--workers",
        "3",
        "--output",
        out.path().to_str().unwrap(),
        fixture().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let r: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r.is_conserved());
    let survivors = std::fs::read_to_string(out.path()).unwrap();
    assert_eq!(survivors.lines().count(), r.survivors);

    // Survivors pass every gate again.
    let o = vgr(&["validate", "--mock-judge", "--seed", "7", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn validate_needs_a_judge() {
    let o = vgr(&["validate", fixture().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn judge_url_from_environment() {
    // Nothing listens here; every judge call is deferred rather than failing the run.
    let o = Command::new(env!("CARGO_BIN_EXE_vgr"))
        .args(["validate", fixture().to_str().unwrap()])
        .env("VGR_JUDGE_URL", "http://127.0.0.1:9/judge")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let r: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r.correctness.deferred > 0);
}

#[test]
fn judge_from_config_file() {
    let cfg = temp_file("[judge]\nmock = true\nseed = 7\n", ".toml");
    let a = vgr(&["--config", cfg.path().to_str().unwrap(), "validate", fixture().to_str().unwrap()]);
    let b = vgr(&["validate", "--mock-judge", "--seed", "7", fixture().to_str().unwrap()]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn missing_dataset_is_an_error() {
    assert_eq!(vgr(&["validate", "--mock-judge", "/nonexistent.jsonl"]).status.code(), Some(2));
}

#[test]
fn stats_matches_fixture() {
    let o = vgr(&["stats", fixture().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let t: StatsTable = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(t.total, 10);
    assert_eq!(t.type_count("OCR"), 2);
    assert_eq!(t.per_source.values().sum::<usize>(), 10);
}

#[test]
fn simulate_emits_transcript_jsonl() {
    let script = temp_file("see <sot>[0,0,28,28]<eot> then answer", ".txt");
    let o = vgr(&["simulate", script.path().to_str().unwrap(), "--chunk-chars", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    let last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(last["replay_count"], 1);
    let elements: Vec<TranscriptElement> = lines[..lines.len() - 1]
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let replay = elements
        .iter()
        .find_map(|e| match e {
            TranscriptElement::Replay { token_count, .. } => Some(*token_count),
            _ => None,
        })
        .unwrap();
    assert_eq!(replay, 1);
    assert_eq!(vgr(&["simulate", script.path().to_str().unwrap()]).stdout, vgr(&["simulate", script.path().to_str().unwrap()]).stdout);
}

#[test]
fn simulate_jsonl_script_and_halt() {
    let script = temp_file("\"a <sot>[1,\"\n\"2]<eot> b\"\n", ".jsonl");
    let path = script.path().to_str().unwrap();
    let o = vgr(&["simulate", path]);
    assert_eq!(o.status.code(), Some(0));
    let o = vgr(&["simulate", path, "--on-invalid", "halt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("\"policy_halt\""));
}

#[test]
fn simulate_on_a_real_image() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = dir.path().join("img.ppm");
    let mut data = b"P6\n28 28\n255\n".to_vec();
    data.extend(std::iter::repeat_n([255u8, 0, 0], 28 * 28).flatten());
    std::fs::write(&ppm, data).unwrap();
    let script = temp_file("<sot>[0,0,336,336]<eot>", ".txt");
    let o = vgr(&["simulate", script.path().to_str().unwrap(), "--image", ppm.to_str().unwrap(), "--table"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("-> 144 tokens"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(vgr(&[]).status.code(), Some(2));
    assert_eq!(vgr(&["budget", "--crops", "x"]).status.code(), Some(2));
    assert_eq!(vgr(&["budget"]).status.code(), Some(2));
    assert_eq!(vgr(&["--help"]).status.code(), Some(0));
}
