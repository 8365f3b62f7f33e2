//! `vgr`: token budgets, replay simulation, loss evaluation and dataset
//! validation from the command line.

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::CliConfig;
use vgr_core::datakit::{
    dataset_stats, read_jsonl, run_pipeline, write_jsonl, BlankImageSource, DirImageSource, HttpJudge, ImageSource,
    JudgeClient, Judges, MockJudge, PipelineConfig, PipelineReport, StatsTable,
};
use vgr_core::det_loss::{det_loss_with_grad, LossValue};
use vgr_core::feature_pool::{
    build_pool, build_pool_blank, token_budget_for, BudgetReport, CoordinateEncoder, PatchMeanEncoder, PixelGrid,
    BASELINE_CROPS,
};
use vgr_core::replay_engine::{
    run_generation, CoordSpace, InvalidSignalAction, ScriptedGenerator, Termination, Transcript, TranscriptElement,
};
use vgr_core::{select_grid, CenterBox, GridSpec};

#[derive(Debug, Parser)]
#[command(name = "vgr", version, about = "Grounded visual reasoning toolkit")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Human-readable table instead of JSON.
    #[arg(long, global = true)]
    table: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Visual token count for a crop layout.
    Budget(BudgetArgs),
    /// Run a scripted generator against a toy feature pool.
    Simulate(SimulateArgs),
    /// Detection loss for a predicted and ground-truth box.
    Loss(LossArgs),
    /// Run the rejection-sampling gates over a JSONL dataset.
    Validate(ValidateArgs),
    /// Per-source and per-type counts of a JSONL dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct PoolingFlags {
    #[arg(long)]
    snapshot_pool: Option<usize>,
    #[arg(long)]
    local_pool: Option<usize>,
    #[arg(long)]
    replay_pool: Option<usize>,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    patch_stride: Option<u32>,
    #[arg(long)]
    max_crops: Option<usize>,
}

impl PoolingFlags {
    fn apply(&self, cfg: &mut CliConfig) {
        if let Some(v) = self.snapshot_pool {
            cfg.pooling.snapshot_stride = v;
        }
        if let Some(v) = self.local_pool {
            cfg.pooling.local_stride = v;
        }
        if let Some(v) = self.replay_pool {
            cfg.pooling.replay_stride = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.patch_stride {
            cfg.patch_stride = v;
        }
        if let Some(v) = self.max_crops {
            cfg.max_crops = v;
        }
    }
}

#[derive(Debug, Args)]
struct BudgetArgs {
    /// Number of local crops. Mutually exclusive with --width/--height.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    crops: Option<usize>,
    /// Original image width; the layout is chosen automatically.
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
    /// Crop count of the unpooled reference configuration.
    #[arg(long, default_value_t = BASELINE_CROPS)]
    baseline_crops: usize,
    #[command(flatten)]
    pooling: PoolingFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnInvalid {
    Skip,
    Halt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Coords {
    Resized,
    Original,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Generator script: plain text, or `.jsonl` with one JSON string chunk per line.
    script: PathBuf,
    /// Chunk size in characters for plain-text scripts.
    #[arg(long, default_value_t = 16)]
    chunk_chars: usize,
    /// Original image width (default: one patch).
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Encode this image with per-patch mean colours instead of the
    /// coordinate encoder.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    image: Option<PathBuf>,
    /// Channels of the coordinate encoder.
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long)]
    max_replays: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, value_enum)]
    on_invalid: Option<OnInvalid>,
    #[arg(long, value_enum)]
    coords: Option<Coords>,
    #[command(flatten)]
    pooling: PoolingFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BoxFormArg {
    /// x1,y1,x2,y2
    Corner,
    /// xc,yc,w,h
    Center,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Predicted box, four comma-separated normalized numbers.
    #[arg(long, allow_hyphen_values = true)]
    pred: String,
    #[arg(long, allow_hyphen_values = true)]
    gt: String,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = BoxFormArg::Corner)]
    form: BoxFormArg,
    /// Include the gradient with respect to the center-form prediction.
    #[arg(long)]
    grad: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    dataset: PathBuf,
    /// Use the deterministic in-process judge.
    #[arg(long)]
    mock_judge: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Remote judge endpoint.
    #[arg(long, env = "VGR_JUDGE_URL", conflicts_with = "mock_judge")]
    judge_url: Option<String>,
    /// Directory that image references are relative to.
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Write surviving samples here as JSONL.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    dataset: PathBuf,
}

/// A command's result: what to print and whether validation failures exist.
struct Outcome {
    text: String,
    failures: bool,
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    CliConfig::load(path)
}

fn cmd_budget(args: &BudgetArgs, mut cfg: CliConfig, table: bool) -> Result<Outcome> {
    args.pooling.apply(&mut cfg);
    cfg.validate()?;
    if args.baseline_crops == 0 {
        bail!("--baseline-crops must be at least 1");
    }
    let cells = (cfg.patch_size / cfg.patch_stride) as usize;
    #[derive(Serialize)]
    struct Out {
        #[serde(skip_serializing_if = "Option::is_none")]
        rows: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        cols: Option<usize>,
        #[serde(flatten)]
        budget: BudgetReport,
    }
    let out = match (args.crops, args.width, args.height) {
        (Some(crops), _, _) => {
            if crops == 0 {
                bail!("--crops must be at least 1");
            }
            Out {
                rows: None,
                cols: None,
                budget: token_budget_for(crops, cells, &cfg.pooling, args.baseline_crops),
            }
        }
        (None, Some(w), Some(h)) => {
            let grid = select_grid(w, h, cfg.patch_size, cfg.patch_stride, cfg.max_crops)?;
            Out {
                rows: Some(grid.rows),
                cols: Some(grid.cols),
                budget: token_budget_for(grid.crops(), cells, &cfg.pooling, args.baseline_crops),
            }
        }
        _ => bail!("budget needs --crops or --width and --height"),
    };
    let text = if table {
        let b = &out.budget;
        let mut t = String::new();
        if let (Some(r), Some(c)) = (out.rows, out.cols) {
            writeln!(t, "layout           {r}x{c}").unwrap();
        }
        writeln!(t, "crops            {}", b.crops).unwrap();
        writeln!(t, "cells per side   {}", b.cells_per_side).unwrap();
        writeln!(t, "snapshot tokens  {}", b.snapshot_tokens).unwrap();
        writeln!(t, "local tokens     {}", b.local_tokens).unwrap();
        writeln!(t, "total            {}", b.total).unwrap();
        writeln!(t, "baseline total   {} ({} crops)", b.baseline_total, b.baseline_crops).unwrap();
        writeln!(t, "ratio            {:.2}", b.ratio).unwrap();
        t
    } else {
        json(&out)
    };
    Ok(Outcome { text, failures: false })
}

fn read_script(path: &Path, chunk_chars: usize) -> Result<ScriptedGenerator> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let chunks = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str::<String>(l).with_context(|| format!("script line {}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScriptedGenerator::new(chunks))
    } else {
        if chunk_chars == 0 {
            bail!("--chunk-chars must be at least 1");
        }
        Ok(ScriptedGenerator::from_text(&text, chunk_chars))
    }
}

fn cmd_simulate(args: &SimulateArgs, mut cfg: CliConfig, table: bool) -> Result<Outcome> {
    args.pooling.apply(&mut cfg);
    if let Some(v) = args.max_replays {
        cfg.replay.max_replays = v;
    }
    if let Some(v) = args.max_tokens {
        cfg.replay.max_tokens_per_replay = v;
    }
    if let Some(v) = args.on_invalid {
        cfg.replay.on_invalid = match v {
            OnInvalid::Skip => InvalidSignalAction::Skip,
            OnInvalid::Halt => InvalidSignalAction::Halt,
        };
    }
    if let Some(v) = args.coords {
        cfg.replay.coords = match v {
            Coords::Resized => CoordSpace::Resized,
            Coords::Original => CoordSpace::Original,
        };
    }
    cfg.validate()?;
    if args.channels == 0 {
        bail!("--channels must be at least 1");
    }

    let pool = if let Some(path) = &args.image {
        let img = PixelGrid::open(path)?;
        let grid = select_grid(img.width, img.height, cfg.patch_size, cfg.patch_stride, cfg.max_crops)?;
        let resized = img.resize(grid.width, grid.height);
        build_pool(&resized, &grid, &PatchMeanEncoder, &cfg.pooling)?
    } else {
        let w = args.width.unwrap_or(cfg.patch_size);
        let h = args.height.unwrap_or(cfg.patch_size);
        let grid: GridSpec = select_grid(w, h, cfg.patch_size, cfg.patch_stride, cfg.max_crops)?;
        build_pool_blank(&grid, &CoordinateEncoder { channels: args.channels }, &cfg.pooling)?
    };

    let mut generator = read_script(&args.script, args.chunk_chars)?;
    let transcript = run_generation(&mut generator, &pool, &cfg.replay);
    let failures = transcript.termination != Termination::Completed;
    let text = if table { transcript_table(&transcript) } else { transcript.to_jsonl() };
    Ok(Outcome { text, failures })
}

fn transcript_table(t: &Transcript) -> String {
    let mut out = String::new();
    for e in &t.elements {
        match e {
            TranscriptElement::Text { text } => writeln!(out, "text      {text:?}"),
            TranscriptElement::Signal { raw, replayed, .. } => {
                writeln!(out, "signal    {raw}{}", if *replayed { "" } else { "  (not replayed)" })
            }
            TranscriptElement::InvalidSignal { raw, reason } => writeln!(out, "invalid   {raw}  ({reason})"),
            TranscriptElement::Incomplete { raw } => writeln!(out, "open      {raw}"),
            TranscriptElement::Replay { cells, token_count, .. } => writeln!(
                out,
                "replay    rows {}..{} cols {}..{} -> {token_count} tokens",
                cells.row_start, cells.row_end, cells.col_start, cells.col_end
            ),
        }
        .unwrap();
    }
    writeln!(out, "end       {:?}, {} replays", t.termination, t.replay_count).unwrap();
    for w in &t.warnings {
        writeln!(out, "warning   {w}").unwrap();
    }
    out
}

fn parse_box(text: &str, form: BoxFormArg) -> Result<CenterBox> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad box component {v:?}")))
        .collect::<Result<Vec<_>>>()?;
    let Ok([a, b, c, d]) = <[f64; 4]>::try_from(values) else {
        bail!("box {text:?} needs exactly four components");
    };
    if [a, b, c, d].iter().any(|v| !v.is_finite()) {
        bail!("box {text:?} has a non-finite component");
    }
    Ok(match form {
        BoxFormArg::Corner => CenterBox::from_corners(a.min(c), b.min(d), a.max(c), b.max(d)),
        BoxFormArg::Center => {
            if c < 0.0 || d < 0.0 {
                bail!("box {text:?} has a negative size");
            }
            CenterBox::new(a, b, c, d)
        }
    })
}

fn cmd_loss(args: &LossArgs, table: bool) -> Result<Outcome> {
    if !(args.beta >= 0.0 && args.beta.is_finite()) {
        bail!("--beta must be a finite non-negative number");
    }
    let pred = parse_box(&args.pred, args.form)?;
    let gt = parse_box(&args.gt, args.form)?;
    let (value, grad) = det_loss_with_grad(&pred, &gt, args.beta);
    #[derive(Serialize)]
    struct Out {
        #[serde(flatten)]
        value: LossValue,
        #[serde(skip_serializing_if = "Option::is_none")]
        grad: Option<[f64; 4]>,
    }
    let text = if table {
        let mut t = format!(
            "l1     {:.6}\ngiou   {:.6}\nbeta   {}\ntotal  {:.6}\n",
            value.l1, value.giou, value.beta, value.total
        );
        if args.grad {
            writeln!(t, "grad   {:?}", grad).unwrap();
        }
        t
    } else {
        json(&Out {
            value,
            grad: args.grad.then_some(grad),
        })
    };
    Ok(Outcome { text, failures: false })
}

fn open_dataset(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn cmd_validate(args: &ValidateArgs, mut cfg: CliConfig, table: bool) -> Result<Outcome> {
    if let Some(s) = args.seed {
        cfg.judge.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(root) = &args.image_root {
        cfg.image_root = Some(root.clone());
    }
    cfg.validate()?;

    let url = args.judge_url.clone().or_else(|| cfg.judge.url.clone());
    let judge: Box<dyn JudgeClient> = if args.mock_judge {
        Box::new(MockJudge { seed: cfg.judge.seed })
    } else if let Some(url) = url {
        Box::new(HttpJudge::new(url, Duration::from_secs(cfg.judge.timeout_secs)))
    } else if cfg.judge.mock {
        Box::new(MockJudge { seed: cfg.judge.seed })
    } else {
        bail!("no judge configured: pass --mock-judge or --judge-url (or set VGR_JUDGE_URL)");
    };

    let images: Box<dyn ImageSource> = match &cfg.image_root {
        Some(root) => Box::new(DirImageSource { root: root.clone() }),
        None => Box::new(BlankImageSource {
            width: cfg.patch_size,
            height: cfg.patch_size,
        }),
    };

    let records = read_jsonl(open_dataset(&args.dataset)?);
    let pipeline = PipelineConfig {
        verify: cfg.verify,
        workers: cfg.workers,
    };
    let out = run_pipeline(records, &pipeline, Judges::single(judge.as_ref()), images.as_ref());
    if let Some(path) = &args.output {
        let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(write_jsonl(&out.survivors).as_bytes())?;
    }
    let failures = out.report.has_failures();
    let text = if table { report_table(&out.report) } else { json(&out.report) };
    Ok(Outcome { text, failures })
}

fn report_table(r: &PipelineReport) -> String {
    let mut t = String::new();
    writeln!(t, "input {}  schema rejected {}", r.input, r.schema_rejected).unwrap();
    writeln!(t, "{:<12} {:>8} {:>8} {:>9} {:>8} {:>8}", "stage", "entered", "passed", "rewritten", "rejected", "deferred")
        .unwrap();
    for (name, s) in [("format", r.format), ("correctness", r.correctness), ("grounding", r.grounding)] {
        writeln!(
            t,
            "{:<12} {:>8} {:>8} {:>9} {:>8} {:>8}",
            name, s.entered, s.passed, s.rewritten, s.rejected, s.deferred
        )
        .unwrap();
    }
    writeln!(t, "survivors {}  pass rate {:.4}", r.survivors, r.pass_rate).unwrap();
    for (src, c) in &r.per_source {
        writeln!(t, "source {src:<20} {}/{}", c.passed, c.input).unwrap();
    }
    for rej in &r.rejected {
        writeln!(
            t,
            "line {:>5} {:<16} {:?}/{:?} {}",
            rej.line,
            rej.id.as_deref().unwrap_or("-"),
            rej.stage,
            rej.outcome,
            rej.reason
        )
        .unwrap();
    }
    t
}

fn cmd_stats(args: &StatsArgs, table: bool) -> Result<Outcome> {
    let rows = read_jsonl(open_dataset(&args.dataset)?);
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for r in rows {
        match r {
            Ok(r) => records.push(r),
            Err(e) => bad.push(e),
        }
    }
    let mut stats: StatsTable = dataset_stats(&records);
    for e in &bad {
        stats.warnings.push(format!("line {} skipped: {}", e.line, e.message));
    }
    let text = if table {
        let mut t = String::new();
        for (src, n) in &stats.per_source {
            writeln!(t, "source  {src:<20} {n}").unwrap();
        }
        for (ty, n) in &stats.per_type {
            writeln!(t, "type    {ty:<20} {n}").unwrap();
        }
        writeln!(t, "total   {:<20} {}", "", stats.total).unwrap();
        for w in &stats.warnings {
            writeln!(t, "warning {w}").unwrap();
        }
        t
    } else {
        json(&stats)
    };
    Ok(Outcome {
        text,
        failures: false,
    })
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Budget(a) => cmd_budget(a, cfg, cli.table),
        Command::Simulate(a) => cmd_simulate(a, cfg, cli.table),
        Command::Loss(a) => cmd_loss(a, cli.table),
        Command::Validate(a) => cmd_validate(a, cfg, cli.table),
        Command::Stats(a) => cmd_stats(a, cli.table),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.text.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(2);
            }
            if out.failures {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
