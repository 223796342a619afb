//! Batch entry points for the egocentric action-recognition pipeline.
//!
//! Every command reads one TOML config, writes its outputs to
//! `<output>/runs/<config-hash>-<timestamp>/`, prints a one-line JSON
//! summary on stdout and, on failure, a one-line JSON error record on stderr.

mod cache;
mod config;
mod error;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::cache::content_hash;
use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::{Pipeline, Summary};

#[derive(Parser, Debug)]
#[command(name = "egoaction", version, about = "Two-stream egocentric action recognition pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults to the toy synthetic setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-frame and per-sample stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; the reference mode for reproducibility.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Render the synthetic dataset described by `[synth]`.
    Synth,
    /// Dense optical flow between consecutive central crops.
    Flow,
    /// Remove head motion from the cached flow.
    Compensate,
    /// Build the RGB and flow stream frames.
    Preprocess,
    /// Per-split normalization statistics.
    Stats,
    /// Train both streams for every leave-one-subject-out split.
    Train,
    /// Evaluate the trained splits and write the report.
    Eval,
    /// Class-activation heatmaps of the RGB stream on held-out frames.
    Gradcam,
    /// Summarize an evaluation report.
    Report {
        /// A `report.json`; defaults to the most recent under `<output>/runs`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Flow => "flow",
            Command::Compensate => "compensate",
            Command::Preprocess => "preprocess",
            Command::Stats => "stats",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcam => "gradcam",
            Command::Report { .. } => "report",
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(&cli) {
        Ok(summary) => println!("{}", serde_json::to_string(&summary).expect("summary serializes")),
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record(command)).expect("record serializes"));
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: &Cli) -> Result<Summary, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = BTreeMap::new();
    if let Some(s) = cli.seed {
        cfg.seed = s;
        overrides.insert("seed", json!(s));
    }
    let jobs = if cli.deterministic { Some(1) } else { cli.jobs };
    if let Some(n) = jobs {
        overrides.insert("jobs", json!(n));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| egoaction::Error::InvalidArgument(e.to_string()))?;
    }
    if cli.deterministic {
        overrides.insert("deterministic", json!(true));
    }

    let pipeline = Pipeline::new(cfg);
    let run_dir = create_run_dir(&pipeline.cfg)?;
    let result = dispatch(&pipeline, &cli.command, &run_dir);
    let provenance = json!({
        "command": cli.command.name(),
        "config": pipeline.cfg,
        "config_hash": content_hash(&pipeline.cfg),
        "overrides": overrides,
        "cache_root": pipeline.cache.root(),
    });
    std::fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&provenance)?)?;
    let summary = match result {
        Ok(s) => s,
        Err(e) => {
            let record = serde_json::to_string_pretty(&e.record(cli.command.name()))?;
            std::fs::write(run_dir.join("error.json"), record)?;
            return Err(e);
        }
    };
    for (name, value) in &summary.artifacts {
        std::fs::write(run_dir.join(name), serde_json::to_string_pretty(value)?)?;
    }
    Ok(summary.with("run_dir", run_dir.display().to_string()))
}

fn dispatch(p: &Pipeline, command: &Command, run_dir: &Path) -> Result<Summary, CliError> {
    match command {
        Command::Synth => p.synth(),
        Command::Flow => p.flow(),
        Command::Compensate => p.compensate(),
        Command::Preprocess => p.preprocess(),
        Command::Stats => p.stats(),
        Command::Train => p.train(),
        Command::Eval => {
            let (summary, report) = p.eval()?;
            report.write(run_dir)?;
            Ok(summary)
        }
        Command::Gradcam => p.gradcam(&run_dir.join("gradcam")),
        Command::Report { input } => {
            let path = match input {
                Some(p) => p.clone(),
                None => latest_report(&p.cfg.output_root().join("runs"), run_dir)?,
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::missing("eval", format!("{}: {e}", path.display())))?;
            let report: Value = serde_json::from_str(&text)?;
            let table = render_summary(&report);
            print!("{table}");
            std::fs::write(run_dir.join("summary.md"), &table)?;
            Ok(Summary::new("report", cache::CacheTally::default()).with("input", path.display().to_string()))
        }
    }
}

fn create_run_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let runs = cfg.output_root().join("runs");
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{}-{stamp}", &content_hash(cfg)[..8]);
    std::fs::create_dir_all(&runs)?;
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = runs.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}

/// Newest `report.json` by modification time, ignoring the current run.
fn latest_report(runs: &Path, current: &Path) -> Result<PathBuf, CliError> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    if let Ok(entries) = std::fs::read_dir(runs) {
        for e in entries.flatten() {
            let p = e.path().join("report.json");
            if e.path() == current || !p.is_file() {
                continue;
            }
            let t = std::fs::metadata(&p)?.modified()?;
            if best.as_ref().is_none_or(|(bt, _)| t > *bt) {
                best = Some((t, p));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| CliError::missing("eval", format!("no report.json under {}", runs.display())))
}

fn render_summary(report: &Value) -> String {
    let pct = |v: &Value| v.as_f64().map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut out = String::from("| stream | frame accuracy | average recall |\n|---|---|---|\n");
    for stream in ["rgb", "flow", "combined"] {
        let r = &report[stream];
        out += &format!("| {stream} | {} | {} |\n", pct(&r["frame_accuracy"]), pct(&r["average_recall"]));
    }
    if let Some(splits) = report["combined"]["per_split"].as_array() {
        out += "\n| held-out subject | frames | combined accuracy |\n|---|---|---|\n";
        for s in splits {
            out += &format!(
                "| {} | {} | {} |\n",
                s["held_out_subject"].as_str().unwrap_or("?"),
                s["frames"],
                pct(&s["accuracy"])
            );
        }
    }
    if let Some(failed) = report["splits"].as_array() {
        for s in failed.iter().filter(|s| !s["error"].is_null()) {
            out += &format!("\nfailed split {}: {}\n", s["held_out_subject"], s["error"]);
        }
    }
    out
}
