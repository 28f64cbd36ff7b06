//! `bolt`: command-line driver for the spectral-basis pipeline.
//!
//! Every subcommand composes `bolt_core` operations, writes its artifacts as
//! BTC-v1 containers and appends one JSON line to the results log.

mod commands;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bolt_core::BoltError;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "bolt", version, about = "Orthogonal spectral bases and diagonal-coefficient adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Results log (JSON lines, appended).
    #[arg(long, default_value = "results.jsonl")]
    pub log: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample every dataset of a task family into a directory.
    Gen(GenArgs),
    /// Train the base model on the anchor data.
    Pretrain(PretrainArgs),
    /// Fine-tune one checkpoint per source dataset.
    FinetuneSources(FinetuneSourcesArgs),
    /// Build per-layer orthogonal bases from source checkpoints.
    BuildBasis(BuildBasisArgs),
    /// Pool source coefficients and pick the rescaling α.
    Init(InitArgs),
    /// Few-shot training of the diagonal coefficients.
    Adapt(AdaptArgs),
    /// Label-free test-time adaptation of the coefficients.
    Tta(TtaArgs),
    /// Task-arithmetic merge of source checkpoints.
    Merge(MergeArgs),
    /// Rank and task-count ablation grid, written as CSV.
    Ablate(AblateArgs),
    /// Print a container manifest.
    Inspect(InspectArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Pretrain(_) => "pretrain",
            Command::FinetuneSources(_) => "finetune-sources",
            Command::BuildBasis(_) => "build-basis",
            Command::Init(_) => "init",
            Command::Adapt(_) => "adapt",
            Command::Tta(_) => "tta",
            Command::Merge(_) => "merge",
            Command::Ablate(_) => "ablate",
            Command::Inspect(_) => "inspect",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen(a) => &a.common,
            Command::Pretrain(a) => &a.common,
            Command::FinetuneSources(a) => &a.common,
            Command::BuildBasis(a) => &a.common,
            Command::Init(a) => &a.common,
            Command::Adapt(a) => &a.common,
            Command::Tta(a) => &a.common,
            Command::Merge(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::Inspect(a) => &a.common,
        }
    }

    fn config(&self) -> serde_json::Value {
        let v = match self {
            Command::Gen(a) => serde_json::to_value(a),
            Command::Pretrain(a) => serde_json::to_value(a),
            Command::FinetuneSources(a) => serde_json::to_value(a),
            Command::BuildBasis(a) => serde_json::to_value(a),
            Command::Init(a) => serde_json::to_value(a),
            Command::Adapt(a) => serde_json::to_value(a),
            Command::Tta(a) => serde_json::to_value(a),
            Command::Merge(a) => serde_json::to_value(a),
            Command::Ablate(a) => serde_json::to_value(a),
            Command::Inspect(a) => serde_json::to_value(a),
        };
        v.expect("argument structs serialize")
    }

    fn run(&self) -> anyhow::Result<Metrics> {
        match self {
            Command::Gen(a) => gen(a),
            Command::Pretrain(a) => pretrain(a),
            Command::FinetuneSources(a) => finetune_sources(a),
            Command::BuildBasis(a) => build_basis(a),
            Command::Init(a) => init(a),
            Command::Adapt(a) => adapt(a),
            Command::Tta(a) => tta(a),
            Command::Merge(a) => merge(a),
            Command::Ablate(a) => ablate(a),
            Command::Inspect(a) => inspect(a),
        }
    }
}

pub type Metrics = BTreeMap<String, f64>;

#[derive(Serialize)]
struct ExperimentRecord<'a> {
    command: &'a str,
    config: serde_json::Value,
    metrics: &'a Metrics,
    seed: u64,
    timestamp: String,
}

fn append_record(cmd: &Command, metrics: &Metrics) -> std::io::Result<()> {
    let common = cmd.common();
    let mut config = cmd.config();
    // The shared flags are flattened into every argument struct; keep them once, at top level.
    if let Some(obj) = config.as_object_mut() {
        if let Some(serde_json::Value::Object(shared)) = obj.remove("common") {
            obj.extend(shared);
        }
    }
    let record = ExperimentRecord {
        command: cmd.name(),
        config,
        metrics,
        seed: common.seed,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    };
    let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
    if let Some(parent) = common.log.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(&common.log)?;
    writeln!(f, "{line}")
}

/// The error chain joined by ": ", skipping causes already spelled out by
/// the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<BoltError>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cmd = cli.command;
    let (code, metrics) = match cmd.run() {
        Ok(m) => (0, m),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let code = exit_code(&e);
            (code, Metrics::from([("exit_code".to_string(), code as f64)]))
        }
    };
    if let Err(e) = append_record(&cmd, &metrics) {
        eprintln!("error: cannot append to {}: {e}", cmd.common().log.display());
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
