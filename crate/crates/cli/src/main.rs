//! `qnnv`: verify robustness queries against a quantized model file.
//!
//! Exit codes: 0 when every query is decided (ROBUST, UNSAFE or a
//! misclassified center), 2 when any query ends UNKNOWN, 1 on errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qnnv_core::interval::analyze;
use qnnv_core::pipeline::{verify, verify_batch, Mode, Status, VerifyConfig};
use qnnv_core::query::load_queries;
use qnnv_core::{load_model, QuantModel, RobustnessQuery};

#[derive(Debug, Parser)]
#[command(name = "qnnv", version, about = "Robustness verification for integer-quantized neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify a single query.
    Verify(VerifyArgs),
    /// Verify every query of a query file and write a report.
    Batch(BatchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Quantized model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// ilp, ilp+in or eqv.
    #[arg(long, default_value = "eqv")]
    mode: Mode,
    /// Per-query budget in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Seed for the attack's random restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of attack starts (the first is the center).
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Center point: JSON array of integers.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    label: usize,
    #[arg(long)]
    radius: i64,
    /// Write each integer program in LP format into this directory.
    #[arg(long)]
    emit_lp: Option<PathBuf>,
    /// Write the propagated bounds (variable name → [lo, hi]) as JSON.
    #[arg(long)]
    bounds_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BatchArgs {
    #[command(flatten)]
    common: Common,
    /// JSON array of {"input": [...], "label": n, "radius": r}.
    #[arg(long)]
    queries: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report output (JSON); printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write each integer program in LP format into this directory.
    #[arg(long)]
    emit_lp: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load(path: &Path) -> Result<QuantModel> {
    load_model(&read(path)?).with_context(|| format!("invalid model {}", path.display()))
}

fn config(c: &Common, emit_lp: Option<PathBuf>) -> Result<(VerifyConfig, Duration)> {
    if !(c.timeout.is_finite() && c.timeout > 0.0) {
        bail!("--timeout must be a positive number of seconds");
    }
    let mut cfg = VerifyConfig::with_mode(c.mode);
    cfg.attack.seed = c.seed;
    cfg.attack.restarts = c.restarts.max(1);
    cfg.emit_lp = emit_lp;
    Ok((cfg, Duration::from_secs_f64(c.timeout)))
}

fn lp_prefix(dir: &Option<PathBuf>, stem: &str) -> Result<Option<PathBuf>> {
    match dir {
        Some(d) => {
            fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
            Ok(Some(d.join(stem)))
        }
        None => Ok(None),
    }
}

fn run_verify(a: VerifyArgs) -> Result<bool> {
    let model = load(&a.common.model)?;
    let center: Vec<i64> = serde_json::from_slice(&read(&a.input)?)
        .with_context(|| format!("{} must be a JSON array of integers", a.input.display()))?;
    let (cfg, timeout) = config(&a.common, lp_prefix(&a.emit_lp, "query")?)?;
    let query = RobustnessQuery::new(center, a.label, a.radius, timeout);
    if let Some(path) = &a.bounds_dump {
        let analysis = analyze(&model, &query)?;
        fs::write(path, analysis.bounds.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let v = verify(&model, &query, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(v.status != Status::Unknown)
}

fn run_batch(a: BatchArgs) -> Result<bool> {
    let model = load(&a.common.model)?;
    let (cfg, timeout) = config(&a.common, lp_prefix(&a.emit_lp, "batch")?)?;
    let queries = load_queries(&read(&a.queries)?, timeout)?;
    let report = verify_batch(&model, &queries, &cfg, a.jobs)?;
    let json = report.to_json();
    match &a.report {
        Some(path) => {
            fs::write(path, &json).with_context(|| format!("cannot write {}", path.display()))?;
            eprintln!(
                "{} queries: ROBUST {:.1}%  UNSAFE {:.1}%  UNKNOWN {:.1}%  MISCLASSIFIED {:.1}%  \
                 (attack {}, interval {}, ilp {})  {:.2}s",
                report.total,
                report.rob_pct,
                report.uns_pct,
                report.unk_pct,
                report.mis_pct,
                report.by_stage.attack,
                report.by_stage.interval,
                report.by_stage.ilp,
                report.elapsed_s
            );
        }
        None => println!("{json}"),
    }
    Ok(report.unknown == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Batch(a) => run_batch(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
