//! Command-line entry point. Exit codes: 0 success, 1 partial or runtime
//! failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;
use tracecheck_capacity::{default_grid, run_grid, GridSpec};
use tracecheck_core::eval::{evaluate_manifest, load_dataset, render_table, Scorers};
use tracecheck_core::model::{Claim, EvidenceDocument, FeedbackInstruction, LabelSet};
use tracecheck_core::oracle::SyntheticExpertKnowledge;
use tracecheck_core::session::{BatchItem, BatchManifest, Protocol, SessionStatus, Strategy};

use crate::api::{self, ApiState};
use crate::config::{AppConfig, ConfigError};
use crate::wiring::{App, SetupError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tracecheck", version, about = "Claim verification with an editable thinking trace")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key; wins over the file and the environment.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Log filter used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify one claim and print the final solution.
    Verify(VerifyArgs),
    /// Run a dataset through the oracle loop and score it.
    Batch(BatchArgs),
    /// Enumerate the feedback-channel instances and write the report.
    Simulate(SimulateArgs),
    /// Score existing batch manifests.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub claim: String,
    #[arg(long, default_value = "cli")]
    pub claim_id: String,
    /// Comma-separated label set.
    #[arg(long, value_delimiter = ',', required = true)]
    pub labels: Vec<String>,
    #[arg(long, default_value = "trace_edit")]
    pub protocol: Protocol,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Evidence JSONL; skips retrieval.
    #[arg(long, value_name = "PATH")]
    pub evidence: Option<PathBuf>,
    /// Gold knowledge JSON; runs the oracle loop instead of a single pass.
    #[arg(long, value_name = "PATH")]
    pub knowledge: Option<PathBuf>,
    /// One feedback instruction for a single round; repeatable.
    #[arg(long)]
    pub feedback: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, default_value = "trace_edit")]
    pub protocol: Protocol,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Output directory; defaults to store.out_dir.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `default` or a JSON grid spec.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Report file.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "manifest", value_name = "PATH", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Write the metric reports as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => EXIT_PARTIAL,
            _ => EXIT_USAGE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn init_logging(filter: &str) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(filter));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging(&cli.log);
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let load = |strategy: Option<Strategy>| -> Result<AppConfig, CliError> {
        let mut config = AppConfig::load_from_env(cli.config.as_deref(), &cli.sets)?;
        if let Some(s) = strategy {
            config.session.strategy = s;
        }
        Ok(config)
    };
    match &cli.command {
        Command::Verify(args) => verify(App::build(load(args.strategy)?)?, args),
        Command::Batch(args) => batch(App::build(load(args.strategy)?)?, args),
        Command::Simulate(args) => {
            let out_dir = match &cli.config {
                Some(_) => load(None)?.store.out_dir,
                None => None,
            };
            simulate(args, out_dir)
        }
        Command::Eval(args) => {
            let scorers = match &cli.config {
                Some(_) => App::build(load(None)?)?.scorers,
                None => Scorers::default(),
            };
            eval(args, &scorers)
        }
        Command::Serve(args) => serve(App::build(load(None)?)?, args),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(runtime)?);
    Ok(())
}

fn verify(app: App, args: &VerifyArgs) -> Result<i32, CliError> {
    let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
    let claim = Claim::new(&args.claim_id, &args.claim).map_err(|e| usage(&e))?;
    let labels = LabelSet::new(args.labels.iter().map(|l| l.trim())).map_err(|e| usage(&e))?;
    let evidence: Option<Vec<EvidenceDocument>> = args.evidence.as_deref().map(read_jsonl).transpose()?;
    let engine = &app.engine;

    if let Some(path) = &args.knowledge {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let knowledge: SyntheticExpertKnowledge =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        knowledge.validate(&labels).map_err(|e| usage(&e))?;
        let item = BatchItem { claim, labels, knowledge, evidence };
        let entry = engine.run_oracle_loop(&item, args.protocol, &app.oracle);
        tracing::info!(session = ?entry.session_id, status = ?entry.status, rounds = entry.feedback_rounds, "session closed");
        if let Some(solution) = &entry.final_solution {
            print_json(solution)?;
        }
        return match entry.status {
            SessionStatus::Failed => Err(runtime(entry.error.unwrap_or_else(|| "session failed".into()))),
            _ => Ok(EXIT_OK),
        };
    }

    if args.protocol == Protocol::ChooseOne {
        return Err(CliError::Usage("choose-one needs --knowledge to grade its candidates".into()));
    }
    let feedback = FeedbackInstruction::human_batch(args.feedback.iter().cloned()).map_err(|e| usage(&e))?;
    let mut record = engine
        .start_session(claim, labels, args.protocol, evidence, None)
        .map_err(runtime)?;
    if !feedback.is_empty() {
        record = engine.submit_feedback(&record.id, feedback).map_err(runtime)?;
    }
    tracing::info!(session = %record.id, status = ?record.status, "session updated");
    print_json(record.latest_solution().ok_or_else(|| runtime("no solution was produced"))?)?;
    Ok(EXIT_OK)
}

fn out_dir(explicit: Option<&Path>, config: &AppConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.store.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn batch(app: App, args: &BatchArgs) -> Result<i32, CliError> {
    let dataset = load_dataset(&args.dataset).map_err(|e| CliError::Usage(e.to_string()))?;
    for s in &dataset.skipped {
        tracing::warn!(line = s.line, "skipped dataset line: {}", s.reason);
    }
    let items: Vec<BatchItem> = dataset.records.iter().map(|r| r.to_batch_item()).collect();
    let manifest = app.engine.run_batch(&items, args.protocol, &app.oracle);
    let dir = out_dir(args.out.as_deref(), &app.config);
    write_json(&dir.join("manifest.json"), &manifest)?;
    let report = evaluate_manifest(&manifest, &dataset.records, &app.scorers);
    write_json(&dir.join("metrics.json"), &report)?;
    println!("{}", render_table(std::slice::from_ref(&report)));
    let failures = manifest.failures();
    tracing::info!(sessions = manifest.sessions.len(), failures, out = %dir.display(), "batch finished");
    Ok(if failures > 0 || !dataset.skipped.is_empty() { EXIT_PARTIAL } else { EXIT_OK })
}

fn simulate(args: &SimulateArgs, out_dir: Option<PathBuf>) -> Result<i32, CliError> {
    let spec: GridSpec = match args.grid.as_str() {
        "default" => default_grid(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?
        }
    };
    let report = run_grid(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.unwrap_or_else(|| PathBuf::from("out")).join("capacity_report.json"));
    write_json(&out, &report)?;
    println!("{}", tracecheck_capacity::render_table(&report));
    let failures = report.failures();
    for f in &failures {
        tracing::error!("check failed: {f}");
    }
    tracing::info!(out = %out.display(), "capacity report written");
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn eval(args: &EvalArgs, scorers: &Scorers) -> Result<i32, CliError> {
    let dataset = load_dataset(&args.dataset).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut reports = Vec::new();
    for path in &args.manifests {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let manifest: BatchManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        reports.push(evaluate_manifest(&manifest, &dataset.records, scorers));
    }
    if let Some(out) = &args.out {
        write_json(out, &reports)?;
    }
    println!("{}", render_table(&reports));
    Ok(EXIT_OK)
}

fn serve(app: App, args: &ServeArgs) -> Result<i32, CliError> {
    let bind = args.bind.clone().unwrap_or_else(|| app.config.server.bind.clone());
    let addr: std::net::SocketAddr = bind
        .parse()
        .map_err(|_| CliError::Usage(format!("{bind:?} is not a socket address")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(runtime)?;
        tracing::info!(%addr, "serving");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        api::serve(listener, ApiState::new(app.engine.clone()), shutdown)
            .await
            .map_err(runtime)
    })?;
    Ok(EXIT_OK)
}
