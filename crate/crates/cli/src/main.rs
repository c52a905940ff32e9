//! `acu`: operator entry point for the classification pipeline.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 backend error.

use std::collections::BTreeMap;
use std::io::{self, BufRead, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use acu_core::config::{ConfigError, PipelineConfig};
use acu_core::eval::{compare_reports, Split};
use acu_core::llm_gateway::{BackendKind, Gateway, GatewayError};
use acu_core::pipeline::{
    self, build_profiles, classify, load_corpus_from, load_inputs, run_report, split_for, ClassifyJob, PipelineError,
    Stage, StageError,
};
use acu_core::profiler::ContentProfile;
use acu_core::store::Store;
use acu_core::triage::{self, TriageError};
use acu_service::{serve, ServeError, ServiceConfig};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "acu", version, about = "Advertiser content understanding pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    store_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    ads: Option<PathBuf>,
    #[arg(long, global = true)]
    advertisers: Option<PathBuf>,
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    split_overrides: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    #[arg(long, global = true)]
    salt: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the corpus and report accepted and rejected lines.
    IngestCheck {
        /// Exit with the data error code when any line was rejected.
        #[arg(long)]
        strict: bool,
    },
    /// Print the candidate advertisers, one id per line, highest score first.
    Select {
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Print `{advertiser_id, split}` lines for the given ids, or ids read from stdin.
    Splits { ids: Vec<String> },
    /// Print one profile JSON object per line for the given ids, or ids read from stdin.
    Profile { ids: Vec<String> },
    /// Classify profiles read as JSON lines from stdin and print the run id.
    Classify {
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Full pipeline: select, profile, classify, then report when labels exist.
    Run {
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Evaluation report for a stored run.
    Eval {
        run_id: String,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Metric deltas and per-advertiser flips between two runs.
    Compare { before: String, after: String },
    /// Export reviewer labels in labels-file format, or a run's current error bins.
    TriageExport {
        /// Export the current assignments of this run instead of labels.
        #[arg(long)]
        assignments: Option<String>,
    },
    /// Serve the read-mostly HTTP API over the store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Environment variable holding the bearer token; no auth when unset.
        #[arg(long)]
        auth_token_env: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}; expected TUNE_A, TUNE_B or HOLDOUT"))
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

fn gateway_code(e: &GatewayError) -> u8 {
    match e {
        GatewayError::Config(_) => 1,
        _ => 3,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match (&e.stage, &e.source) {
            (_, StageError::Config(_)) | (Stage::Config, _) => 1,
            (_, StageError::Gateway(g)) => gateway_code(g),
            _ => 2,
        };
        Self { code, error: e.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e)
    }
}

impl From<TriageError> for Failure {
    fn from(e: TriageError) -> Self {
        Self::data(e)
    }
}

impl From<ServeError> for Failure {
    fn from(e: ServeError) -> Self {
        let code = match e {
            ServeError::PortInUse(_) | ServeError::MissingToken(_) => 1,
            _ => 2,
        };
        Self { code, error: e.into() }
    }
}

impl Overrides {
    fn load(&self) -> Result<PipelineConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load_unvalidated(path)?,
            None => PipelineConfig::default(),
        };
        let paths = &mut config.paths;
        for (flag, slot) in [
            (&self.store_dir, &mut paths.store_dir),
            (&self.ads, &mut paths.ads),
            (&self.advertisers, &mut paths.advertisers),
            (&self.template, &mut paths.template),
            (&self.policy, &mut paths.policy),
        ] {
            if let Some(v) = flag {
                *slot = v.clone();
            }
        }
        if let Some(v) = &self.labels {
            paths.labels = Some(v.clone());
        }
        if let Some(v) = &self.split_overrides {
            paths.split_overrides = Some(v.clone());
        }
        if let Some(v) = self.workers {
            config.workers = v;
        }
        if let Some(v) = self.backend {
            config.backend.kind = match v {
                BackendArg::Mock => BackendKind::Mock,
                BackendArg::Http => BackendKind::Http,
            };
        }
        if let Some(v) = &self.endpoint_url {
            config.backend.endpoint_url = Some(v.clone());
        }
        if let Some(v) = self.max_retries {
            config.backend.max_retries = v;
        }
        if let Some(v) = &self.salt {
            config.splits.salt = v.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn open_store(config: &PipelineConfig) -> Result<Store, Failure> {
    config.require_paths(&["store_dir"])?;
    Store::open(&config.paths.store_dir).map_err(Failure::data)
}

fn stdin_lines() -> Result<Vec<String>, Failure> {
    let mut lines = Vec::new();
    for line in io::stdin().lock().lines() {
        let line = line.context("reading stdin").map_err(Failure::data)?;
        if !line.trim().is_empty() {
            lines.push(line.trim().to_string());
        }
    }
    Ok(lines)
}

fn emit(text: &str) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .context("writing stdout")
        .map_err(Failure::data)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("values serialize")
}

async fn execute(cli: Cli) -> Result<(), Failure> {
    let config = cli.overrides.load()?;
    match cli.command {
        Command::IngestCheck { strict } => {
            let (corpus, report) = load_corpus_from(&config)?;
            let summary = json!({"stats": corpus.stats(), "report": report});
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&summary).expect("values serialize")
            ))?;
            if strict && !report.rejected.is_empty() {
                return Err(Failure::data(anyhow::anyhow!(
                    "{} lines rejected",
                    report.rejected.len()
                )));
            }
        }
        Command::Select { split } => {
            let (corpus, _) = load_corpus_from(&config)?;
            let overrides = pipeline::split_overrides(&config)?;
            let mut out = String::new();
            for c in pipeline::select(&corpus, &config, &overrides, split) {
                out.push_str(&c.advertiser_id);
                out.push('\n');
            }
            emit(&out)?;
        }
        Command::Splits { ids } => {
            let ids = if ids.is_empty() { stdin_lines()? } else { ids };
            let overrides = pipeline::split_overrides(&config)?;
            let mut out = String::new();
            for id in ids {
                let split = split_for(&id, &config, &overrides);
                out.push_str(&to_json(&json!({"advertiser_id": id, "split": split})));
                out.push('\n');
            }
            emit(&out)?;
        }
        Command::Profile { ids } => {
            let ids = if ids.is_empty() { stdin_lines()? } else { ids };
            let (corpus, _) = load_corpus_from(&config)?;
            let mut out = String::new();
            for p in build_profiles(&corpus, &ids, &config)? {
                out.push_str(&to_json(&p));
                out.push('\n');
            }
            emit(&out)?;
        }
        Command::Classify { split } => {
            let profiles = stdin_lines()?
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str::<ContentProfile>(l).with_context(|| format!("stdin line {}", i + 1))
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::data)?;
            let inputs = load_inputs(&config)?;
            let store = open_store(&config)?;
            let gateway = Gateway::from_config(&config.backend).map_err(|e| Failure {
                code: gateway_code(&e),
                error: e.into(),
            })?;
            let splits: BTreeMap<String, Split> = profiles
                .iter()
                .map(|p| {
                    let id = p.advertiser_id.clone();
                    let s = split_for(&id, &config, &inputs.split_overrides);
                    (id, s)
                })
                .collect();
            let job = ClassifyJob {
                template: &inputs.template,
                policy: &inputs.policy,
                profiles: &profiles,
                prompt_budget: config.prompt,
                split,
                splits,
                labels: &inputs.labels,
                workers: config.workers,
            };
            let record = classify(&store, &gateway, job).await?;
            emit(&format!("{}\n", record.run_id()))?;
        }
        Command::Run { split, format } => {
            let outcome = pipeline::run_pipeline(&config, split).await?;
            let mut out = format!("{}\n", outcome.run_id);
            if let Some(report) = &outcome.report {
                match format {
                    Format::Json => out.push_str(&format!("{}\n", to_json(report))),
                    Format::Table => out.push_str(&report.to_text()),
                }
            }
            emit(&out)?;
        }
        Command::Eval { run_id, format } => {
            let store = open_store(&config)?;
            let report = run_report(&store, &run_id)?;
            match format {
                Format::Json => emit(&format!("{}\n", to_json(&report)))?,
                Format::Table => emit(&report.to_text())?,
            }
        }
        Command::Compare { before, after } => {
            let store = open_store(&config)?;
            let delta = compare_reports(
                &run_report(&store, &before)?.overall,
                &run_report(&store, &after)?.overall,
            )
            .map_err(Failure::data)?;
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&delta).expect("values serialize")
            ))?;
        }
        Command::TriageExport { assignments } => {
            let store = open_store(&config)?;
            let mut out = String::new();
            match assignments {
                Some(run_id) => {
                    for a in triage::current_assignments(&store, &run_id)?.values() {
                        out.push_str(&to_json(a));
                        out.push('\n');
                    }
                }
                None => {
                    for (advertiser_id, label) in triage::promoted_labels(&store)? {
                        out.push_str(&to_json(&json!({"advertiser_id": advertiser_id, "label": label})));
                        out.push('\n');
                    }
                }
            }
            emit(&out)?;
        }
        Command::Serve { bind, auth_token_env } => {
            config.require_paths(&["store_dir"])?;
            let handle = serve(ServiceConfig {
                store_dir: config.paths.store_dir.clone(),
                bind,
                auth_token_env_var: auth_token_env,
            })
            .await?;
            tracing::info!(url = %handle.url(), "serving");
            eprintln!("listening on {}", handle.url());
            handle.run_until_signal().await.map_err(Failure::data)?;
        }
    }
    Ok(())
}

/// The error and its causes, skipping causes already quoted by their parent.
fn render_chain(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    let mut last = out.clone();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render_chain(&f.error));
            ExitCode::from(f.code)
        }
    }
}
