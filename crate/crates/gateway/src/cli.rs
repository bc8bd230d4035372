//! Headless commands: scenario replay and metrics over a saved log.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use wayfinder_core::metrics::{self, ReportFormat};
use wayfinder_core::replay::{self, ReplayReport, Scenario};
use wayfinder_core::{ExplorationBudget, FixedClock, ModelBackend, ScriptedPlanner, SimulatedAgent};

use crate::catalog::{Catalog, CatalogError};
use crate::config::BackendKind;
use crate::remote::{RemotePlanner, RemotePlannerConfig};
use crate::store::{read_log, LogWriter, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone)]
pub struct ReplayArgs {
    /// File path or scenario name.
    pub scenario: String,
    /// File path or corpus name; defaults to the scenario's own corpus.
    pub corpus: Option<String>,
    pub out: Option<PathBuf>,
    pub backend: BackendKind,
    pub planner: Option<RemotePlannerConfig>,
    pub durable: bool,
    pub metrics_format: ReportFormat,
    pub budget: ExplorationBudget,
    pub catalog: Catalog,
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub report: ReplayReport,
    pub written: Vec<PathBuf>,
}

impl ReplayOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            0
        } else {
            1
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Write { path: path.into(), source })
}

/// Run the scenario's user steps against the chosen planner and the
/// simulated agent, under a fixed clock so logs are reproducible.
pub fn replay(args: &ReplayArgs) -> Result<ReplayOutcome, CliError> {
    let catalog = Catalog { allow_paths: true, ..args.catalog.clone() };
    let (scenario, scenario_path): (Scenario, _) = catalog.scenario(&args.scenario)?;
    let corpus_name = match (&args.corpus, &scenario.corpus) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => c.clone(),
        (None, None) => return Err(CliError::Usage("scenario names no corpus; pass --corpus".into())),
    };
    // a corpus named by the scenario may sit next to the scenario file
    let world = match catalog.corpus(&corpus_name) {
        Err(CatalogError::CorpusNotFound(_)) if args.corpus.is_none() && scenario_path.is_some() => {
            let sibling = scenario_path.as_ref().unwrap().with_file_name(format!("{corpus_name}.jsonl"));
            catalog.corpus(sibling.to_str().unwrap_or_default())?
        }
        other => other?,
    };

    let model: Box<dyn ModelBackend> = match args.backend {
        BackendKind::Scripted => Box::new(ScriptedPlanner::new(scenario.script.clone())),
        BackendKind::Remote => {
            let cfg = args.planner.clone().ok_or_else(|| {
                CliError::Usage("remote backend needs --planner-endpoint and --planner-model".into())
            })?;
            Box::new(RemotePlanner::new(cfg))
        }
    };
    let agent = SimulatedAgent::new(Arc::new(world), args.budget);
    let report = replay::run(&scenario, model.as_ref(), &agent, Arc::new(FixedClock::default()));

    let mut written = Vec::new();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|source| CliError::Write { path: out.clone(), source })?;
        let log_path = out.join("events.jsonl");
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|source| CliError::Write { path: log_path.clone(), source })?;
        }
        LogWriter::open(log_path.clone(), args.durable)?.append(&report.events)?;
        written.push(log_path);

        let transcript = out.join("transcript.txt");
        write(&transcript, &report.transcript)?;
        written.push(transcript);

        let (name, text) = match args.metrics_format {
            ReportFormat::Json => ("metrics.json", report.metrics.to_json()),
            ReportFormat::Csv => ("metrics.csv", report.metrics.to_csv()),
        };
        let m = out.join(name);
        write(&m, &text)?;
        written.push(m);

        let d = out.join("divergence.txt");
        match &report.divergence {
            Some(div) => {
                write(&d, &format!("{div}\n"))?;
                written.push(d);
            }
            None if d.exists() => {
                std::fs::remove_file(&d).map_err(|source| CliError::Write { path: d.clone(), source })?;
            }
            None => {}
        }
    }
    Ok(ReplayOutcome { report, written })
}

/// Metrics for a saved log file.
pub fn metrics_for_log(path: &Path, format: ReportFormat) -> Result<String, CliError> {
    let events = read_log(path, false)?;
    if events.is_empty() {
        return Err(CliError::Usage(format!("{} holds no events", path.display())));
    }
    let m = metrics::compute(&events).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(m.render(format))
}
