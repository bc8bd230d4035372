use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use wayfinder_core::metrics::ReportFormat;
use wayfinder_core::SystemClock;
use wayfinder_gateway::catalog::Catalog;
use wayfinder_gateway::cli::{self, ReplayArgs};
use wayfinder_gateway::config::{BudgetLayer, ConfigLayer, PlannerLayer};
use wayfinder_gateway::{http, Config, Gateway};

#[derive(Parser)]
#[command(name = "wayfinder", version, about = "Human-steered browsing sessions: service and headless replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Address to listen on.
        #[arg(long)]
        bind: Option<String>,
        /// Corpus for sessions created without one.
        #[arg(long)]
        corpus: Option<String>,
        /// Allowed browser origin; repeat for several, `*` for any.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
    /// Replay a scenario headlessly. Exits 0 iff every expectation holds.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Scenario file or bundled scenario name.
        #[arg(long)]
        scenario: String,
        /// Corpus file or name; defaults to the one the scenario names.
        #[arg(long)]
        corpus: Option<String>,
        /// Directory for events.jsonl, transcript.txt and the metrics report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "metrics-format", default_value = "json")]
        metrics_format: ReportFormat,
        /// Print only the verdict, not the transcript.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print metrics for a saved session log.
    Metrics {
        log: PathBuf,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file (default: $WAYFINDER_CONFIG, else ./wayfinder.toml if present).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    #[arg(long = "corpus-dir")]
    corpus_dir: Option<PathBuf>,
    #[arg(long = "scenario-dir")]
    scenario_dir: Option<PathBuf>,
    /// Planner backend: scripted or remote.
    #[arg(long)]
    backend: Option<String>,
    /// Sync every appended event to disk.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    durable: Option<bool>,
    #[arg(long = "max-pages")]
    max_pages: Option<u32>,
    #[arg(long = "max-actions")]
    max_actions: Option<u32>,
    #[arg(long = "planner-endpoint")]
    planner_endpoint: Option<String>,
    #[arg(long = "planner-model")]
    planner_model: Option<String>,
    /// Name of the environment variable holding the planner API key.
    #[arg(long = "planner-key-env")]
    planner_key_env: Option<String>,
}

impl Common {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            data_dir: self.data_dir.clone(),
            corpus_dir: self.corpus_dir.clone(),
            scenario_dir: self.scenario_dir.clone(),
            backend: self.backend.clone(),
            durable: self.durable,
            budget: BudgetLayer { max_pages: self.max_pages, max_actions: self.max_actions },
            planner: PlannerLayer {
                endpoint: self.planner_endpoint.clone(),
                model: self.planner_model.clone(),
                api_key_env: self.planner_key_env.clone(),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// CLI over environment over file.
    fn resolve(&self, cli: ConfigLayer) -> Result<Config, String> {
        let env = ConfigLayer::from_env(|k| std::env::var(k).ok()).map_err(|e| e.to_string())?;
        let path = self.config.clone().or_else(|| std::env::var_os("WAYFINDER_CONFIG").map(PathBuf::from)).or_else(|| {
            let p = PathBuf::from("wayfinder.toml");
            p.is_file().then_some(p)
        });
        let file = match path {
            Some(p) => ConfigLayer::from_file(&p).map_err(|e| e.to_string())?,
            None => ConfigLayer::default(),
        };
        Config::resolve(&[&cli, &env, &file]).map_err(|e| e.to_string())
    }
}

fn init_tracing(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Serve { common, bind, corpus, cors_origins } => {
            init_tracing("info");
            let cli = ConfigLayer {
                bind,
                corpus,
                cors_origins: (!cors_origins.is_empty()).then_some(cors_origins),
                ..common.layer()
            };
            let cfg = match common.resolve(cli) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
            match rt.block_on(serve(cfg)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Replay { common, scenario, corpus, out, metrics_format, quiet } => {
            init_tracing("warn");
            let cfg = match common.resolve(common.layer()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let args = ReplayArgs {
                scenario,
                corpus,
                out,
                backend: cfg.backend,
                planner: cfg.planner.clone(),
                durable: cfg.durable,
                metrics_format,
                budget: cfg.budget,
                catalog: Catalog { corpus_dir: cfg.corpus_dir, scenario_dir: cfg.scenario_dir, allow_paths: true },
            };
            match cli::replay(&args) {
                Ok(outcome) => {
                    if !quiet {
                        print!("{}", outcome.report.transcript);
                    }
                    for p in &outcome.written {
                        eprintln!("wrote {}", p.display());
                    }
                    let kinds: Vec<&str> = outcome.report.state.module_kinds().iter().map(|k| k.short()).collect();
                    match &outcome.report.divergence {
                        None => println!(
                            "PASS: {} events, final phase {}, module kinds [{}]",
                            outcome.report.events.len(),
                            outcome.report.state.phase.name(),
                            kinds.join(", ")
                        ),
                        Some(d) => eprintln!("FAIL: {d}"),
                    }
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Metrics { log, format } => match cli::metrics_for_log(&log, format) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}

async fn serve(cfg: Config) -> Result<(), String> {
    let bind = cfg.bind;
    let gateway = Arc::new(Gateway::new(cfg, Arc::new(SystemClock)).map_err(|e| e.to_string())?);
    let restored = gateway.recover().await.map_err(|e| e.to_string())?;
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| format!("binding {bind}: {e}"))?;
    tracing::info!(addr = %listener.local_addr().map_err(|e| e.to_string())?, restored, "listening");
    http::serve(gateway, listener).await.map_err(|e| e.to_string())
}
