//! Layered configuration: CLI flags over environment over a TOML file.
//!
//! Every setting is optional at every layer; [`Config::resolve`] folds
//! the layers and fills defaults. Keys, with their environment names:
//!
//! | file key                  | environment                      | default                  |
//! |---------------------------|----------------------------------|--------------------------|
//! | `bind`                    | `WAYFINDER_BIND`                 | `127.0.0.1:8080`         |
//! | `data_dir`                | `WAYFINDER_DATA_DIR`             | `wayfinder-data`         |
//! | `corpus`                  | `WAYFINDER_CORPUS`               | none                     |
//! | `corpus_dir`              | `WAYFINDER_CORPUS_DIR`           | none (bundled only)      |
//! | `scenario_dir`            | `WAYFINDER_SCENARIO_DIR`         | none (bundled only)      |
//! | `backend`                 | `WAYFINDER_BACKEND`              | `scripted`               |
//! | `durable`                 | `WAYFINDER_DURABLE`              | `false`                  |
//! | `cors_origins`            | `WAYFINDER_CORS_ORIGINS` (comma) | `http://localhost:5173`  |
//! | `budget.max_pages`        | `WAYFINDER_MAX_PAGES`            | 12                       |
//! | `budget.max_actions`      | `WAYFINDER_MAX_ACTIONS`          | 60                       |
//! | `planner.endpoint`        | `WAYFINDER_PLANNER_ENDPOINT`     | none                     |
//! | `planner.model`           | `WAYFINDER_PLANNER_MODEL`        | none                     |
//! | `planner.api_key_env`     | `WAYFINDER_PLANNER_KEY_ENV`      | `WAYFINDER_PLANNER_API_KEY` |
//! | `planner.timeout_secs`    | `WAYFINDER_PLANNER_TIMEOUT_SECS` | 30                       |
//! | `planner.max_retries`     | `WAYFINDER_PLANNER_MAX_RETRIES`  | 2                        |
//!
//! The planner API key itself is never part of the configuration; only the
//! name of the variable that holds it is.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wayfinder_core::ExplorationBudget;

use crate::remote::RemotePlannerConfig;

pub const DEFAULT_KEY_ENV: &str = "WAYFINDER_PLANNER_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Remote,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scripted" => Ok(BackendKind::Scripted),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend '{other}' (scripted or remote)")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Scripted => "scripted",
            BackendKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetLayer {
    pub max_pages: Option<u32>,
    pub max_actions: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerLayer {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

/// One source of settings. Absent fields defer to lower layers.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub bind: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub corpus: Option<String>,
    pub corpus_dir: Option<PathBuf>,
    pub scenario_dir: Option<PathBuf>,
    pub backend: Option<String>,
    pub durable: Option<bool>,
    pub cors_origins: Option<Vec<String>>,
    #[serde(default)]
    pub budget: BudgetLayer,
    #[serde(default)]
    pub planner: PlannerLayer,
}

fn pick<T>(layers: &[&ConfigLayer], f: impl Fn(&ConfigLayer) -> Option<T>) -> Option<T> {
    layers.iter().find_map(|l| f(l))
}

impl ConfigLayer {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::File { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text, path)
    }

    /// Read `WAYFINDER_*` variables through `get`, so tests need not touch
    /// the process environment.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let get = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        fn parse<T: FromStr>(key: &'static str, v: Option<String>) -> Result<Option<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.map(|s| s.trim().parse::<T>().map_err(|e| ConfigError::Invalid { key, message: e.to_string() }))
                .transpose()
        }
        Ok(ConfigLayer {
            bind: get("WAYFINDER_BIND"),
            data_dir: get("WAYFINDER_DATA_DIR").map(PathBuf::from),
            corpus: get("WAYFINDER_CORPUS"),
            corpus_dir: get("WAYFINDER_CORPUS_DIR").map(PathBuf::from),
            scenario_dir: get("WAYFINDER_SCENARIO_DIR").map(PathBuf::from),
            backend: get("WAYFINDER_BACKEND"),
            durable: parse("WAYFINDER_DURABLE", get("WAYFINDER_DURABLE"))?,
            cors_origins: get("WAYFINDER_CORS_ORIGINS")
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
            budget: BudgetLayer {
                max_pages: parse("WAYFINDER_MAX_PAGES", get("WAYFINDER_MAX_PAGES"))?,
                max_actions: parse("WAYFINDER_MAX_ACTIONS", get("WAYFINDER_MAX_ACTIONS"))?,
            },
            planner: PlannerLayer {
                endpoint: get("WAYFINDER_PLANNER_ENDPOINT"),
                model: get("WAYFINDER_PLANNER_MODEL"),
                api_key_env: get("WAYFINDER_PLANNER_KEY_ENV"),
                timeout_secs: parse("WAYFINDER_PLANNER_TIMEOUT_SECS", get("WAYFINDER_PLANNER_TIMEOUT_SECS"))?,
                max_retries: parse("WAYFINDER_PLANNER_MAX_RETRIES", get("WAYFINDER_PLANNER_MAX_RETRIES"))?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    /// Corpus used when a create request names none.
    pub corpus: Option<String>,
    pub corpus_dir: Option<PathBuf>,
    pub scenario_dir: Option<PathBuf>,
    pub backend: BackendKind,
    pub durable: bool,
    pub cors_origins: Vec<String>,
    pub budget: ExplorationBudget,
    /// Present once an endpoint and model are configured.
    pub planner: Option<RemotePlannerConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config::resolve(&[]).expect("defaults are valid")
    }
}

impl Config {
    /// Fold layers, highest precedence first.
    pub fn resolve(layers: &[&ConfigLayer]) -> Result<Config, ConfigError> {
        let bind_text = pick(layers, |l| l.bind.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
        let bind = bind_text
            .parse()
            .map_err(|e: std::net::AddrParseError| ConfigError::Invalid { key: "bind", message: e.to_string() })?;
        let backend = match pick(layers, |l| l.backend.clone()) {
            Some(b) => b.parse().map_err(|message| ConfigError::Invalid { key: "backend", message })?,
            None => BackendKind::Scripted,
        };
        let defaults = ExplorationBudget::default();
        let budget = ExplorationBudget {
            max_pages: pick(layers, |l| l.budget.max_pages).unwrap_or(defaults.max_pages),
            max_actions: pick(layers, |l| l.budget.max_actions).unwrap_or(defaults.max_actions),
        };
        if budget.max_pages == 0 || budget.max_actions == 0 {
            return Err(ConfigError::Invalid { key: "budget", message: "limits must be positive".into() });
        }

        let endpoint = pick(layers, |l| l.planner.endpoint.clone());
        let model = pick(layers, |l| l.planner.model.clone());
        let planner = match (endpoint, model) {
            (Some(endpoint), Some(model)) => Some(RemotePlannerConfig {
                endpoint,
                model,
                api_key_env: pick(layers, |l| l.planner.api_key_env.clone()).unwrap_or_else(|| DEFAULT_KEY_ENV.into()),
                timeout: Duration::from_secs(pick(layers, |l| l.planner.timeout_secs).unwrap_or(30)),
                max_retries: pick(layers, |l| l.planner.max_retries).unwrap_or(2),
            }),
            (None, None) => None,
            _ => {
                return Err(ConfigError::Invalid {
                    key: "planner",
                    message: "endpoint and model must be configured together".into(),
                })
            }
        };
        if backend == BackendKind::Remote && planner.is_none() {
            return Err(ConfigError::Invalid {
                key: "backend",
                message: "remote backend needs planner.endpoint and planner.model".into(),
            });
        }

        Ok(Config {
            bind,
            data_dir: pick(layers, |l| l.data_dir.clone()).unwrap_or_else(|| PathBuf::from("wayfinder-data")),
            corpus: pick(layers, |l| l.corpus.clone()),
            corpus_dir: pick(layers, |l| l.corpus_dir.clone()),
            scenario_dir: pick(layers, |l| l.scenario_dir.clone()),
            backend,
            durable: pick(layers, |l| l.durable).unwrap_or(false),
            cors_origins: pick(layers, |l| l.cors_origins.clone())
                .unwrap_or_else(|| vec!["http://localhost:5173".to_string()]),
            budget,
            planner,
        })
    }
}
