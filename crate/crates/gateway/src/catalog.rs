//! Name resolution for corpora and scenario scripts: an explicit file
//! path, then `<dir>/<name>.jsonl` in the configured directory, then the
//! copies bundled with the core crate.

use std::path::{Path, PathBuf};

use thiserror::Error;
use wayfinder_core::bundled;
use wayfinder_core::replay::Scenario;
use wayfinder_core::SiteGraph;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("corpus '{0}' not found")]
    CorpusNotFound(String),
    #[error("scenario '{0}' not found")]
    ScenarioNotFound(String),
    #[error("{what} '{name}': {message}")]
    Invalid { what: &'static str, name: String, message: String },
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub corpus_dir: Option<PathBuf>,
    pub scenario_dir: Option<PathBuf>,
    /// Whether names may also be file paths (CLI yes, HTTP no).
    pub allow_paths: bool,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Catalog {
    fn find_text(
        &self,
        name: &str,
        dir: Option<&Path>,
        bundled: fn(&str) -> Option<&'static str>,
    ) -> Result<Option<(String, Option<PathBuf>)>, CatalogError> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|source| CatalogError::Read { path: p.into(), source });
        if self.allow_paths {
            let p = Path::new(name);
            if p.is_file() {
                return Ok(Some((read(p)?, Some(p.to_path_buf()))));
            }
        }
        if !valid_name(name) {
            return Ok(None);
        }
        if let Some(dir) = dir {
            let p = dir.join(format!("{name}.jsonl"));
            if p.is_file() {
                return Ok(Some((read(&p)?, Some(p))));
            }
        }
        Ok(bundled(name).map(|t| (t.to_string(), None)))
    }

    pub fn corpus(&self, name: &str) -> Result<SiteGraph, CatalogError> {
        let (text, _) = self
            .find_text(name, self.corpus_dir.as_deref(), bundled::corpus_text)?
            .ok_or_else(|| CatalogError::CorpusNotFound(name.to_string()))?;
        SiteGraph::parse(&text).map_err(|e| CatalogError::Invalid { what: "corpus", name: name.into(), message: e.to_string() })
    }

    /// The scenario plus the file it came from (`None` when bundled).
    pub fn scenario(&self, name: &str) -> Result<(Scenario, Option<PathBuf>), CatalogError> {
        let (text, path) = self
            .find_text(name, self.scenario_dir.as_deref(), bundled::scenario_text)?
            .ok_or_else(|| CatalogError::ScenarioNotFound(name.to_string()))?;
        let s = Scenario::parse(&text)
            .map_err(|e| CatalogError::Invalid { what: "scenario", name: name.into(), message: e.to_string() })?;
        Ok((s, path))
    }

    pub fn has_scenario(&self, name: &str) -> bool {
        matches!(self.find_text(name, self.scenario_dir.as_deref(), bundled::scenario_text), Ok(Some(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_names_resolve_and_paths_need_permission() {
        let c = Catalog::default();
        assert!(c.corpus("milk").is_ok());
        assert!(matches!(c.corpus("atlantis"), Err(CatalogError::CorpusNotFound(_))));
        assert!(matches!(c.corpus("../etc/passwd"), Err(CatalogError::CorpusNotFound(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.jsonl");
        std::fs::write(&p, bundled::corpus_text("broken").unwrap()).unwrap();
        let path = p.to_str().unwrap();
        assert!(c.corpus(path).is_err());
        assert!(Catalog { allow_paths: true, ..Default::default() }.corpus(path).is_ok());
        let in_dir = Catalog { corpus_dir: Some(dir.path().into()), ..Default::default() };
        assert!(in_dir.corpus("tiny").is_ok());
    }
}
