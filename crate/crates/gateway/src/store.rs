//! On-disk session logs: `<dir>/<id>.jsonl` holds one event per line,
//! `<id>.meta.json` what is needed to rebuild the backends on restart.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use wayfinder_core::SessionEvent;

use crate::config::BackendKind;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub backend: BackendKind,
    pub corpus: String,
    /// Scenario whose rules drive the scripted planner, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
    durable: bool,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>, durable: bool) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(Store { dir, durable })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.meta.json"))
    }

    /// Write the meta file and an empty log. The meta file is written to a
    /// temporary name first so a crash never leaves a half-written one.
    pub fn create(&self, meta: &SessionMeta) -> Result<LogWriter, StoreError> {
        let path = self.meta_path(&meta.session_id);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&tmp, text).map_err(io(&tmp))?;
        if self.durable {
            File::open(&tmp).and_then(|f| f.sync_all()).map_err(io(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io(&path))?;
        LogWriter::open(self.log_path(&meta.session_id), self.durable)
    }

    pub fn writer(&self, id: &str) -> Result<LogWriter, StoreError> {
        LogWriter::open(self.log_path(id), self.durable)
    }

    /// Every persisted session, sorted by id.
    pub fn list(&self) -> Result<Vec<SessionMeta>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io(&self.dir))? {
            let path = entry.map_err(io(&self.dir))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if !name.ends_with(".meta.json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let meta: SessionMeta = serde_json::from_str(&text)
                .map_err(|e| StoreError::Corrupt { path: path.clone(), line: e.line(), message: e.to_string() })?;
            out.push(meta);
        }
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(out)
    }

    pub fn load(&self, id: &str) -> Result<Vec<SessionEvent>, StoreError> {
        read_log(&self.log_path(id), true)
    }

    fn idem_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.idem.jsonl"))
    }

    /// Remember the response given for an idempotency key.
    pub fn record_response(&self, id: &str, key: &str, response: &Value) -> Result<(), StoreError> {
        let path = self.idem_path(id);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let mut line = serde_json::to_string(&json!({"key": key, "response": response})).expect("json");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        if self.durable {
            f.sync_data().map_err(io(&path))?;
        }
        Ok(())
    }

    /// Responses by idempotency key. Unreadable lines are skipped: losing
    /// a key only weakens deduplication, it never corrupts a session.
    pub fn load_responses(&self, id: &str) -> Result<HashMap<String, Value>, StoreError> {
        let path = self.idem_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
            Err(e) => return Err(io(&path)(e)),
        };
        let mut out = HashMap::new();
        for line in text.lines() {
            let Ok(v) = serde_json::from_str::<Value>(line) else { continue };
            if let (Some(k), Some(r)) = (v.get("key").and_then(Value::as_str), v.get("response")) {
                out.insert(k.to_string(), r.clone());
            }
        }
        Ok(out)
    }
}

/// Parse a log file. With `repair`, a torn final line (no trailing newline,
/// not valid JSON) is cut off, as left by a crash mid-append.
pub fn read_log(path: &Path, repair: bool) -> Result<Vec<SessionEvent>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(path)(e)),
    };
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io(path))?;
        if read == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            good_len += read as u64;
            continue;
        }
        match SessionEvent::from_line(line.trim_end()) {
            Ok(ev) if complete => {
                events.push(ev);
                good_len += read as u64;
            }
            Ok(_) | Err(_) if !complete && repair => {
                OpenOptions::new().write(true).open(path).and_then(|f| f.set_len(good_len)).map_err(io(path))?;
                tracing::warn!(path = %path.display(), line = n, "dropped torn final record");
                break;
            }
            Ok(ev) => events.push(ev),
            Err(e) => {
                return Err(StoreError::Corrupt { path: path.to_path_buf(), line: n, message: e.to_string() });
            }
        }
    }
    Ok(events)
}

/// Append-only writer. In durable mode every record is synced before
/// `append` returns; otherwise records are flushed to the OS only.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
    durable: bool,
}

impl LogWriter {
    pub fn open(path: PathBuf, durable: bool) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        Ok(LogWriter { path, file, durable })
    }

    pub fn append(&mut self, events: &[SessionEvent]) -> Result<(), StoreError> {
        for ev in events {
            let mut line = ev.to_line();
            line.push('\n');
            self.file.write_all(line.as_bytes()).map_err(io(&self.path))?;
            if self.durable {
                self.file.sync_data().map_err(io(&self.path))?;
            }
        }
        self.file.flush().map_err(io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
