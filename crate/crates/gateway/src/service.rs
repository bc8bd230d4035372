//! Live sessions behind the HTTP surface.
//!
//! Each session has one writer (an async mutex around the [`Session`] and
//! its log file) and a read side holding only events that are already on
//! disk. Stream subscribers watch the durable event count, so nothing is
//! pushed before it has been appended.
//!
//! Module execution runs on a blocking thread without the writer lock;
//! feedback arriving meanwhile sees an executing phase and is refused.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::watch;
use wayfinder_core::domain::{ActionModule, KnowledgeBase, ModuleResult, Presentation, Subgoal, SuggestionDraft};
use wayfinder_core::planner::{
    default_presentation, ClassifyError, ModelError, ModuleDraft, PlannerRequest, ProposalRequest, TextClass,
};
use wayfinder_core::orchestrator::report_pending;
use wayfinder_core::projection::Phase;
use wayfinder_core::{
    AgentBackend, Clock, ModelBackend, OrchestratorError, RawFeedback, ScriptedPlanner, Session, SessionEvent,
    SessionState, SimulatedAgent, SiteGraph,
};

use crate::catalog::{Catalog, CatalogError};
use crate::config::{BackendKind, Config};
use crate::remote::RemotePlanner;
use crate::store::{LogWriter, SessionMeta, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("goal text is empty")]
    EmptyGoal,
    #[error("corpus '{0}' not found")]
    CorpusNotFound(String),
    #[error("scenario script '{0}' not found")]
    ScriptNotFound(String),
    #[error("{0}")]
    BackendUnavailable(String),
    #[error("{0}")]
    BackendFailure(String),
    #[error("{0}")]
    WrongPhase(String),
    #[error("{0}")]
    InvalidFeedback(String),
    #[error("unknown session {0}")]
    SessionNotFound(String),
    #[error("from={from} is beyond the next seq {next}")]
    BeyondHead { from: u64, next: u64 },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::EmptyGoal
            | ApiError::CorpusNotFound(_)
            | ApiError::ScriptNotFound(_)
            | ApiError::BackendUnavailable(_)
            | ApiError::InvalidFeedback(_)
            | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::BackendFailure(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::WrongPhase(_) => StatusCode::CONFLICT,
            ApiError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BeyondHead { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::EmptyGoal => "EMPTY_GOAL",
            ApiError::CorpusNotFound(_) => "CORPUS_NOT_FOUND",
            ApiError::ScriptNotFound(_) => "SCRIPT_NOT_FOUND",
            ApiError::BackendUnavailable(_) => "BACKEND_UNAVAILABLE",
            ApiError::BackendFailure(_) => "BACKEND_FAILURE",
            ApiError::WrongPhase(_) => "WRONG_PHASE",
            ApiError::InvalidFeedback(_) => "INVALID_FEEDBACK",
            ApiError::SessionNotFound(_) => "SESSION_NOT_FOUND",
            ApiError::BeyondHead { .. } => "FROM_BEYOND_HEAD",
            ApiError::BadRequest(_) => "BAD_REQUEST",
            ApiError::Internal(_) => "INTERNAL",
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let msg = e.to_string();
        match e {
            OrchestratorError::EmptyGoal => ApiError::EmptyGoal,
            OrchestratorError::WrongPhase { .. } => ApiError::WrongPhase(msg),
            OrchestratorError::UnknownSession(id) => ApiError::SessionNotFound(id),
            OrchestratorError::BackendFailure(_) => ApiError::BackendFailure(msg),
            OrchestratorError::Classify(ClassifyError::Model(ModelError::BackendFailure(_))) => {
                ApiError::BackendFailure(msg)
            }
            OrchestratorError::UnknownSubgoal(_) | OrchestratorError::InvalidFeedback(_) | OrchestratorError::Classify(_) => {
                ApiError::InvalidFeedback(msg)
            }
            OrchestratorError::Projection(_) => ApiError::Internal(msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub goal: String,
    #[serde(default)]
    pub backend: Option<BackendKind>,
    #[serde(default)]
    pub corpus: Option<String>,
    /// Scenario whose rules the scripted planner follows; defaults to the
    /// scenario named like the corpus, if there is one.
    #[serde(default)]
    pub script: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Links {
    pub state: String,
    pub events: String,
    pub feedback: String,
}

impl Links {
    fn for_id(id: &str) -> Self {
        Links {
            state: format!("/sessions/{id}"),
            events: format!("/sessions/{id}/events"),
            feedback: format!("/sessions/{id}/feedback"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub backend: BackendKind,
    pub corpus: String,
    pub links: Links,
    pub seqs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub seqs: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Whether a module is now running; its events follow on the stream.
    pub executing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub session_id: String,
    pub backend: BackendKind,
    pub corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    pub phase: &'static str,
    pub executing: bool,
    /// Seq of the last durable event.
    pub head: Option<u64>,
    pub links: Links,
    pub state: SessionState,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub phase: &'static str,
    pub head: Option<u64>,
}

struct Writer {
    session: Session,
    log: LogWriter,
    persisted: usize,
    responses: HashMap<String, Value>,
    /// Set once the log could not be written; the session is then read-only.
    poisoned: Option<String>,
}

#[derive(Default)]
pub struct Durable {
    pub events: Vec<SessionEvent>,
    pub state: SessionState,
}

pub struct LiveSession {
    pub meta: SessionMeta,
    model: Arc<dyn ModelBackend>,
    agent: Arc<dyn AgentBackend>,
    store: Store,
    writer: Arc<tokio::sync::Mutex<Writer>>,
    durable: RwLock<Durable>,
    head: watch::Sender<u64>,
}

impl LiveSession {
    /// Events `[from..]` that are on disk.
    pub fn durable_events(&self, from: u64) -> Vec<SessionEvent> {
        let d = self.durable.read().expect("durable lock");
        d.events.get(from as usize..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn durable_event(&self, seq: u64) -> Option<SessionEvent> {
        self.durable.read().expect("durable lock").events.get(seq as usize).cloned()
    }

    pub fn durable_len(&self) -> u64 {
        self.durable.read().expect("durable lock").events.len() as u64
    }

    pub fn durable_phase(&self) -> Phase {
        self.durable.read().expect("durable lock").state.phase
    }

    /// Notified with the durable event count after every append.
    pub fn watch(&self) -> watch::Receiver<u64> {
        self.head.subscribe()
    }

    fn persist(&self, w: &mut Writer) -> Result<(), ApiError> {
        let new = &w.session.events()[w.persisted..];
        if new.is_empty() {
            return Ok(());
        }
        if let Err(e) = w.log.append(new) {
            tracing::error!(session = %self.meta.session_id, error = %e, "log append failed; session is now read-only");
            w.poisoned = Some(e.to_string());
            return Err(e.into());
        }
        w.persisted = w.session.events().len();
        let len = {
            let mut d = self.durable.write().expect("durable lock");
            d.events.extend_from_slice(new);
            d.state = w.session.current_state();
            d.events.len() as u64
        };
        self.head.send_replace(len);
        Ok(())
    }

    /// Run the dispatched module, if any, and fold in its result. Must run
    /// on a blocking thread.
    fn execute_pending(&self) {
        let id = &self.meta.session_id;
        let req = {
            let mut w = self.writer.blocking_lock();
            if w.session.needs_report() {
                // a crash cut the previous module's report short
                tracing::info!(session = %id, "finishing interrupted report");
                if let Err(e) = w.session.report(self.model.as_ref()) {
                    tracing::error!(session = %id, error = %e, "finishing report failed");
                }
                let _ = self.persist(&mut w);
                return;
            }
            w.session.execution_request()
        };
        let Some(req) = req else { return };
        tracing::info!(session = %id, module = %req.module.id, "executing module");
        let outcome = self.agent.execute(&req);
        let mut w = self.writer.blocking_lock();
        if w.session.execution_request().map(|r| r.module.id) != Some(req.module.id) {
            return;
        }
        if let Err(e) = w.session.complete_module(outcome, self.model.as_ref()) {
            tracing::error!(session = %id, error = %e, "completing module failed");
        }
        let _ = self.persist(&mut w);
    }

    fn spawn_execution(self: &Arc<Self>) {
        let live = Arc::clone(self);
        tokio::task::spawn_blocking(move || live.execute_pending());
    }
}

/// A module is running, or its results are still being reported.
fn busy(d: &Durable) -> bool {
    matches!(d.state.phase, Phase::ActionPhase { .. }) || report_pending(&d.state, &d.events)
}

/// Answers every planner call with a backend failure. Used for restored
/// sessions whose remote planner is no longer configured.
struct Unavailable;

impl ModelBackend for Unavailable {
    fn decompose_goal(&self, _: &str, _: &KnowledgeBase) -> Result<Vec<String>, ModelError> {
        Err(unavailable())
    }
    fn initial_questions(&self, _: &Subgoal, _: &KnowledgeBase) -> Result<Vec<SuggestionDraft>, ModelError> {
        Err(unavailable())
    }
    fn generate_module(&self, _: &PlannerRequest<'_>) -> Result<ModuleDraft, ModelError> {
        Err(unavailable())
    }
    fn summarize(&self, m: &ActionModule, r: &ModuleResult, kb: &KnowledgeBase) -> Presentation {
        default_presentation(m, r, kb)
    }
    fn propose_next(&self, _: &ProposalRequest<'_>) -> Result<Vec<SuggestionDraft>, ModelError> {
        Err(unavailable())
    }
    fn classify_text(&self, _: &str, _: &Phase) -> Result<TextClass, ModelError> {
        Err(unavailable())
    }
}

fn unavailable() -> ModelError {
    ModelError::BackendFailure("remote planner is not configured".into())
}

/// Wraps the agent built for each session, e.g. to observe or slow it.
pub type AgentLayer = Arc<dyn Fn(Arc<dyn AgentBackend>) -> Arc<dyn AgentBackend> + Send + Sync>;

pub struct Gateway {
    cfg: Config,
    agent_layer: Option<AgentLayer>,
    catalog: Catalog,
    store: Store,
    clock: Arc<dyn Clock>,
    remote: Option<Arc<RemotePlanner>>,
    sessions: RwLock<HashMap<String, Arc<LiveSession>>>,
    corpora: Mutex<HashMap<String, Arc<SiteGraph>>>,
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::Internal(format!("worker failed: {e}"))
}

impl Gateway {
    pub fn new(cfg: Config, clock: Arc<dyn Clock>) -> Result<Self, ApiError> {
        let store = Store::open(&cfg.data_dir, cfg.durable)?;
        let catalog = Catalog { corpus_dir: cfg.corpus_dir.clone(), scenario_dir: cfg.scenario_dir.clone(), allow_paths: false };
        let remote = cfg.planner.clone().map(|p| Arc::new(RemotePlanner::new(p)));
        Ok(Gateway {
            cfg,
            agent_layer: None,
            catalog,
            store,
            clock,
            remote,
            sessions: RwLock::new(HashMap::new()),
            corpora: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_agent_layer(mut self, layer: AgentLayer) -> Self {
        self.agent_layer = Some(layer);
        self
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    fn agent(&self, world: Arc<SiteGraph>) -> Arc<dyn AgentBackend> {
        let agent: Arc<dyn AgentBackend> = Arc::new(SimulatedAgent::new(world, self.cfg.budget));
        match &self.agent_layer {
            Some(layer) => layer(agent),
            None => agent,
        }
    }

    fn world(&self, name: &str) -> Result<Arc<SiteGraph>, ApiError> {
        if let Some(w) = self.corpora.lock().expect("corpora lock").get(name) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(self.catalog.corpus(name).map_err(|e| match e {
            CatalogError::CorpusNotFound(n) => ApiError::CorpusNotFound(n),
            other => ApiError::BadRequest(other.to_string()),
        })?);
        self.corpora.lock().expect("corpora lock").insert(name.to_string(), Arc::clone(&w));
        Ok(w)
    }

    fn model_for(&self, meta: &SessionMeta) -> Result<Arc<dyn ModelBackend>, ApiError> {
        match meta.backend {
            BackendKind::Remote => match &self.remote {
                Some(r) => Ok(r.clone()),
                None => Err(ApiError::BackendUnavailable("no remote planner is configured".into())),
            },
            BackendKind::Scripted => match &meta.script {
                Some(name) => {
                    let (scenario, _) = self.catalog.scenario(name).map_err(|e| match e {
                        CatalogError::ScenarioNotFound(n) => ApiError::ScriptNotFound(n),
                        other => ApiError::BadRequest(other.to_string()),
                    })?;
                    Ok(Arc::new(ScriptedPlanner::new(scenario.script)))
                }
                None => Ok(Arc::new(ScriptedPlanner::default())),
            },
        }
    }

    fn live(&self, id: &str) -> Result<Arc<LiveSession>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    pub fn session(&self, id: &str) -> Result<Arc<LiveSession>, ApiError> {
        self.live(id)
    }

    fn register(&self, meta: SessionMeta, session: Session, log: LogWriter, model: Arc<dyn ModelBackend>, agent: Arc<dyn AgentBackend>) -> Arc<LiveSession> {
        let responses = self.store.load_responses(&meta.session_id).unwrap_or_default();
        let persisted = session.events().len();
        let durable = Durable { events: session.events().to_vec(), state: session.current_state() };
        let (head, _) = watch::channel(persisted as u64);
        let live = Arc::new(LiveSession {
            meta,
            model,
            agent,
            store: self.store.clone(),
            writer: Arc::new(tokio::sync::Mutex::new(Writer { session, log, persisted, responses, poisoned: None })),
            durable: RwLock::new(durable),
            head,
        });
        self.sessions.write().expect("sessions lock").insert(live.meta.session_id.clone(), Arc::clone(&live));
        live
    }

    /// Create, decompose, persist. Nothing is stored when decomposition fails.
    pub async fn create(&self, req: CreateSession) -> Result<Created, ApiError> {
        if req.goal.trim().is_empty() {
            return Err(ApiError::EmptyGoal);
        }
        let corpus = req
            .corpus
            .clone()
            .or_else(|| self.cfg.corpus.clone())
            .ok_or_else(|| ApiError::CorpusNotFound("(none given)".into()))?;
        let world = self.world(&corpus)?;
        let backend = req.backend.unwrap_or(self.cfg.backend);
        let script = match (backend, req.script) {
            (BackendKind::Remote, _) => None,
            (BackendKind::Scripted, Some(s)) => Some(s),
            (BackendKind::Scripted, None) => self.catalog.has_scenario(&corpus).then(|| corpus.clone()),
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let meta = SessionMeta { session_id: id.clone(), backend, corpus: corpus.clone(), script };
        let model = self.model_for(&meta)?;

        let clock = Arc::clone(&self.clock);
        let goal = req.goal;
        let m = Arc::clone(&model);
        let sid = id.clone();
        let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
            let mut s = Session::create(sid, &goal, clock)?;
            s.run_decomposition(m.as_ref())?;
            Ok(s)
        })
        .await
        .map_err(join_error)??;

        let mut log = self.store.create(&meta)?;
        log.append(session.events())?;
        let seqs = session.events().iter().map(|e| e.seq).collect();
        let agent = self.agent(world);
        self.register(meta, session, log, model, agent);
        tracing::info!(session = %id, %backend, %corpus, "session created");
        Ok(Created { links: Links::for_id(&id), session_id: id, backend, corpus, seqs })
    }

    /// Apply one feedback submission. With an idempotency key, a repeated
    /// submission returns the first response without applying anything.
    pub async fn submit(&self, id: &str, raw: RawFeedback, key: Option<String>) -> Result<Applied, ApiError> {
        let live = self.live(id)?;
        let mut w = Arc::clone(&live.writer).lock_owned().await;
        if let Some(prev) = key.as_ref().and_then(|k| w.responses.get(k)) {
            return serde_json::from_value(prev.clone()).map_err(|e| ApiError::Internal(e.to_string()));
        }
        if let Some(why) = &w.poisoned {
            return Err(ApiError::Internal(format!("session is read-only after a storage failure: {why}")));
        }
        if w.session.is_executing() {
            return Err(ApiError::WrongPhase("a module is executing; wait for its results".into()));
        }
        let l = Arc::clone(&live);
        let (w, applied) = tokio::task::spawn_blocking(move || {
            let result = w.session.submit_raw(&raw, l.model.as_ref());
            let stored = l.persist(&mut w);
            let applied = match (result, stored) {
                (Ok(s), Ok(())) => Ok(Applied { seqs: s.seqs, warnings: s.warnings, executing: w.session.is_executing() }),
                (Err(e), Ok(())) => Err(ApiError::from(e)),
                (_, Err(e)) => Err(e),
            };
            (w, applied)
        })
        .await
        .map_err(join_error)?;
        let mut w = w;
        let applied = applied?;
        if let Some(k) = key {
            let v = serde_json::to_value(&applied).expect("applied serializes");
            if let Err(e) = live.store.record_response(id, &k, &v) {
                tracing::warn!(session = %id, error = %e, "could not persist idempotency key");
            }
            w.responses.insert(k, v);
        }
        let executing = applied.executing;
        drop(w);
        if executing {
            live.spawn_execution();
        }
        Ok(applied)
    }

    pub fn snapshot(&self, id: &str) -> Result<Snapshot, ApiError> {
        let live = self.live(id)?;
        let d = live.durable.read().expect("durable lock");
        let executing = busy(&d);
        Ok(Snapshot {
            session_id: live.meta.session_id.clone(),
            backend: live.meta.backend,
            corpus: live.meta.corpus.clone(),
            script: live.meta.script.clone(),
            phase: d.state.phase.name(),
            executing,
            head: d.events.last().map(|e| e.seq),
            links: Links::for_id(id),
            state: d.state.clone(),
        })
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let sessions = self.sessions.read().expect("sessions lock");
        let mut out: Vec<SessionSummary> = sessions
            .values()
            .map(|l| {
                let d = l.durable.read().expect("durable lock");
                SessionSummary {
                    session_id: l.meta.session_id.clone(),
                    phase: d.state.phase.name(),
                    head: d.events.last().map(|e| e.seq),
                }
            })
            .collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    /// Validate a stream request: `from` may be at most one past the head.
    pub fn subscribe(&self, id: &str, from: u64) -> Result<Arc<LiveSession>, ApiError> {
        let live = self.live(id)?;
        let next = live.durable_len();
        if from > next {
            return Err(ApiError::BeyondHead { from, next });
        }
        Ok(live)
    }

    /// Reload every persisted session. Sessions that crashed mid-module are
    /// re-executed; the simulated agent makes that deterministic.
    pub async fn recover(&self) -> Result<usize, ApiError> {
        let metas = self.store.list()?;
        let mut restored = 0;
        for meta in metas {
            let id = meta.session_id.clone();
            let events = match self.store.load(&id) {
                Ok(e) if !e.is_empty() => e,
                Ok(_) => {
                    tracing::warn!(session = %id, "skipping session with an empty log");
                    continue;
                }
                Err(e) => {
                    tracing::error!(session = %id, error = %e, "skipping unreadable session");
                    continue;
                }
            };
            let session = match Session::restore(id.clone(), events, Arc::clone(&self.clock)) {
                Ok(s) => s,
                Err(e) => {
                    tracing::error!(session = %id, error = %e, "skipping session whose log does not project");
                    continue;
                }
            };
            let model = self.model_for(&meta).unwrap_or_else(|e| {
                tracing::warn!(session = %id, error = %e, "planner unavailable for restored session");
                Arc::new(Unavailable)
            });
            let world = self.world(&meta.corpus).unwrap_or_else(|e| {
                tracing::warn!(session = %id, error = %e, "corpus unavailable for restored session");
                Arc::new(SiteGraph::new(vec![], vec![]).expect("empty graph is valid"))
            });
            let agent = self.agent(world);
            let log = self.store.writer(&id)?;
            let executing = session.is_executing() || session.needs_report();
            let live = self.register(meta, session, log, model, agent);
            if executing {
                tracing::info!(session = %id, "resuming interrupted module");
                live.spawn_execution();
            }
            restored += 1;
        }
        Ok(restored)
    }

    /// Wait until no module is running in the session.
    pub async fn settle(&self, id: &str) -> Result<(), ApiError> {
        let live = self.live(id)?;
        let mut rx = live.watch();
        loop {
            let executing = busy(&live.durable.read().expect("durable lock"));
            if !executing {
                return Ok(());
            }
            if rx.changed().await.is_err() {
                return Ok(());
            }
        }
    }
}
