//! Event-sourced kernel for human-steered browsing sessions.
//!
//! A session is an append-only log of [`event::SessionEvent`]s. The
//! [`orchestrator::Session`] drives the loop (decompose, gather context,
//! then alternate action and decision phases until the user ends each
//! subgoal), asking a [`planner::ModelBackend`] for modules and
//! suggestions and an [`agent::AgentBackend`] to run them. State is always
//! [`projection::project`] of the log.

pub mod agent;
pub mod bundled;
pub mod clock;
pub mod domain;
pub mod event;
pub mod metrics;
pub mod orchestrator;
pub mod planner;
pub mod projection;
pub mod replay;
pub mod testkit;
pub mod text;

pub use agent::{AgentBackend, ExplorationBudget, SimulatedAgent, SiteGraph};
pub use clock::{Clock, FixedClock, SystemClock};
pub use event::{EventBody, EventKind, SessionEvent};
pub use orchestrator::{OrchestratorError, Session};
pub use planner::{ModelBackend, RawFeedback, ScenarioScript, ScriptedPlanner};
pub use projection::{project, Phase, SessionState};
