//! The Agent actor: compiles a module directive into actions and runs them
//! against the simulated web (exploration) or the knowledge base
//! (exploitation).

pub mod exploit;
pub mod explore;
pub mod world;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Action, ActionModule, Cost, FindingDraft, KnowledgeBase, ModuleKind, ModuleStatus, Verb};
use crate::projection::validate_actions_for;
use crate::text;
pub use world::SiteGraph;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("exploitation module attempted web interaction ({0:?})")]
    WorldViolation(Verb),
    #[error("cannot compile directive: {0}")]
    UnknownDirective(String),
    #[error("no known site named in directive or context: {0}")]
    UnknownDomain(String),
    #[error("no findings to work with")]
    NoFindings,
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),
    #[error("no value for field '{field}' of form '{form}'")]
    MissingFormValue { form: String, field: String },
    #[error("no web world attached")]
    NoWorld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationBudget {
    pub max_pages: u32,
    pub max_actions: u32,
}

impl Default for ExplorationBudget {
    fn default() -> Self {
        ExplorationBudget { max_pages: 12, max_actions: 60 }
    }
}

/// Abstract time charged per verb.
pub fn ticks(verb: Verb) -> u64 {
    match verb {
        Verb::Navigate | Verb::ClickLink | Verb::FillForm => 2,
        Verb::Search | Verb::SubmitForm => 3,
        Verb::ExtractFact => 1,
        Verb::Compare | Verb::Rank | Verb::Filter | Verb::Summarize | Verb::DraftDocument => 1,
    }
}

/// Everything the agent needs to run one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub module: ActionModule,
    /// Visible context for the module's subgoal, shadowing applied.
    pub context: Vec<(String, String)>,
    pub kb: KnowledgeBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ModuleStatus,
    pub findings: Vec<FindingDraft>,
    pub actions: Vec<Action>,
    pub cost: Cost,
    pub narrative: String,
    pub error_notes: Vec<String>,
}

impl ExecutionOutcome {
    pub fn failed(note: impl Into<String>) -> Self {
        let note = note.into();
        ExecutionOutcome {
            status: ModuleStatus::Failed,
            findings: Vec::new(),
            actions: Vec::new(),
            cost: Cost::default(),
            narrative: format!("The module failed: {note}"),
            error_notes: vec![note],
        }
    }
}

pub trait AgentBackend: Send + Sync {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionOutcome;
}

/// Runs modules against a bundled or loaded [`SiteGraph`].
#[derive(Debug, Clone)]
pub struct SimulatedAgent {
    world: Arc<SiteGraph>,
    budget: ExplorationBudget,
}

impl SimulatedAgent {
    pub fn new(world: Arc<SiteGraph>, budget: ExplorationBudget) -> Self {
        SimulatedAgent { world, budget }
    }

    pub fn world(&self) -> &SiteGraph {
        &self.world
    }
}

impl AgentBackend for SimulatedAgent {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionOutcome {
        execute(&req.module, &req.context, &req.kb, Some(&self.world), self.budget)
    }
}

/// The verbs a directive compiles to for a module of `kind`, before any
/// execution. Exploitation directives that only name web verbs compile to
/// those verbs, which the verb-set check then rejects.
pub fn compile(kind: ModuleKind, directive: &str, kb: &KnowledgeBase) -> Result<Vec<Verb>, AgentError> {
    match kind {
        ModuleKind::Exploration => Ok(match explore::mode_for(directive) {
            explore::ExplorationMode::Gather => vec![Verb::Navigate, Verb::Search, Verb::ClickLink, Verb::ExtractFact],
            explore::ExplorationMode::Transaction => {
                vec![Verb::Navigate, Verb::Search, Verb::ClickLink, Verb::FillForm, Verb::SubmitForm]
            }
        }),
        ModuleKind::Exploitation => match exploit::parse_operator(directive, kb) {
            Ok(op) => Ok(op.plan()),
            Err(e) => {
                let web = text::tokenize(directive).into_iter().find_map(|t| web_verb(&t));
                match web {
                    Some(v) => Ok(vec![v]),
                    None => Err(e),
                }
            }
        },
    }
}

fn web_verb(token: &str) -> Option<Verb> {
    Some(match token {
        "search" | "find" | "look" | "research" | "investigate" => Verb::Search,
        "navigate" | "go" | "visit" | "open" | "browse" => Verb::Navigate,
        "click" => Verb::ClickLink,
        "fill" | "enter" => Verb::FillForm,
        "purchase" | "buy" | "order" | "send" | "submit" => Verb::SubmitForm,
        _ => return None,
    })
}

/// Run one module. Never panics on bad input: every failure becomes a
/// `Failed` outcome with the reason in `error_notes`.
pub fn execute(
    module: &ActionModule,
    context: &[(String, String)],
    kb: &KnowledgeBase,
    world: Option<&SiteGraph>,
    budget: ExplorationBudget,
) -> ExecutionOutcome {
    let plan = match compile(module.kind, &module.directive, kb) {
        Ok(plan) => plan,
        Err(AgentError::UnsupportedOperator(d)) => {
            return ExecutionOutcome::failed(AgentError::UnknownDirective(d).to_string())
        }
        Err(e) => return ExecutionOutcome::failed(e.to_string()),
    };
    let planned: Vec<Action> = plan
        .iter()
        .enumerate()
        .map(|(i, v)| Action { ordinal: i as u32, verb: *v, target: String::new(), params: Default::default() })
        .collect();
    if let Err(v) = validate_actions_for(module.kind, &planned) {
        let verb = planned[v.offending[0] as usize].verb;
        return ExecutionOutcome::failed(AgentError::WorldViolation(verb).to_string());
    }

    match module.kind {
        ModuleKind::Exploration => {
            let Some(world) = world else {
                return ExecutionOutcome::failed(AgentError::NoWorld.to_string());
            };
            match explore::run_exploration(&module.directive, context, kb, world, budget) {
                Ok(run) => {
                    let mut notes = run.notes;
                    let status = if run.mode == explore::ExplorationMode::Transaction && !run.submitted {
                        if !run.partial {
                            ModuleStatus::Failed
                        } else {
                            ModuleStatus::PartialSuccess
                        }
                    } else if run.partial {
                        ModuleStatus::PartialSuccess
                    } else {
                        ModuleStatus::Completed
                    };
                    notes.dedup();
                    let narrative = match (run.mode, run.submitted) {
                        (explore::ExplorationMode::Transaction, true) => format!(
                            "Submitted the form on {} after visiting {} page(s).",
                            run.site, run.cost.pages_visited
                        ),
                        _ => format!(
                            "Visited {} page(s) on {} and extracted {} finding(s).",
                            run.cost.pages_visited,
                            run.site,
                            run.findings.len()
                        ),
                    };
                    ExecutionOutcome {
                        status,
                        findings: run.findings,
                        actions: run.actions,
                        cost: run.cost,
                        narrative,
                        error_notes: notes,
                    }
                }
                Err(e) => ExecutionOutcome::failed(e.to_string()),
            }
        }
        ModuleKind::Exploitation => match exploit::run_exploitation(&module.directive, context, kb) {
            Ok(run) => ExecutionOutcome {
                status: ModuleStatus::Completed,
                narrative: format!("Derived {} result(s) from collected findings.", run.findings.len()),
                findings: run.findings,
                actions: run.actions,
                cost: run.cost,
                error_notes: run.notes,
            },
            Err(e) => ExecutionOutcome::failed(e.to_string()),
        },
    }
}
