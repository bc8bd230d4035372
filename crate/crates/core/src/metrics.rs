//! Foraging and loop-behaviour metrics over a session log.
//!
//! Cost is what the agent spent (actions, pages, ticks); gain is what it
//! brought back (findings, distinct entities). Nothing here scores how
//! useful a finding was.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FeedbackPayload, ModuleId, ModuleKind, ModuleStatus, SubgoalId};
use crate::event::{EventBody, SessionEvent};
use crate::projection::{project, ProjectionError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("invalid log: {0}")]
    InvalidLog(#[from] ProjectionError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub actions: u64,
    pub pages: u64,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleMetrics {
    pub module_id: ModuleId,
    pub subgoal_id: SubgoalId,
    pub loop_index: u32,
    pub kind: ModuleKind,
    /// `None` while the module has not completed.
    pub status: Option<ModuleStatus>,
    pub cost: CostTotals,
    pub findings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub modules: Vec<ModuleMetrics>,
    pub total_cost: CostTotals,
    pub findings: u64,
    pub distinct_entities: u64,
    pub exploration_modules: u64,
    pub exploitation_modules: u64,
    /// Absent when no module was generated.
    pub exploration_ratio: Option<f64>,
    /// One entry per terminated subgoal, in subgoal order.
    pub loops_to_terminate: Vec<u32>,
    pub context_items_injected: u64,
    pub suggestions_offered: u64,
    pub suggestions_accepted: u64,
    /// Absent when nothing was offered.
    pub acceptance_ratio: Option<f64>,
    pub errors: u64,
}

/// Metrics for a log that projects cleanly.
pub fn compute(log: &[SessionEvent]) -> Result<SessionMetrics, MetricsError> {
    let state = project(log)?;

    let modules: Vec<ModuleMetrics> = state
        .modules
        .iter()
        .map(|m| {
            let result = state.results.get(&m.id);
            ModuleMetrics {
                module_id: m.id,
                subgoal_id: m.subgoal_id,
                loop_index: m.loop_index,
                kind: m.kind,
                status: result.map(|r| r.status),
                cost: result
                    .map(|r| CostTotals {
                        actions: r.cost.actions_executed as u64,
                        pages: r.cost.pages_visited as u64,
                        ticks: r.cost.simulated_time,
                    })
                    .unwrap_or_default(),
                findings: result.map(|r| r.finding_ids.len() as u64).unwrap_or(0),
            }
        })
        .collect();

    let mut total_cost = CostTotals::default();
    for m in &modules {
        total_cost.actions += m.cost.actions;
        total_cost.pages += m.cost.pages;
        total_cost.ticks += m.cost.ticks;
    }
    let exploration_modules = modules.iter().filter(|m| m.kind == ModuleKind::Exploration).count() as u64;
    let exploitation_modules = modules.len() as u64 - exploration_modules;
    let entities: BTreeSet<&str> = state.kb.findings().iter().map(|f| f.entity.as_str()).collect();

    let terminated: BTreeSet<SubgoalId> = log
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::SubgoalTerminated { subgoal_id, .. } => Some(*subgoal_id),
            _ => None,
        })
        .collect();
    let loops_to_terminate =
        state.subgoals.iter().filter(|s| terminated.contains(&s.id)).map(|s| s.loop_count).collect();

    let context_items_injected = state
        .feedback
        .iter()
        .map(|f| match &f.payload {
            FeedbackPayload::ContextInjection { items } => items.len() as u64,
            _ => 0,
        })
        .sum();
    let suggestions_offered = state.suggestions.len() as u64;
    let suggestions_accepted = state.feedback.iter().filter(|f| f.in_reply_to.is_some()).count() as u64;

    Ok(SessionMetrics {
        total_cost,
        findings: state.kb.findings().len() as u64,
        distinct_entities: entities.len() as u64,
        exploration_ratio: ratio(exploration_modules, modules.len() as u64),
        exploration_modules,
        exploitation_modules,
        loops_to_terminate,
        context_items_injected,
        suggestions_offered,
        suggestions_accepted,
        acceptance_ratio: ratio(suggestions_accepted, suggestions_offered),
        errors: state.errors.len() as u64,
        modules,
    })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown metrics format '{other}' (json or csv)")),
        }
    }
}

impl SessionMetrics {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Long format: `metric,scope,value`. Absent ratios have an empty value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,scope,value\n");
        let mut row = |metric: &str, scope: String, value: String| {
            let _ = writeln!(out, "{metric},{scope},{value}");
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        row("actions", "session".into(), self.total_cost.actions.to_string());
        row("pages", "session".into(), self.total_cost.pages.to_string());
        row("ticks", "session".into(), self.total_cost.ticks.to_string());
        row("findings", "session".into(), self.findings.to_string());
        row("distinct_entities", "session".into(), self.distinct_entities.to_string());
        row("exploration_modules", "session".into(), self.exploration_modules.to_string());
        row("exploitation_modules", "session".into(), self.exploitation_modules.to_string());
        row("exploration_ratio", "session".into(), opt(self.exploration_ratio));
        row("context_items_injected", "session".into(), self.context_items_injected.to_string());
        row("suggestions_offered", "session".into(), self.suggestions_offered.to_string());
        row("suggestions_accepted", "session".into(), self.suggestions_accepted.to_string());
        row("acceptance_ratio", "session".into(), opt(self.acceptance_ratio));
        row("errors", "session".into(), self.errors.to_string());
        for (i, loops) in self.loops_to_terminate.iter().enumerate() {
            row("loops_to_terminate", format!("terminated-{i}"), loops.to_string());
        }
        for m in &self.modules {
            let scope = format!("{}", m.module_id);
            row("module_kind", scope.clone(), m.kind.short().to_string());
            row("module_actions", scope.clone(), m.cost.actions.to_string());
            row("module_pages", scope.clone(), m.cost.pages.to_string());
            row("module_ticks", scope.clone(), m.cost.ticks.to_string());
            row("module_findings", scope, m.findings.to_string());
        }
        out
    }
}
