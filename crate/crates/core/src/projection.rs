//! Folding an event log into session state.
//!
//! `SessionState::apply` is the only place where protocol legality is
//! decided. The orchestrator emits events through it as well, so a log the
//! orchestrator produced always projects cleanly and a hand-edited one that
//! breaks the protocol is rejected at the offending seq.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Action, ActionModule, ContextItem, ContextScope, Feedback, FeedbackId, FeedbackKind,
    FeedbackPayload, Goal, GoalStatus, KnowledgeBase, ModuleId, ModuleKind, ModuleResult,
    ModuleStatus, Presentation, Provenance, ResultId, Subgoal, SubgoalId, SubgoalStatus,
    Suggestion, SuggestionId, SuggestionKind,
};
use crate::event::{ErrorCode, EventBody, EventKind, SessionEvent, Timestamp};

/// Maximum suggestions offered in one decision phase.
pub const MAX_SUGGESTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionStep {
    Generating,
    Executing,
    /// Module finished; waiting for the results to be presented.
    Reporting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    AwaitingGoal,
    AwaitingDecomposition,
    /// Transient: between decomposition or a subgoal's termination and the
    /// next `SubgoalStarted` / `GoalCompleted`.
    Advancing,
    ContextGathering {
        subgoal: SubgoalId,
    },
    ActionPhase {
        subgoal: SubgoalId,
        module: Option<ModuleId>,
        step: ActionStep,
    },
    DecisionPhase {
        subgoal: SubgoalId,
        loop_index: u32,
    },
    /// Transient: a Terminate feedback was received and `SubgoalTerminated`
    /// must follow.
    Terminating {
        subgoal: SubgoalId,
        feedback: FeedbackId,
    },
    GoalDone,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::AwaitingGoal => "AwaitingGoal",
            Phase::AwaitingDecomposition => "AwaitingDecomposition",
            Phase::Advancing => "Advancing",
            Phase::ContextGathering { .. } => "ContextGathering",
            Phase::ActionPhase { step: ActionStep::Generating, .. } => "ActionPhase.Generating",
            Phase::ActionPhase { step: ActionStep::Executing, .. } => "ActionPhase.Executing",
            Phase::ActionPhase { step: ActionStep::Reporting, .. } => "ActionPhase.Reporting",
            Phase::DecisionPhase { .. } => "DecisionPhase",
            Phase::Terminating { .. } => "Terminating",
            Phase::GoalDone => "GoalDone",
        }
    }

    pub fn subgoal(&self) -> Option<SubgoalId> {
        match *self {
            Phase::ContextGathering { subgoal }
            | Phase::ActionPhase { subgoal, .. }
            | Phase::DecisionPhase { subgoal, .. }
            | Phase::Terminating { subgoal, .. } => Some(subgoal),
            _ => None,
        }
    }

    /// Whether user feedback is accepted in this phase.
    pub fn accepts_feedback(&self) -> bool {
        matches!(self, Phase::ContextGathering { .. } | Phase::DecisionPhase { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error("event log is empty")]
    EmptyLog,
    #[error("gap in log: expected seq {expected}, found {found}")]
    GapInLog { expected: u64, found: u64 },
    #[error("illegal transition at seq {seq} ({kind}): {reason}")]
    IllegalTransition { seq: u64, kind: EventKind, reason: String },
}

impl ProjectionError {
    pub fn offending_seq(&self) -> Option<u64> {
        match self {
            ProjectionError::EmptyLog => None,
            ProjectionError::GapInLog { expected, .. } => Some(*expected),
            ProjectionError::IllegalTransition { seq, .. } => Some(*seq),
        }
    }
}

/// Verbs outside the module kind's verb set, by ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} module contains out-of-set verbs at ordinals {offending:?}")]
pub struct ActionViolation {
    pub kind: ModuleKind,
    pub offending: Vec<u32>,
}

pub fn validate_module_actions(module: &ActionModule, actions: &[Action]) -> Result<(), ActionViolation> {
    validate_actions_for(module.kind, actions)
}

pub fn validate_actions_for(kind: ModuleKind, actions: &[Action]) -> Result<(), ActionViolation> {
    let offending: Vec<u32> = actions
        .iter()
        .filter(|a| a.verb.kind() != kind)
        .map(|a| a.ordinal)
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(ActionViolation { kind, offending })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotedError {
    pub seq: u64,
    pub subgoal_id: Option<SubgoalId>,
    pub code: ErrorCode,
    pub message: String,
}

/// Everything derivable from a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub goal: Option<Goal>,
    pub subgoals: Vec<Subgoal>,
    pub modules: Vec<ActionModule>,
    pub results: BTreeMap<ModuleId, ModuleResult>,
    pub actions: BTreeMap<ModuleId, Vec<Action>>,
    pub presentations: BTreeMap<ModuleId, Presentation>,
    pub kb: KnowledgeBase,
    pub feedback: Vec<Feedback>,
    pub suggestions: Vec<Suggestion>,
    /// Suggestions the user may still accept or answer in the current phase.
    pub open_suggestions: Vec<SuggestionId>,
    pub errors: Vec<NotedError>,
    /// Seq the next event must carry.
    pub next_seq: u64,
    pub last_at: Option<Timestamp>,
}

impl Default for SessionState {
    fn default() -> Self {
        SessionState {
            phase: Phase::AwaitingGoal,
            goal: None,
            subgoals: Vec::new(),
            modules: Vec::new(),
            results: BTreeMap::new(),
            actions: BTreeMap::new(),
            presentations: BTreeMap::new(),
            kb: KnowledgeBase::new(),
            feedback: Vec::new(),
            suggestions: Vec::new(),
            open_suggestions: Vec::new(),
            errors: Vec::new(),
            next_seq: 0,
            last_at: None,
        }
    }
}

/// Project a full log. The log must begin at seq 0 with `GoalSet`.
pub fn project(events: &[SessionEvent]) -> Result<SessionState, ProjectionError> {
    if events.is_empty() {
        return Err(ProjectionError::EmptyLog);
    }
    let mut state = SessionState::default();
    for ev in events {
        state.apply(ev)?;
    }
    Ok(state)
}

impl SessionState {
    pub fn subgoal(&self, id: SubgoalId) -> Option<&Subgoal> {
        self.subgoals.get(id.0 as usize).filter(|s| s.id == id)
    }

    pub fn module(&self, id: ModuleId) -> Option<&ActionModule> {
        self.modules.get(id.0 as usize).filter(|m| m.id == id)
    }

    pub fn suggestion(&self, id: SuggestionId) -> Option<&Suggestion> {
        self.suggestions.get(id.0 as usize).filter(|s| s.id == id)
    }

    pub fn current_subgoal(&self) -> Option<&Subgoal> {
        self.phase.subgoal().and_then(|id| self.subgoal(id))
    }

    pub fn open_suggestions(&self) -> impl Iterator<Item = &Suggestion> {
        self.open_suggestions.iter().filter_map(|id| self.suggestion(*id))
    }

    pub fn module_kinds(&self) -> Vec<ModuleKind> {
        self.modules.iter().map(|m| m.kind).collect()
    }

    pub fn modules_for(&self, subgoal: SubgoalId) -> impl Iterator<Item = &ActionModule> {
        self.modules.iter().filter(move |m| m.subgoal_id == subgoal)
    }

    /// The most recent module of a subgoal and its result, if finished.
    pub fn last_module(&self, subgoal: SubgoalId) -> Option<(&ActionModule, Option<&ModuleResult>)> {
        self.modules
            .iter()
            .rev()
            .find(|m| m.subgoal_id == subgoal)
            .map(|m| (m, self.results.get(&m.id)))
    }

    pub fn next_feedback_id(&self) -> FeedbackId {
        FeedbackId(self.feedback.len() as u32)
    }

    pub fn next_suggestion_id(&self) -> SuggestionId {
        SuggestionId(self.suggestions.len() as u32)
    }

    pub fn next_module_id(&self) -> ModuleId {
        ModuleId(self.modules.len() as u32)
    }

    /// Fold one event. On error the state is left unchanged.
    pub fn apply(&mut self, ev: &SessionEvent) -> Result<(), ProjectionError> {
        if ev.seq != self.next_seq {
            return Err(ProjectionError::GapInLog { expected: self.next_seq, found: ev.seq });
        }
        let mut next = self.clone();
        next.apply_body(ev).map_err(|reason| ProjectionError::IllegalTransition {
            seq: ev.seq,
            kind: ev.kind(),
            reason,
        })?;
        next.next_seq += 1;
        next.last_at = Some(ev.at);
        *self = next;
        Ok(())
    }

    fn apply_body(&mut self, ev: &SessionEvent) -> Result<(), String> {
        let phase = self.phase;
        let wrong_phase = || format!("not permitted in phase {}", phase.name());
        match &ev.body {
            EventBody::GoalSet { goal_id, text } => {
                if phase != Phase::AwaitingGoal {
                    return Err(wrong_phase());
                }
                if text.trim().is_empty() {
                    return Err("goal text is empty".into());
                }
                self.goal = Some(Goal {
                    id: *goal_id,
                    text: text.clone(),
                    status: GoalStatus::Created,
                    subgoal_ids: Vec::new(),
                });
                self.phase = Phase::AwaitingDecomposition;
            }
            EventBody::SubgoalsDecomposed { subgoals } => {
                if phase != Phase::AwaitingDecomposition {
                    return Err(wrong_phase());
                }
                if subgoals.is_empty() {
                    return Err("decomposition yielded no subgoals".into());
                }
                let goal = self.goal.as_mut().ok_or("no goal")?;
                for (i, s) in subgoals.iter().enumerate() {
                    if s.id.0 as usize != i || s.ordinal as usize != i {
                        return Err(format!("subgoal {i} has id {} / ordinal {}", s.id.0, s.ordinal));
                    }
                    if s.goal_id != goal.id || s.status != SubgoalStatus::Pending || s.loop_count != 0 {
                        return Err(format!("subgoal {i} is not a fresh pending subgoal of this goal"));
                    }
                }
                goal.subgoal_ids = subgoals.iter().map(|s| s.id).collect();
                goal.status = GoalStatus::Decomposed;
                self.subgoals = subgoals.clone();
                self.phase = Phase::Advancing;
            }
            EventBody::SubgoalStarted { subgoal_id, ordinal } => {
                if phase != Phase::Advancing {
                    return Err(wrong_phase());
                }
                let next = self
                    .subgoals
                    .iter()
                    .find(|s| s.status != SubgoalStatus::Done)
                    .ok_or("no subgoal left to start")?;
                if next.id != *subgoal_id || next.ordinal != *ordinal {
                    return Err(format!(
                        "subgoal {} must start before {}",
                        next.ordinal, ordinal
                    ));
                }
                let idx = next.id.0 as usize;
                self.subgoals[idx].status = SubgoalStatus::ContextGathering;
                if let Some(goal) = self.goal.as_mut() {
                    goal.status = GoalStatus::InProgress;
                }
                self.open_suggestions.clear();
                self.phase = Phase::ContextGathering { subgoal: *subgoal_id };
            }
            EventBody::QuestionsPosed { subgoal_id, questions } => {
                match phase {
                    Phase::ContextGathering { subgoal } if subgoal == *subgoal_id => {}
                    _ => return Err(wrong_phase()),
                }
                for q in questions {
                    if q.kind != SuggestionKind::Question {
                        return Err(format!("{} is not a question", q.id));
                    }
                    if q.loop_index != 0 {
                        return Err("questions belong to loop 0".into());
                    }
                }
                self.push_suggestions(*subgoal_id, questions)?;
            }
            EventBody::FeedbackReceived { feedback } => self.apply_feedback(feedback, phase)?,
            EventBody::ModuleGenerated { module } => {
                let subgoal = match phase {
                    Phase::ActionPhase { subgoal, module: None, step: ActionStep::Generating } => subgoal,
                    _ => return Err(wrong_phase()),
                };
                if module.id != self.next_module_id() {
                    return Err(format!("expected module id {}", self.next_module_id()));
                }
                let loop_count = self.subgoal(subgoal).map(|s| s.loop_count).unwrap_or(0);
                if module.subgoal_id != subgoal || module.loop_index != loop_count {
                    return Err("module does not belong to the current subgoal loop".into());
                }
                if module.status != ModuleStatus::Generated || module.result_id.is_some() {
                    return Err("a new module must be Generated with no result".into());
                }
                if module.provenance.is_empty() {
                    return Err("module has no provenance".into());
                }
                for p in &module.provenance {
                    let known = match p {
                        Provenance::Feedback(f) => (f.0 as usize) < self.feedback.len(),
                        Provenance::Suggestion(s) => (s.0 as usize) < self.suggestions.len(),
                    };
                    if !known {
                        return Err(format!("unknown provenance {p:?}"));
                    }
                }
                self.modules.push(module.clone());
                self.phase = Phase::ActionPhase {
                    subgoal,
                    module: Some(module.id),
                    step: ActionStep::Generating,
                };
            }
            EventBody::ModuleDispatched { module_id } => match phase {
                Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Generating }
                    if m == *module_id =>
                {
                    self.modules[m.0 as usize].status = ModuleStatus::Executing;
                    self.phase = Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Executing };
                }
                _ => return Err(wrong_phase()),
            },
            EventBody::ModuleCompleted { result, actions, findings } => {
                let (subgoal, module_id) = match phase {
                    Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Executing }
                        if m == result.module_id =>
                    {
                        (subgoal, m)
                    }
                    _ => return Err(wrong_phase()),
                };
                self.check_completion(module_id, result, actions, findings)?;
                let module = &mut self.modules[module_id.0 as usize];
                module.status = result.status;
                module.result_id = Some(ResultId(module_id.0));
                for f in findings {
                    self.kb.push_finding(f.clone());
                }
                self.subgoals[subgoal.0 as usize].loop_count += 1;
                self.results.insert(module_id, result.clone());
                self.actions.insert(module_id, actions.clone());
                self.phase = Phase::ActionPhase { subgoal, module: Some(module_id), step: ActionStep::Reporting };
            }
            EventBody::ResultsPresented { module_id, presentation } => match phase {
                Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Reporting }
                    if m == *module_id =>
                {
                    if let Some(table) = &presentation.table {
                        if let Some(row) = table.rows.iter().find(|r| !self.kb.contains(r.finding_id)) {
                            return Err(format!("table references unknown {}", row.finding_id));
                        }
                    }
                    self.presentations.insert(m, presentation.clone());
                    let loop_index = self.subgoals[subgoal.0 as usize].loop_count;
                    self.open_suggestions.clear();
                    self.phase = Phase::DecisionPhase { subgoal, loop_index };
                }
                _ => return Err(wrong_phase()),
            },
            EventBody::SuggestionsOffered { subgoal_id, loop_index, suggestions } => {
                match phase {
                    Phase::DecisionPhase { subgoal, loop_index: li }
                        if subgoal == *subgoal_id && li == *loop_index => {}
                    _ => return Err(wrong_phase()),
                }
                if suggestions.iter().any(|s| s.loop_index != *loop_index) {
                    return Err("suggestion loop index mismatch".into());
                }
                if self.open_suggestions.len() + suggestions.len() > MAX_SUGGESTIONS {
                    return Err(format!("more than {MAX_SUGGESTIONS} suggestions in one decision phase"));
                }
                self.push_suggestions(*subgoal_id, suggestions)?;
            }
            EventBody::SubgoalTerminated { subgoal_id, feedback_id } => match phase {
                Phase::Terminating { subgoal, feedback } if subgoal == *subgoal_id && feedback == *feedback_id => {
                    self.subgoals[subgoal.0 as usize].status = SubgoalStatus::Done;
                    self.open_suggestions.clear();
                    self.phase = Phase::Advancing;
                }
                _ => return Err(format!("no pending Terminate feedback ({})", phase.name())),
            },
            EventBody::GoalCompleted { goal_id } => {
                if phase != Phase::Advancing {
                    return Err(wrong_phase());
                }
                let goal = self.goal.as_mut().ok_or("no goal")?;
                if goal.id != *goal_id {
                    return Err("goal id mismatch".into());
                }
                if self.subgoals.is_empty() || self.subgoals.iter().any(|s| s.status != SubgoalStatus::Done) {
                    return Err("not every subgoal is done".into());
                }
                goal.status = GoalStatus::Done;
                self.phase = Phase::GoalDone;
            }
            EventBody::ErrorNoted { subgoal_id, code, message } => {
                if phase == Phase::AwaitingGoal {
                    return Err(wrong_phase());
                }
                let generating = match phase {
                    Phase::ActionPhase { subgoal, module: None, step: ActionStep::Generating } => Some(subgoal),
                    _ => None,
                };
                if *code == ErrorCode::PlannerRefusal && generating.is_none() {
                    return Err(wrong_phase());
                }
                if let (Some(subgoal), ErrorCode::PlannerRefusal | ErrorCode::BackendFailure | ErrorCode::MalformedResponse) =
                    (generating, code)
                {
                    // A planner error ends the generating step without a module.
                    let s = &mut self.subgoals[subgoal.0 as usize];
                    if s.loop_count == 0 {
                        s.status = SubgoalStatus::ContextGathering;
                        self.phase = Phase::ContextGathering { subgoal };
                    } else {
                        self.phase = Phase::DecisionPhase { subgoal, loop_index: s.loop_count };
                    }
                }
                self.errors.push(NotedError {
                    seq: ev.seq,
                    subgoal_id: *subgoal_id,
                    code: *code,
                    message: message.clone(),
                });
            }
        }
        Ok(())
    }

    fn push_suggestions(&mut self, subgoal: SubgoalId, items: &[Suggestion]) -> Result<(), String> {
        for s in items {
            if s.id != self.next_suggestion_id() {
                return Err(format!("expected suggestion id {}, got {}", self.next_suggestion_id(), s.id));
            }
            if s.subgoal_id != subgoal {
                return Err(format!("{} belongs to another subgoal", s.id));
            }
            if (s.kind == SuggestionKind::ProposedModule) != s.proposed_module.is_some() {
                return Err(format!("{} proposed-module draft mismatch", s.id));
            }
            self.suggestions.push(s.clone());
            self.open_suggestions.push(s.id);
        }
        Ok(())
    }

    fn apply_feedback(&mut self, fb: &Feedback, phase: Phase) -> Result<(), String> {
        let subgoal = match phase {
            Phase::ContextGathering { subgoal } | Phase::DecisionPhase { subgoal, .. } => subgoal,
            _ => return Err(format!("feedback not accepted in phase {}", phase.name())),
        };
        if fb.subgoal_id != subgoal {
            return Err(format!("feedback targets {} but current is {}", fb.subgoal_id, subgoal));
        }
        if fb.id != self.next_feedback_id() {
            return Err(format!("expected feedback id {}", self.next_feedback_id()));
        }
        let loop_count = self.subgoals[subgoal.0 as usize].loop_count;
        if fb.loop_index != loop_count {
            return Err(format!("feedback loop {} but subgoal is at loop {loop_count}", fb.loop_index));
        }
        if let Some(reply) = fb.in_reply_to {
            let pos = self
                .open_suggestions
                .iter()
                .position(|s| *s == reply)
                .ok_or_else(|| format!("{reply} is not open"))?;
            let kind = self.suggestions[reply.0 as usize].kind;
            let compatible = matches!(
                (fb.kind(), kind),
                (FeedbackKind::Terminate, SuggestionKind::TerminationOffer)
                    | (FeedbackKind::ContextInjection, SuggestionKind::Question)
                    | (FeedbackKind::Decision, SuggestionKind::ProposedModule)
                    | (FeedbackKind::Decision, SuggestionKind::Question)
            );
            if !compatible {
                return Err(format!("{:?} feedback cannot reply to a {kind:?}", fb.kind()));
            }
            self.open_suggestions.remove(pos);
        }
        match &fb.payload {
            FeedbackPayload::ContextInjection { items } => {
                for item in items {
                    if item.key.trim().is_empty() {
                        return Err("context item with empty key".into());
                    }
                    self.kb.push_context(ContextItem {
                        key: item.key.clone(),
                        value: item.value.clone(),
                        scope: if item.goal_wide { ContextScope::Goal } else { ContextScope::Subgoal(subgoal) },
                        source_feedback_id: fb.id,
                    });
                }
            }
            FeedbackPayload::Decision { .. } => {
                self.subgoals[subgoal.0 as usize].status = SubgoalStatus::Active;
                self.open_suggestions.clear();
                self.phase = Phase::ActionPhase { subgoal, module: None, step: ActionStep::Generating };
            }
            FeedbackPayload::Terminate { .. } => {
                self.phase = Phase::Terminating { subgoal, feedback: fb.id };
            }
        }
        self.feedback.push(fb.clone());
        Ok(())
    }

    fn check_completion(
        &self,
        module_id: ModuleId,
        result: &ModuleResult,
        actions: &[Action],
        findings: &[crate::domain::Finding],
    ) -> Result<(), String> {
        let module = &self.modules[module_id.0 as usize];
        if !result.status.is_terminal() {
            return Err("result status is not terminal".into());
        }
        if result.cost.actions_executed as usize != actions.len() {
            return Err("actions_executed disagrees with the action list".into());
        }
        if let Some((i, a)) = actions.iter().enumerate().find(|(i, a)| a.ordinal as usize != *i) {
            return Err(format!("action {i} has ordinal {}", a.ordinal));
        }
        if let Err(v) = validate_module_actions(module, actions) {
            return Err(v.to_string());
        }
        if module.kind == ModuleKind::Exploitation && result.cost.pages_visited != 0 {
            return Err("exploitation module visited pages".into());
        }
        let ids: Vec<_> = findings.iter().map(|f| f.id).collect();
        if ids != result.finding_ids {
            return Err("result finding ids disagree with findings".into());
        }
        let base = self.kb.findings().len() as u32;
        for (i, f) in findings.iter().enumerate() {
            if f.id.0 != base + i as u32 {
                return Err(format!("finding id {} out of sequence", f.id));
            }
            if f.module_id != module_id || f.subgoal_id != module.subgoal_id {
                return Err(format!("{} attributed to another module", f.id));
            }
            match module.kind {
                ModuleKind::Exploration => {
                    if f.source_page.is_none() {
                        return Err(format!("{} has no source page", f.id));
                    }
                }
                ModuleKind::Exploitation => {
                    let inputs = f.derived_from();
                    if inputs.is_empty() || f.source_page.is_some() {
                        return Err(format!("{} must carry derived_from and no source page", f.id));
                    }
                    if let Some(missing) = inputs.iter().find(|id| !self.kb.contains(**id)) {
                        return Err(format!("{} derived from unknown {missing}", f.id));
                    }
                }
            }
        }
        Ok(())
    }
}
