//! The protocol state machine. A [`Session`] owns one event log; every
//! transition is expressed as events folded through
//! [`SessionState::apply`], so the live state is always `project(log)`.

use std::sync::Arc;

use thiserror::Error;

use crate::agent::{AgentBackend, ExecutionOutcome, ExecutionRequest};
use crate::clock::Clock;
use crate::domain::{
    Feedback, FeedbackDraft, FeedbackPayload, Finding, FindingId, GoalId, ModuleResult, ModuleStatus, Provenance,
    ActionModule, ModuleId, Subgoal, SubgoalId, SubgoalStatus, Suggestion, SuggestionDraft, SuggestionId, SuggestionKind,
};
use crate::event::{ErrorCode, EventBody, SessionEvent};
use crate::planner::{
    classify_feedback, default_presentation, ClassifyError, ModelBackend, ModelError, PlannerRequest,
    ProposalRequest, RawFeedback,
};
use crate::projection::{project, ActionStep, Phase, ProjectionError, SessionState, MAX_SUGGESTIONS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestratorError {
    #[error("goal text is empty")]
    EmptyGoal,
    #[error("{operation} is not permitted in phase {phase}")]
    WrongPhase { operation: &'static str, phase: &'static str },
    #[error("unknown subgoal {0}")]
    UnknownSubgoal(SubgoalId),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("model backend failure: {0}")]
    BackendFailure(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

const GENERIC_QUESTION: &str = "What should the agent do next?";

pub struct Session {
    id: String,
    events: Vec<SessionEvent>,
    state: SessionState,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("events", &self.events.len())
            .field("phase", &self.state.phase)
            .finish()
    }
}

impl Session {
    /// Start a session with a `GoalSet` event.
    pub fn create(id: impl Into<String>, goal: &str, clock: Arc<dyn Clock>) -> Result<Self, OrchestratorError> {
        if goal.trim().is_empty() {
            return Err(OrchestratorError::EmptyGoal);
        }
        let mut s = Session { id: id.into(), events: Vec::new(), state: SessionState::default(), clock };
        s.emit(EventBody::GoalSet { goal_id: GoalId(0), text: goal.to_string() })?;
        Ok(s)
    }

    /// Rebuild a session from a persisted log.
    pub fn restore(id: impl Into<String>, events: Vec<SessionEvent>, clock: Arc<dyn Clock>) -> Result<Self, ProjectionError> {
        let state = project(&events)?;
        Ok(Session { id: id.into(), events, state, clock })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn current_state(&self) -> SessionState {
        self.state.clone()
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn events_from(&self, seq: u64) -> &[SessionEvent] {
        let start = (seq as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn is_executing(&self) -> bool {
        matches!(self.state.phase, Phase::ActionPhase { step: ActionStep::Executing, .. })
    }

    fn emit(&mut self, body: EventBody) -> Result<u64, ProjectionError> {
        let ev = SessionEvent { seq: self.state.next_seq, at: self.clock.now(), body };
        self.state.apply(&ev)?;
        let seq = ev.seq;
        self.events.push(ev);
        Ok(seq)
    }

    fn wrong_phase(&self, operation: &'static str) -> OrchestratorError {
        OrchestratorError::WrongPhase { operation, phase: self.state.phase.name() }
    }

    /// Decompose the goal, start the first subgoal and pose its questions.
    pub fn run_decomposition(&mut self, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        if self.state.phase != Phase::AwaitingDecomposition {
            return Err(self.wrong_phase("run_decomposition"));
        }
        let goal = self.state.goal.clone().expect("goal is set before decomposition");
        let purposes = model
            .decompose_goal(&goal.text, &self.state.kb)
            .map_err(|e| OrchestratorError::BackendFailure(e.to_string()))?;
        if purposes.is_empty() {
            return Err(OrchestratorError::BackendFailure("decomposition yielded no subgoals".into()));
        }
        let subgoals = purposes
            .into_iter()
            .enumerate()
            .map(|(i, purpose)| Subgoal {
                id: SubgoalId(i as u32),
                goal_id: goal.id,
                ordinal: i as u32,
                purpose,
                status: SubgoalStatus::Pending,
                loop_count: 0,
            })
            .collect();
        let mut seqs = vec![self.emit(EventBody::SubgoalsDecomposed { subgoals })?];
        seqs.extend(self.advance_subgoal(model)?);
        Ok(seqs)
    }

    /// After decomposition or a termination: start the next subgoal or finish the goal.
    fn advance_subgoal(&mut self, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let next = self.state.subgoals.iter().find(|s| s.status != SubgoalStatus::Done).cloned();
        let Some(next) = next else {
            let goal_id = self.state.goal.as_ref().expect("goal").id;
            return Ok(vec![self.emit(EventBody::GoalCompleted { goal_id })?]);
        };
        let mut seqs = vec![self.emit(EventBody::SubgoalStarted { subgoal_id: next.id, ordinal: next.ordinal })?];
        let drafts = match model.initial_questions(&next, &self.state.kb) {
            Ok(q) => q,
            Err(e) => {
                seqs.push(self.note(Some(next.id), code_for(&e), e.to_string())?);
                Vec::new()
            }
        };
        let questions: Vec<SuggestionDraft> = drafts
            .into_iter()
            .filter(|d| d.kind == SuggestionKind::Question)
            .take(MAX_SUGGESTIONS)
            .collect();
        let questions = self.bind_suggestions(next.id, 0, questions);
        seqs.push(self.emit(EventBody::QuestionsPosed { subgoal_id: next.id, questions })?);
        Ok(seqs)
    }

    fn note(&mut self, subgoal_id: Option<SubgoalId>, code: ErrorCode, message: String) -> Result<u64, ProjectionError> {
        self.emit(EventBody::ErrorNoted { subgoal_id, code, message })
    }

    fn bind_suggestions(&self, subgoal: SubgoalId, loop_index: u32, drafts: Vec<SuggestionDraft>) -> Vec<Suggestion> {
        let base = self.state.next_suggestion_id().0;
        drafts
            .into_iter()
            .filter(|d| (d.kind == SuggestionKind::ProposedModule) == d.proposed_module.is_some())
            .enumerate()
            .map(|(i, d)| Suggestion {
                id: SuggestionId(base + i as u32),
                subgoal_id: subgoal,
                loop_index,
                kind: d.kind,
                text: d.text,
                proposed_module: d.proposed_module,
                context_key: d.context_key,
            })
            .collect()
    }

    /// Classify raw client input, then apply it.
    pub fn submit_raw(&mut self, raw: &RawFeedback, model: &dyn ModelBackend) -> Result<Submitted, OrchestratorError> {
        if !self.state.phase.accepts_feedback() {
            return Err(self.wrong_phase("submit_feedback"));
        }
        let classified = classify_feedback(model, raw, &self.state)?;
        let mut seqs = Vec::new();
        for w in &classified.warnings {
            seqs.push(self.note(self.state.phase.subgoal(), ErrorCode::MalformedResponse, w.clone())?);
        }
        seqs.extend(self.submit_feedback(classified.draft, model)?);
        Ok(Submitted { seqs, warnings: classified.warnings })
    }

    /// Apply classified feedback. Decisions run module generation and
    /// dispatch; the caller then executes the module (see
    /// [`Session::execution_request`] and [`Session::complete_module`]).
    pub fn submit_feedback(&mut self, draft: FeedbackDraft, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let current = match self.state.phase {
            Phase::ContextGathering { subgoal } | Phase::DecisionPhase { subgoal, .. } => subgoal,
            _ => return Err(self.wrong_phase("submit_feedback")),
        };
        let subgoal_id = draft.subgoal_id.unwrap_or(current);
        if self.state.subgoal(subgoal_id).is_none() {
            return Err(OrchestratorError::UnknownSubgoal(subgoal_id));
        }
        if subgoal_id != current {
            return Err(OrchestratorError::InvalidFeedback(format!(
                "feedback targets {subgoal_id} but the current subgoal is {current}"
            )));
        }
        let loop_index = self.state.subgoals[subgoal_id.0 as usize].loop_count;
        let feedback = Feedback {
            id: self.state.next_feedback_id(),
            subgoal_id,
            loop_index,
            in_reply_to: draft.in_reply_to,
            payload: draft.payload,
        };
        let fb_seq = self.emit(EventBody::FeedbackReceived { feedback: feedback.clone() }).map_err(|e| match e {
            ProjectionError::IllegalTransition { reason, .. } => OrchestratorError::InvalidFeedback(reason),
            other => OrchestratorError::Projection(other),
        })?;
        let mut seqs = vec![fb_seq];
        match &feedback.payload {
            FeedbackPayload::ContextInjection { .. } => {}
            FeedbackPayload::Decision { .. } => seqs.extend(self.dispatch_module(model)?),
            FeedbackPayload::Terminate { .. } => {
                seqs.push(self.emit(EventBody::SubgoalTerminated { subgoal_id, feedback_id: feedback.id })?);
                seqs.extend(self.advance_subgoal(model)?);
            }
        }
        Ok(seqs)
    }

    /// Generate a module for the pending Decision and dispatch it. A
    /// planner refusal becomes a clarifying question instead.
    pub fn dispatch_module(&mut self, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let subgoal_id = match self.state.phase {
            Phase::ActionPhase { subgoal, module: None, step: ActionStep::Generating } => subgoal,
            _ => return Err(self.wrong_phase("dispatch_module")),
        };
        let generated = {
            let st = &self.state;
            let subgoal = st.subgoal(subgoal_id).expect("current subgoal exists");
            let trigger = st.feedback.last().expect("a Decision triggered generation");
            let accepted = trigger.in_reply_to.and_then(|id| st.suggestion(id));
            let (last_module, last_result) = match st.last_module(subgoal_id) {
                Some((m, r)) => (Some(m), r),
                None => (None, None),
            };
            let req = PlannerRequest {
                goal: &st.goal.as_ref().expect("goal").text,
                subgoal,
                context: st.kb.visible_context(subgoal_id),
                kb: &st.kb,
                last_module,
                last_result,
                feedback: trigger,
                accepted,
                loop_index: subgoal.loop_count,
            };
            let mut provenance = Vec::new();
            if subgoal.loop_count == 0 {
                // first module: everything said during context gathering
                provenance.extend(
                    st.feedback
                        .iter()
                        .filter(|f| f.subgoal_id == subgoal_id && f.loop_index == 0)
                        .filter(|f| matches!(f.payload, FeedbackPayload::ContextInjection { .. }))
                        .map(|f| Provenance::Feedback(f.id)),
                );
            }
            provenance.push(Provenance::Feedback(trigger.id));
            if let Some(s) = accepted {
                provenance.push(Provenance::Suggestion(s.id));
            }
            let requested = req.requested_kind();
            model
                .generate_module(&req)
                .and_then(|draft| match requested {
                    // kind obedience holds for every backend, not just the scripted one
                    Some(k) if draft.kind != k => Err(ModelError::MalformedResponse(format!(
                        "planner returned a {:?} module for an explicit {k:?} request",
                        draft.kind
                    ))),
                    _ => Ok(draft),
                })
                .map(|draft| ActionModule {
                id: st.next_module_id(),
                subgoal_id,
                loop_index: subgoal.loop_count,
                kind: draft.kind,
                directive: draft.directive,
                context_keys: draft.context_keys,
                provenance,
                status: ModuleStatus::Generated,
                result_id: None,
            })
        };
        match generated {
            Ok(module) => {
                let id = module.id;
                let a = self.emit(EventBody::ModuleGenerated { module })?;
                let b = self.emit(EventBody::ModuleDispatched { module_id: id })?;
                Ok(vec![a, b])
            }
            Err(e) => {
                let (code, question) = match &e {
                    ModelError::PlannerRefusal { question } => (ErrorCode::PlannerRefusal, question.clone()),
                    other => (code_for(other), GENERIC_QUESTION.to_string()),
                };
                let mut seqs = vec![self.note(Some(subgoal_id), code, e.to_string())?];
                seqs.push(self.pose_question(subgoal_id, question)?);
                Ok(seqs)
            }
        }
    }

    fn pose_question(&mut self, subgoal_id: SubgoalId, text: String) -> Result<u64, ProjectionError> {
        match self.state.phase {
            Phase::ContextGathering { .. } => {
                let questions = self.bind_suggestions(subgoal_id, 0, vec![SuggestionDraft::question(text, None)]);
                self.emit(EventBody::QuestionsPosed { subgoal_id, questions })
            }
            _ => {
                let loop_index = self.state.subgoals[subgoal_id.0 as usize].loop_count;
                let suggestions =
                    self.bind_suggestions(subgoal_id, loop_index, vec![SuggestionDraft::question(text, None)]);
                self.emit(EventBody::SuggestionsOffered { subgoal_id, loop_index, suggestions })
            }
        }
    }

    /// What the agent needs to run the dispatched module.
    pub fn execution_request(&self) -> Option<ExecutionRequest> {
        let Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Executing } = self.state.phase else {
            return None;
        };
        Some(ExecutionRequest {
            module: self.state.module(m)?.clone(),
            context: self.state.kb.visible_context(subgoal),
            kb: self.state.kb.clone(),
        })
    }

    /// Fold the agent's outcome into the log, present it and offer
    /// suggestions. The session always ends up in a decision phase.
    pub fn complete_module(&mut self, outcome: ExecutionOutcome, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let (subgoal_id, module_id) = match self.state.phase {
            Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Executing } => (subgoal, m),
            _ => return Err(self.wrong_phase("complete_module")),
        };
        let mut seqs = Vec::new();
        let body = completion_body(&self.state, module_id, subgoal_id, outcome);
        let completed = match self.emit(body) {
            Ok(seq) => seq,
            Err(ProjectionError::IllegalTransition { reason, .. }) => {
                // the backend broke a module contract: record it as a failure
                let failed = ExecutionOutcome::failed(format!("agent result rejected: {reason}"));
                let body = completion_body(&self.state, module_id, subgoal_id, failed);
                self.emit(body)?
            }
            Err(e) => return Err(e.into()),
        };
        seqs.push(completed);
        let result = &self.state.results[&module_id];
        if result.status == ModuleStatus::Failed {
            let msg = result.error_notes.join("; ");
            seqs.push(self.note(Some(subgoal_id), ErrorCode::AgentFailure, msg)?);
        }
        seqs.extend(self.report(model)?);
        Ok(seqs)
    }

    /// True when a completed module still lacks its presentation or its
    /// suggestions, as after a crash part-way through `complete_module`.
    pub fn needs_report(&self) -> bool {
        report_pending(&self.state, &self.events)
    }

    /// Present the last completed module and offer the next suggestions,
    /// skipping whatever part is already in the log.
    pub fn report(&mut self, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let mut seqs = Vec::new();
        let (subgoal_id, module_id) = match self.state.phase {
            Phase::ActionPhase { subgoal, module: Some(m), step: ActionStep::Reporting } => (subgoal, m),
            Phase::DecisionPhase { subgoal, .. } => match (report_tail(&self.events), self.state.modules_for(subgoal).last()) {
                (Some(notes), Some(m)) => {
                    let module_id = m.id;
                    if notes > 0 {
                        // proposing already failed once
                        return self.offer(subgoal, vec![SuggestionDraft::question(GENERIC_QUESTION, None)]);
                    }
                    return self.propose(subgoal, module_id, model);
                }
                _ => return Err(self.wrong_phase("report")),
            },
            _ => return Err(self.wrong_phase("report")),
        };
        let module = self.state.module(module_id).expect("module exists").clone();
        let result = self.state.results[&module_id].clone();

        let mut presentation = model.summarize(&module, &result, &self.state.kb);
        let dangling = presentation
            .table
            .as_ref()
            .is_some_and(|t| t.rows.iter().any(|r| !self.state.kb.contains(r.finding_id)));
        if dangling {
            presentation = default_presentation(&module, &result, &self.state.kb);
        }
        seqs.push(self.emit(EventBody::ResultsPresented { module_id, presentation })?);
        seqs.extend(self.propose(subgoal_id, module_id, model)?);
        Ok(seqs)
    }

    fn propose(&mut self, subgoal_id: SubgoalId, module_id: ModuleId, model: &dyn ModelBackend) -> Result<Vec<u64>, OrchestratorError> {
        let mut seqs = Vec::new();
        let loop_index = self.state.subgoals[subgoal_id.0 as usize].loop_count;
        let proposals = {
            let st = &self.state;
            let req = ProposalRequest {
                goal: &st.goal.as_ref().expect("goal").text,
                subgoal: st.subgoal(subgoal_id).expect("subgoal"),
                context: st.kb.visible_context(subgoal_id),
                kb: &st.kb,
                last_module: st.module(module_id).expect("module"),
                last_result: &st.results[&module_id],
                loop_index,
                history: st.modules_for(subgoal_id).collect(),
            };
            model.propose_next(&req)
        };
        let drafts = match proposals {
            Ok(d) => d.into_iter().take(MAX_SUGGESTIONS).collect(),
            Err(e) => {
                seqs.push(self.note(Some(subgoal_id), code_for(&e), e.to_string())?);
                vec![SuggestionDraft::question(GENERIC_QUESTION, None)]
            }
        };
        seqs.extend(self.offer(subgoal_id, drafts)?);
        Ok(seqs)
    }

    fn offer(&mut self, subgoal_id: SubgoalId, drafts: Vec<SuggestionDraft>) -> Result<Vec<u64>, OrchestratorError> {
        let loop_index = self.state.subgoals[subgoal_id.0 as usize].loop_count;
        let suggestions = self.bind_suggestions(subgoal_id, loop_index, drafts);
        Ok(vec![self.emit(EventBody::SuggestionsOffered { subgoal_id, loop_index, suggestions })?])
    }

    /// Drive the action phase to the next decision phase: generate and
    /// dispatch if needed, then execute synchronously and complete.
    pub fn advance_action_phase(
        &mut self,
        model: &dyn ModelBackend,
        agent: &dyn AgentBackend,
    ) -> Result<Vec<u64>, OrchestratorError> {
        let mut seqs = Vec::new();
        if matches!(self.state.phase, Phase::ActionPhase { module: None, step: ActionStep::Generating, .. }) {
            seqs.extend(self.dispatch_module(model)?);
        }
        if let Some(req) = self.execution_request() {
            let outcome = agent.execute(&req);
            seqs.extend(self.complete_module(outcome, model)?);
        } else if seqs.is_empty() {
            return Err(self.wrong_phase("advance_action_phase"));
        }
        Ok(seqs)
    }

    /// Submit feedback and, if it dispatched a module, run it to completion.
    pub fn step(
        &mut self,
        raw: &RawFeedback,
        model: &dyn ModelBackend,
        agent: &dyn AgentBackend,
    ) -> Result<Submitted, OrchestratorError> {
        let mut out = self.submit_raw(raw, model)?;
        if self.execution_request().is_some() {
            out.seqs.extend(self.advance_action_phase(model, agent)?);
        }
        Ok(out)
    }
}

/// Result of a feedback submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submitted {
    pub seqs: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Whether the log stops between a module's completion and the
/// suggestions that follow it.
pub fn report_pending(state: &SessionState, events: &[SessionEvent]) -> bool {
    match state.phase {
        Phase::ActionPhase { step: ActionStep::Reporting, .. } => true,
        Phase::DecisionPhase { .. } => report_tail(events).is_some(),
        _ => false,
    }
}

/// Number of notes written since the last presentation, if no suggestions
/// followed it yet.
fn report_tail(events: &[SessionEvent]) -> Option<usize> {
    let mut notes = 0;
    for ev in events.iter().rev() {
        match ev.body {
            EventBody::ResultsPresented { .. } => return Some(notes),
            EventBody::ErrorNoted { .. } => notes += 1,
            _ => return None,
        }
    }
    None
}

fn code_for(e: &ModelError) -> ErrorCode {
    match e {
        ModelError::BackendFailure(_) => ErrorCode::BackendFailure,
        ModelError::MalformedResponse(_) => ErrorCode::MalformedResponse,
        ModelError::PlannerRefusal { .. } => ErrorCode::PlannerRefusal,
    }
}

fn completion_body(
    state: &SessionState,
    module_id: ModuleId,
    subgoal_id: SubgoalId,
    outcome: ExecutionOutcome,
) -> EventBody {
    let base = state.kb.findings().len() as u32;
    let findings: Vec<Finding> = outcome
        .findings
        .into_iter()
        .enumerate()
        .map(|(i, d)| Finding {
            id: FindingId(base + i as u32),
            entity: d.entity,
            attributes: d.attributes,
            source_page: d.source_page,
            module_id,
            subgoal_id,
        })
        .collect();
    let result = ModuleResult {
        module_id,
        status: if outcome.status.is_terminal() { outcome.status } else { ModuleStatus::Failed },
        finding_ids: findings.iter().map(|f| f.id).collect(),
        narrative: outcome.narrative,
        cost: outcome.cost,
        error_notes: outcome.error_notes,
    };
    EventBody::ModuleCompleted { result, actions: outcome.actions, findings }
}
