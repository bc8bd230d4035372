//! The Model actor: mediates between the user and the agent.
//!
//! Backends implement [`ModelBackend`]. They are stateless between calls;
//! everything they need travels in the request types below.

pub mod script;
pub mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ActionModule, AttrValue, Feedback, FeedbackDraft, FeedbackPayload, Finding, FindingsTable, KnowledgeBase,
    ModuleKind, ModuleResult, ModuleStatus, Presentation, Subgoal, SubgoalId, Suggestion, SuggestionDraft,
    SuggestionId, SuggestionKind, TableRow, DERIVED_FROM,
};
use crate::projection::{Phase, SessionState};

pub use script::{ScenarioScript, ScriptError};
pub use scripted::ScriptedPlanner;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("model backend failure: {0}")]
    BackendFailure(String),
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    /// The planner could not form a module; `question` goes back to the user.
    #[error("planner refused: {question}")]
    PlannerRefusal { question: String },
}

/// Input to module generation.
#[derive(Debug, Clone, Serialize)]
pub struct PlannerRequest<'a> {
    pub goal: &'a str,
    pub subgoal: &'a Subgoal,
    /// Visible context, shadowing applied.
    pub context: Vec<(String, String)>,
    pub kb: &'a KnowledgeBase,
    pub last_module: Option<&'a ActionModule>,
    pub last_result: Option<&'a ModuleResult>,
    pub feedback: &'a Feedback,
    /// The suggestion the feedback accepted, if any.
    pub accepted: Option<&'a Suggestion>,
    pub loop_index: u32,
}

impl PlannerRequest<'_> {
    /// The text the user effectively asked for: an explicit directive, else
    /// the accepted suggestion's text, else empty ("proceed").
    pub fn feedback_text(&self) -> String {
        match &self.feedback.payload {
            FeedbackPayload::Decision { directive: Some(d), .. } if !d.trim().is_empty() => d.clone(),
            _ => self.accepted.map(|s| s.text.clone()).unwrap_or_default(),
        }
    }

    pub fn requested_kind(&self) -> Option<ModuleKind> {
        match &self.feedback.payload {
            FeedbackPayload::Decision { module_kind, .. } => *module_kind,
            _ => None,
        }
    }
}

/// Kind, directive and the context keys it relies on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDraft {
    pub kind: ModuleKind,
    pub directive: String,
    #[serde(default)]
    pub context_keys: Vec<String>,
}

/// Input to next-step proposals.
#[derive(Debug, Clone, Serialize)]
pub struct ProposalRequest<'a> {
    pub goal: &'a str,
    pub subgoal: &'a Subgoal,
    pub context: Vec<(String, String)>,
    pub kb: &'a KnowledgeBase,
    pub last_module: &'a ActionModule,
    pub last_result: &'a ModuleResult,
    pub loop_index: u32,
    /// Every module of this subgoal so far, oldest first.
    pub history: Vec<&'a ActionModule>,
}

/// Interpretation of free-text feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextClass {
    pub payload: FeedbackPayload,
}

pub trait ModelBackend: Send + Sync {
    fn decompose_goal(&self, goal: &str, kb: &KnowledgeBase) -> Result<Vec<String>, ModelError>;

    fn initial_questions(&self, subgoal: &Subgoal, kb: &KnowledgeBase) -> Result<Vec<SuggestionDraft>, ModelError>;

    fn generate_module(&self, req: &PlannerRequest<'_>) -> Result<ModuleDraft, ModelError>;

    /// Never fails; degrades to the raw narrative.
    fn summarize(&self, module: &ActionModule, result: &ModuleResult, kb: &KnowledgeBase) -> Presentation;

    fn propose_next(&self, req: &ProposalRequest<'_>) -> Result<Vec<SuggestionDraft>, ModelError>;

    fn classify_text(&self, text: &str, phase: &Phase) -> Result<TextClass, ModelError>;
}

/// Columns: `item`, then attribute keys in first-seen order.
pub fn findings_table(findings: &[&Finding]) -> FindingsTable {
    let mut columns: Vec<String> = vec!["item".to_string()];
    for f in findings {
        for k in f.attributes.keys() {
            if k != DERIVED_FROM && k != "confirmation" && !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let rows = findings
        .iter()
        .map(|f| TableRow {
            finding_id: f.id,
            cells: columns
                .iter()
                .map(|c| {
                    if c == "item" {
                        f.entity.clone()
                    } else {
                        f.attributes.get(c).map(AttrValue::to_string).unwrap_or_default()
                    }
                })
                .collect(),
        })
        .collect();
    FindingsTable { columns, rows }
}

/// Narrative plus a table of the module's findings. Error notes are
/// quoted verbatim.
pub fn default_presentation(module: &ActionModule, result: &ModuleResult, kb: &KnowledgeBase) -> Presentation {
    let findings: Vec<&Finding> = result.finding_ids.iter().filter_map(|id| kb.finding(*id)).collect();
    let mut narrative = match result.status {
        ModuleStatus::Failed => format!("The step \"{}\" failed.", module.directive),
        _ if findings.is_empty() => format!("No items were found for \"{}\".", module.directive),
        ModuleStatus::PartialSuccess => {
            format!("Partial results for \"{}\": {} item(s).", module.directive, findings.len())
        }
        _ => format!("Results for \"{}\": {} item(s).", module.directive, findings.len()),
    };
    for f in &findings {
        if let Some(AttrValue::Text(msg)) = f.attributes.get("message") {
            narrative.push(' ');
            narrative.push_str(msg);
        }
    }
    for note in &result.error_notes {
        narrative.push_str("\nNote: ");
        narrative.push_str(note);
    }
    Presentation {
        narrative,
        table: if findings.is_empty() { None } else { Some(findings_table(&findings)) },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawKind {
    Context,
    Decision,
    Terminate,
}

/// Feedback as it arrives from a client: structured fields where the user
/// clicked something, free text otherwise.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFeedback {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RawKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_suggestion_id: Option<SuggestionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_kind: Option<ModuleKind>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgoal_id: Option<SubgoalId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub goal_wide: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("feedback is empty")]
    Empty,
    #[error("unknown suggestion {0}")]
    UnknownSuggestion(SuggestionId),
    #[error("cannot answer a {0:?} with text")]
    Mismatch(SuggestionKind),
    #[error(transparent)]
    Model(ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classified {
    pub draft: FeedbackDraft,
    /// Non-fatal problems, e.g. a remote classifier fallback.
    pub warnings: Vec<String>,
}

/// Turn raw client feedback into exactly one kind. Structured inputs bypass
/// the backend; free text goes to [`ModelBackend::classify_text`].
pub fn classify_feedback(
    model: &dyn ModelBackend,
    raw: &RawFeedback,
    state: &SessionState,
) -> Result<Classified, ClassifyError> {
    let text = raw.text.as_deref().map(str::trim).filter(|t| !t.is_empty());
    let accepted = match raw.accepted_suggestion_id {
        Some(id) => Some(state.suggestion(id).ok_or(ClassifyError::UnknownSuggestion(id))?),
        None => None,
    };
    let mut warnings = Vec::new();
    let context_items = |extra: Option<(String, String)>| {
        let mut items: Vec<crate::domain::ContextDraft> = raw
            .context
            .iter()
            .map(|(k, v)| crate::domain::ContextDraft { key: k.clone(), value: v.clone(), goal_wide: raw.goal_wide })
            .collect();
        if let Some((k, v)) = extra {
            items.push(crate::domain::ContextDraft { key: k, value: v, goal_wide: raw.goal_wide });
        }
        FeedbackPayload::ContextInjection { items }
    };
    let decision = |directive: Option<&str>| FeedbackPayload::Decision {
        directive: directive.map(str::to_owned),
        module_kind: raw.module_kind,
    };

    let payload = match (raw.kind, accepted) {
        (Some(RawKind::Terminate), _) => FeedbackPayload::Terminate { reason: text.map(str::to_owned) },
        (_, Some(s)) if s.kind == SuggestionKind::TerminationOffer => {
            FeedbackPayload::Terminate { reason: text.map(str::to_owned) }
        }
        (Some(RawKind::Context), Some(s)) | (None, Some(s)) if s.kind == SuggestionKind::Question && text.is_some() => {
            let key = s.context_key.clone().unwrap_or_else(|| format!("answer_{}", s.id.0));
            context_items(Some((key, text.unwrap().to_string())))
        }
        (Some(RawKind::Context), _) => {
            if let Some(t) = text {
                match parse_context_statement(t) {
                    Some(kv) => context_items(Some(kv)),
                    None => context_items(Some(("note".to_string(), t.to_string()))),
                }
            } else if raw.context.is_empty() {
                return Err(ClassifyError::Empty);
            } else {
                context_items(None)
            }
        }
        (Some(RawKind::Decision), _) => decision(text),
        (None, Some(s)) => match s.kind {
            SuggestionKind::ProposedModule | SuggestionKind::Question => decision(text),
            SuggestionKind::TerminationOffer => unreachable!("handled above"),
        },
        (None, None) if !raw.context.is_empty() => context_items(None),
        (None, None) => {
            let Some(t) = text else { return Err(ClassifyError::Empty) };
            match model.classify_text(t, &state.phase) {
                Ok(c) => match c.payload {
                    FeedbackPayload::Decision { directive, module_kind } => FeedbackPayload::Decision {
                        directive,
                        module_kind: raw.module_kind.or(module_kind),
                    },
                    FeedbackPayload::ContextInjection { mut items } => {
                        for i in &mut items {
                            i.goal_wide |= raw.goal_wide;
                        }
                        FeedbackPayload::ContextInjection { items }
                    }
                    other => other,
                },
                Err(ModelError::MalformedResponse(m)) => {
                    warnings.push(format!("classifier returned malformed output ({m}); treating text as a directive"));
                    decision(Some(t))
                }
                Err(e) => return Err(ClassifyError::Model(e)),
            }
        }
    };
    Ok(Classified {
        draft: FeedbackDraft { subgoal_id: raw.subgoal_id, in_reply_to: raw.accepted_suggestion_id, payload },
        warnings,
    })
}

/// "The budget is $10" → ("budget", "$10").
pub fn parse_context_statement(text: &str) -> Option<(String, String)> {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?i)^\s*(?:the|my|our)\s+([a-z][a-z \-]{0,40}?)\s+(?:is|are|should be)\s+(.+?)\s*\.?\s*$")
            .expect("valid regex")
    });
    let caps = re.captures(text)?;
    let key = caps[1].trim().to_lowercase().replace([' ', '-'], "_");
    Some((key, caps[2].trim().to_string()))
}
