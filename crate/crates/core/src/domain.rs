//! Domain vocabulary: the goal hierarchy, the decision-phase currency
//! (feedback, suggestions, context) and the knowledge base that carries
//! findings across subgoals.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(GoalId, "goal-");
id_type!(
    /// Equal to the subgoal's ordinal.
    SubgoalId,
    "subgoal-"
);
id_type!(ModuleId, "module-");
id_type!(
    /// Results share the numeric id of the module that produced them.
    ResultId,
    "result-"
);
id_type!(FeedbackId, "feedback-");
id_type!(SuggestionId, "suggestion-");
id_type!(FindingId, "finding-");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalStatus {
    Created,
    Decomposed,
    InProgress,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: GoalId,
    pub text: String,
    pub status: GoalStatus,
    pub subgoal_ids: Vec<SubgoalId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgoalStatus {
    Pending,
    ContextGathering,
    Active,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgoal {
    pub id: SubgoalId,
    pub goal_id: GoalId,
    pub ordinal: u32,
    pub purpose: String,
    pub status: SubgoalStatus,
    /// Completed action phases.
    pub loop_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Exploration,
    Exploitation,
}

impl ModuleKind {
    pub fn short(self) -> &'static str {
        match self {
            ModuleKind::Exploration => "E",
            ModuleKind::Exploitation => "X",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleStatus {
    Generated,
    Executing,
    Completed,
    Failed,
    PartialSuccess,
}

impl ModuleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ModuleStatus::Completed | ModuleStatus::Failed | ModuleStatus::PartialSuccess
        )
    }
}

/// What a module was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Feedback(FeedbackId),
    Suggestion(SuggestionId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionModule {
    pub id: ModuleId,
    pub subgoal_id: SubgoalId,
    pub loop_index: u32,
    pub kind: ModuleKind,
    pub directive: String,
    /// Context keys the directive was built from.
    #[serde(default)]
    pub context_keys: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub status: ModuleStatus,
    pub result_id: Option<ResultId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verb {
    Navigate,
    Search,
    ClickLink,
    ExtractFact,
    FillForm,
    SubmitForm,
    Compare,
    Rank,
    Filter,
    Summarize,
    DraftDocument,
}

impl Verb {
    /// The module kind whose verb set contains this verb.
    pub fn kind(self) -> ModuleKind {
        match self {
            Verb::Navigate
            | Verb::Search
            | Verb::ClickLink
            | Verb::ExtractFact
            | Verb::FillForm
            | Verb::SubmitForm => ModuleKind::Exploration,
            Verb::Compare | Verb::Rank | Verb::Filter | Verb::Summarize | Verb::DraftDocument => {
                ModuleKind::Exploitation
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub ordinal: u32,
    pub verb: Verb,
    /// Page id, URL, or finding-set selector.
    pub target: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

/// An amount in minor currency units (cents for USD).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Money {
    pub minor: i64,
    pub currency: String,
}

impl Money {
    pub fn new(minor: i64, currency: impl Into<String>) -> Self {
        Money { minor, currency: currency.into() }
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.minor < 0 { "-" } else { "" };
        let abs = self.minor.unsigned_abs();
        let symbol = match self.currency.as_str() {
            "USD" => "$",
            "EUR" => "€",
            "GBP" => "£",
            _ => "",
        };
        if symbol.is_empty() {
            write!(f, "{sign}{}.{:02} {}", abs / 100, abs % 100, self.currency)
        } else {
            write!(f, "{sign}{symbol}{}.{:02}", abs / 100, abs % 100)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    pub fn new(value: f64, unit: impl Into<String>) -> Self {
        Quantity { value, unit: unit.into() }
    }

    /// Volume in millilitres, for the units in the fixed table (ml, L).
    pub fn milliliters(&self) -> Option<f64> {
        match self.unit.as_str() {
            "ml" | "mL" => Some(self.value),
            "L" | "l" => Some(self.value * 1000.0),
            _ => None,
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.value.fract() == 0.0 {
            write!(f, "{} {}", self.value as i64, self.unit)
        } else {
            write!(f, "{} {}", self.value, self.unit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrValue {
    Text(String),
    Money(Money),
    Quantity(Quantity),
    Bool(bool),
    /// Only used under [`DERIVED_FROM`].
    Refs(Vec<FindingId>),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Text(t) => f.write_str(t),
            AttrValue::Money(m) => m.fmt(f),
            AttrValue::Quantity(q) => q.fmt(f),
            AttrValue::Bool(b) => f.write_str(if *b { "yes" } else { "no" }),
            AttrValue::Refs(ids) => {
                let parts: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(", "))
            }
        }
    }
}

/// Reserved attribute key linking a derived finding to its inputs.
pub const DERIVED_FROM: &str = "derived_from";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub id: FindingId,
    pub entity: String,
    pub attributes: BTreeMap<String, AttrValue>,
    pub source_page: Option<String>,
    pub module_id: ModuleId,
    pub subgoal_id: SubgoalId,
}

impl Finding {
    pub fn derived_from(&self) -> &[FindingId] {
        match self.attributes.get(DERIVED_FROM) {
            Some(AttrValue::Refs(ids)) => ids,
            _ => &[],
        }
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.attributes.get(key) {
            Some(AttrValue::Text(t)) => Some(t),
            _ => None,
        }
    }
}

/// A finding produced by the agent before the orchestrator assigns it an id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingDraft {
    pub entity: String,
    pub attributes: BTreeMap<String, AttrValue>,
    pub source_page: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScope {
    Goal,
    Subgoal(SubgoalId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub key: String,
    pub value: String,
    pub scope: ContextScope,
    pub source_feedback_id: FeedbackId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDraft {
    pub key: String,
    pub value: String,
    /// Defaults to the current subgoal.
    #[serde(default)]
    pub goal_wide: bool,
}

/// Append-only store of findings and injected context for one goal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "KbWire", into = "KbWire")]
pub struct KnowledgeBase {
    findings: Vec<Finding>,
    context: Vec<ContextItem>,
    by_subgoal: BTreeMap<SubgoalId, Vec<usize>>,
    by_entity: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct KbWire {
    findings: Vec<Finding>,
    context: Vec<ContextItem>,
}

impl From<KbWire> for KnowledgeBase {
    fn from(w: KbWire) -> Self {
        let mut kb = KnowledgeBase { findings: w.findings, context: w.context, ..Default::default() };
        kb.rebuild_indexes();
        kb
    }
}

impl From<KnowledgeBase> for KbWire {
    fn from(kb: KnowledgeBase) -> Self {
        KbWire { findings: kb.findings, context: kb.context }
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_finding(&mut self, finding: Finding) {
        let idx = self.findings.len();
        self.by_subgoal.entry(finding.subgoal_id).or_default().push(idx);
        self.by_entity.entry(finding.entity.clone()).or_default().push(idx);
        self.findings.push(finding);
    }

    pub fn push_context(&mut self, item: ContextItem) {
        self.context.push(item);
    }

    pub fn findings(&self) -> &[Finding] {
        &self.findings
    }

    pub fn context(&self) -> &[ContextItem] {
        &self.context
    }

    pub fn finding(&self, id: FindingId) -> Option<&Finding> {
        // ids are dense and assigned in append order
        self.findings
            .get(id.0 as usize)
            .filter(|f| f.id == id)
            .or_else(|| self.findings.iter().find(|f| f.id == id))
    }

    pub fn contains(&self, id: FindingId) -> bool {
        self.finding(id).is_some()
    }

    pub fn by_subgoal(&self, subgoal: SubgoalId) -> impl Iterator<Item = &Finding> {
        self.by_subgoal
            .get(&subgoal)
            .into_iter()
            .flatten()
            .map(|&i| &self.findings[i])
    }

    pub fn by_entity(&self, entity: &str) -> impl Iterator<Item = &Finding> {
        self.by_entity
            .get(entity)
            .into_iter()
            .flatten()
            .map(|&i| &self.findings[i])
    }

    /// Context visible while planning for `subgoal`, with later items
    /// shadowing earlier ones of the same key. Order follows first appearance.
    pub fn visible_context(&self, subgoal: SubgoalId) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for item in &self.context {
            let visible = match &item.scope {
                ContextScope::Goal => true,
                ContextScope::Subgoal(s) => *s == subgoal,
            };
            if !visible {
                continue;
            }
            match out.iter_mut().find(|(k, _)| *k == item.key) {
                Some(slot) => slot.1 = item.value.clone(),
                None => out.push((item.key.clone(), item.value.clone())),
            }
        }
        out
    }

    fn rebuild_indexes(&mut self) {
        self.by_subgoal.clear();
        self.by_entity.clear();
        for (idx, f) in self.findings.iter().enumerate() {
            self.by_subgoal.entry(f.subgoal_id).or_default().push(idx);
            self.by_entity.entry(f.entity.clone()).or_default().push(idx);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuggestionKind {
    Question,
    ProposedModule,
    TerminationOffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSketch {
    pub kind: ModuleKind,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: SuggestionId,
    pub subgoal_id: SubgoalId,
    pub loop_index: u32,
    pub kind: SuggestionKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_module: Option<ModuleSketch>,
    /// For questions: the context key an answer fills.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_key: Option<String>,
}

/// A suggestion as produced by a backend, before ids are assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionDraft {
    pub kind: SuggestionKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_module: Option<ModuleSketch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_key: Option<String>,
}

impl SuggestionDraft {
    pub fn question(text: impl Into<String>, context_key: Option<&str>) -> Self {
        SuggestionDraft {
            kind: SuggestionKind::Question,
            text: text.into(),
            proposed_module: None,
            context_key: context_key.map(str::to_owned),
        }
    }

    pub fn proposal(text: impl Into<String>, kind: ModuleKind, directive: impl Into<String>) -> Self {
        SuggestionDraft {
            kind: SuggestionKind::ProposedModule,
            text: text.into(),
            proposed_module: Some(ModuleSketch { kind, directive: directive.into() }),
            context_key: None,
        }
    }

    pub fn termination(text: impl Into<String>) -> Self {
        SuggestionDraft {
            kind: SuggestionKind::TerminationOffer,
            text: text.into(),
            proposed_module: None,
            context_key: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackKind {
    ContextInjection,
    Decision,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackPayload {
    ContextInjection {
        items: Vec<ContextDraft>,
    },
    /// Either an accepted suggestion (see [`Feedback::in_reply_to`]) or a
    /// free-text directive. Both empty means "proceed with what you have".
    Decision {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        directive: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        module_kind: Option<ModuleKind>,
    },
    Terminate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl FeedbackPayload {
    pub fn kind(&self) -> FeedbackKind {
        match self {
            FeedbackPayload::ContextInjection { .. } => FeedbackKind::ContextInjection,
            FeedbackPayload::Decision { .. } => FeedbackKind::Decision,
            FeedbackPayload::Terminate { .. } => FeedbackKind::Terminate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub id: FeedbackId,
    pub subgoal_id: SubgoalId,
    pub loop_index: u32,
    /// The suggestion this feedback accepts or answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<SuggestionId>,
    pub payload: FeedbackPayload,
}

impl Feedback {
    pub fn kind(&self) -> FeedbackKind {
        self.payload.kind()
    }
}

/// Classified feedback not yet bound to an id or loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackDraft {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgoal_id: Option<SubgoalId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<SuggestionId>,
    pub payload: FeedbackPayload,
}

impl FeedbackDraft {
    pub fn context(items: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>) -> Self {
        FeedbackDraft {
            subgoal_id: None,
            in_reply_to: None,
            payload: FeedbackPayload::ContextInjection {
                items: items
                    .into_iter()
                    .map(|(k, v)| ContextDraft { key: k.into(), value: v.into(), goal_wide: false })
                    .collect(),
            },
        }
    }

    pub fn decision(directive: impl Into<String>) -> Self {
        FeedbackDraft {
            subgoal_id: None,
            in_reply_to: None,
            payload: FeedbackPayload::Decision { directive: Some(directive.into()), module_kind: None },
        }
    }

    pub fn proceed() -> Self {
        FeedbackDraft {
            subgoal_id: None,
            in_reply_to: None,
            payload: FeedbackPayload::Decision { directive: None, module_kind: None },
        }
    }

    pub fn accept(suggestion: SuggestionId) -> Self {
        FeedbackDraft {
            subgoal_id: None,
            in_reply_to: Some(suggestion),
            payload: FeedbackPayload::Decision { directive: None, module_kind: None },
        }
    }

    pub fn terminate(reason: Option<&str>) -> Self {
        FeedbackDraft {
            subgoal_id: None,
            in_reply_to: None,
            payload: FeedbackPayload::Terminate { reason: reason.map(str::to_owned) },
        }
    }

    pub fn with_kind(mut self, kind: ModuleKind) -> Self {
        if let FeedbackPayload::Decision { module_kind, .. } = &mut self.payload {
            *module_kind = Some(kind);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub actions_executed: u32,
    pub pages_visited: u32,
    pub simulated_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleResult {
    pub module_id: ModuleId,
    pub status: ModuleStatus,
    pub finding_ids: Vec<FindingId>,
    pub narrative: String,
    pub cost: Cost,
    #[serde(default)]
    pub error_notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub finding_id: FindingId,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FindingsTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl FindingsTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What the user sees at the start of a decision phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub narrative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<FindingsTable>,
}
