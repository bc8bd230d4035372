//! Scenario scripts for the deterministic planner.
//!
//! A script is an ordered list of `rule` records, one JSON object per line,
//! sharing a file with other record types (which are ignored here):
//!
//! ```text
//! {"record":"rule","op":"decompose","match":{"pattern":"Buy milk for me"},"subgoals":["Buying milk"]}
//! {"record":"rule","op":"questions","match":{"subgoal":0},"questions":[{"text":"Which store?","context_key":"stores"}]}
//! {"record":"rule","op":"module","match":{"subgoal":0,"loop":0},"module":{"kind":"Exploration","directive":"Search ... on {context:store}"}}
//! {"record":"rule","op":"module","match":{"regex":"(?i)^compare"},"refuse":"Which products should I compare?"}
//! {"record":"rule","op":"suggestions","match":{"loop":1},"suggestions":[{"kind":"TerminationOffer","text":"Shall I end the task?"}]}
//! {"record":"rule","op":"summary","summary":"{narrative}"}
//! ```
//!
//! `match` fields are all optional: `subgoal` (ordinal), `loop` (the 0-based
//! loop index of the subgoal when the rule fires), `pattern`
//! (exact after whitespace normalisation) and `regex`. The text matched is
//! the goal (decompose), the subgoal purpose (questions), the feedback text
//! (module), or the last module's directive (suggestions, summary). The
//! first matching rule answers. Every op needs a catch-all rule with an
//! empty `match`.
//!
//! Templates substitute `{goal}`, `{purpose}`, `{feedback}`, `{narrative}`,
//! `{count}`, `{directive}` and `{context:KEY}`; `{a|b}` takes the first
//! non-empty alternative.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ModuleKind, SuggestionKind};
use crate::text::normalize_ws;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOp {
    Decompose,
    Questions,
    Module,
    Suggestions,
    Summary,
}

const ALL_OPS: [RuleOp; 5] = [RuleOp::Decompose, RuleOp::Questions, RuleOp::Module, RuleOp::Suggestions, RuleOp::Summary];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgoal: Option<u32>,
    #[serde(default, rename = "loop", skip_serializing_if = "Option::is_none")]
    pub loop_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
}

impl RuleMatch {
    pub fn is_catch_all(&self) -> bool {
        *self == RuleMatch::default()
    }
}

/// `auto` defers to the feedback's explicit kind, then to the directive's verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KindSpec {
    #[serde(rename = "auto")]
    Auto,
    Exploration,
    Exploitation,
}

impl KindSpec {
    pub fn fixed(self) -> Option<ModuleKind> {
        match self {
            KindSpec::Auto => None,
            KindSpec::Exploration => Some(ModuleKind::Exploration),
            KindSpec::Exploitation => Some(ModuleKind::Exploitation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub kind: KindSpec,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionSpec {
    pub kind: SuggestionKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<ModuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleResponse {
    Subgoals(Vec<String>),
    Questions(Vec<QuestionSpec>),
    Module(ModuleSpec),
    Refuse(String),
    Suggestions(Vec<SuggestionSpec>),
    Summary(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub op: RuleOp,
    #[serde(default, rename = "match", skip_serializing_if = "RuleMatch::is_catch_all")]
    pub when: RuleMatch,
    #[serde(flatten)]
    pub then: RuleResponse,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub record: RuleRecord,
    regex: Option<Regex>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("rule {index}: {op:?} rules cannot answer with {response}")]
    WrongResponse { index: usize, op: RuleOp, response: &'static str },
    #[error("rule {index}: invalid regex: {source}")]
    BadRegex { index: usize, source: regex::Error },
    #[error("rule {index}: more than 5 suggestions")]
    TooManySuggestions { index: usize },
    #[error("rule {index}: a proposed-module suggestion needs a module")]
    MissingProposal { index: usize },
    #[error("no catch-all rule for op {0:?}")]
    MissingCatchAll(RuleOp),
    #[error("template '{template}': unclosed placeholder")]
    BadTemplate { template: String },
}

/// Facts a rule is matched against.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub op: RuleOp,
    pub subgoal: Option<u32>,
    pub loop_index: Option<u32>,
    pub text: &'a str,
}

#[derive(Debug, Clone)]
pub struct ScenarioScript {
    rules: Vec<Rule>,
}

impl ScenarioScript {
    /// Read the `rule` records of a scenario file.
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| ScriptError::Parse { line: i + 1, message: e.to_string() })?;
            if value.get("record").and_then(|r| r.as_str()) != Some("rule") {
                continue;
            }
            let rec: RuleRecord = serde_json::from_value(value)
                .map_err(|e| ScriptError::Parse { line: i + 1, message: e.to_string() })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn from_records(records: Vec<RuleRecord>) -> Result<Self, ScriptError> {
        let mut rules = Vec::with_capacity(records.len());
        for (index, record) in records.into_iter().enumerate() {
            let response = match &record.then {
                RuleResponse::Subgoals(_) => "subgoals",
                RuleResponse::Questions(_) => "questions",
                RuleResponse::Module(_) => "module",
                RuleResponse::Refuse(_) => "refuse",
                RuleResponse::Suggestions(_) => "suggestions",
                RuleResponse::Summary(_) => "summary",
            };
            let ok = matches!(
                (record.op, &record.then),
                (RuleOp::Decompose, RuleResponse::Subgoals(_))
                    | (RuleOp::Questions, RuleResponse::Questions(_))
                    | (RuleOp::Module, RuleResponse::Module(_) | RuleResponse::Refuse(_))
                    | (RuleOp::Suggestions, RuleResponse::Suggestions(_))
                    | (RuleOp::Summary, RuleResponse::Summary(_))
            );
            if !ok {
                return Err(ScriptError::WrongResponse { index, op: record.op, response });
            }
            if let RuleResponse::Suggestions(s) = &record.then {
                if s.len() > crate::projection::MAX_SUGGESTIONS {
                    return Err(ScriptError::TooManySuggestions { index });
                }
                if s.iter().any(|s| (s.kind == SuggestionKind::ProposedModule) != s.module.is_some()) {
                    return Err(ScriptError::MissingProposal { index });
                }
            }
            let regex = match &record.when.regex {
                Some(r) => Some(Regex::new(r).map_err(|source| ScriptError::BadRegex { index, source })?),
                None => None,
            };
            rules.push(Rule { record, regex });
        }
        for op in ALL_OPS {
            if !rules.iter().any(|r| r.record.op == op && r.record.when.is_catch_all()) {
                return Err(ScriptError::MissingCatchAll(op));
            }
        }
        Ok(ScenarioScript { rules })
    }

    /// A script made only of catch-alls: identity decomposition, no
    /// questions, the feedback (or purpose) as directive, a termination
    /// offer after every module.
    pub fn defaults() -> Self {
        Self::from_records(default_records()).expect("default rules are valid")
    }

    /// Append catch-alls for any op that lacks one.
    pub fn with_defaults(mut records: Vec<RuleRecord>) -> Result<Self, ScriptError> {
        for d in default_records() {
            if !records.iter().any(|r| r.op == d.op && r.when.is_catch_all()) {
                records.push(d);
            }
        }
        Self::from_records(records)
    }

    pub fn records(&self) -> impl Iterator<Item = &RuleRecord> {
        self.rules.iter().map(|r| &r.record)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            let mut v = serde_json::to_value(r).expect("rules serialize");
            v.as_object_mut()
                .expect("rule is an object")
                .insert("record".into(), serde_json::Value::String("rule".into()));
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    /// First rule matching the probe. Always succeeds for a valid script.
    pub fn lookup(&self, probe: Probe<'_>) -> &RuleRecord {
        let normalized = normalize_ws(probe.text);
        self.rules
            .iter()
            .find(|rule| {
                let w = &rule.record.when;
                rule.record.op == probe.op
                    && w.subgoal.is_none_or(|s| Some(s) == probe.subgoal)
                    && w.loop_index.is_none_or(|l| Some(l) == probe.loop_index)
                    && w.pattern.as_ref().is_none_or(|p| normalize_ws(p) == normalized)
                    && rule.regex.as_ref().is_none_or(|re| re.is_match(&normalized))
            })
            .map(|r| &r.record)
            .expect("validated scripts have a catch-all per op")
    }
}

fn default_records() -> Vec<RuleRecord> {
    vec![
        RuleRecord { op: RuleOp::Decompose, when: RuleMatch::default(), then: RuleResponse::Subgoals(vec!["{goal}".into()]) },
        RuleRecord { op: RuleOp::Questions, when: RuleMatch::default(), then: RuleResponse::Questions(vec![]) },
        RuleRecord {
            op: RuleOp::Module,
            when: RuleMatch::default(),
            then: RuleResponse::Module(ModuleSpec { kind: KindSpec::Auto, directive: "{feedback|purpose}".into() }),
        },
        RuleRecord {
            op: RuleOp::Suggestions,
            when: RuleMatch::default(),
            then: RuleResponse::Suggestions(vec![SuggestionSpec {
                kind: SuggestionKind::TerminationOffer,
                text: "Shall I conclude this task?".into(),
                module: None,
            }]),
        },
        RuleRecord { op: RuleOp::Summary, when: RuleMatch::default(), then: RuleResponse::Summary("{narrative}".into()) },
    ]
}

/// Values available to templates.
#[derive(Debug, Clone, Default)]
pub struct Vars<'a> {
    pub goal: &'a str,
    pub purpose: &'a str,
    pub feedback: &'a str,
    pub narrative: &'a str,
    pub directive: &'a str,
    pub count: usize,
    pub context: &'a [(String, String)],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filled {
    pub text: String,
    pub context_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("missing context '{0}'")]
    MissingContext(String),
    #[error("unclosed placeholder in '{0}'")]
    Unclosed(String),
}

pub fn fill(template: &str, vars: &Vars<'_>) -> Result<Filled, TemplateError> {
    let mut out = String::new();
    let mut keys = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or_else(|| TemplateError::Unclosed(template.to_string()))?;
        let mut missing = None;
        let mut value = String::new();
        for alt in after[..end].split('|') {
            let alt = alt.trim();
            let v = if let Some(key) = alt.strip_prefix("context:") {
                match vars.context.iter().rev().find(|(k, _)| k == key) {
                    Some((_, v)) => {
                        if !keys.iter().any(|k| k == key) {
                            keys.push(key.to_string());
                        }
                        v.clone()
                    }
                    None => {
                        missing.get_or_insert_with(|| key.to_string());
                        String::new()
                    }
                }
            } else {
                match alt {
                    "goal" => vars.goal.to_string(),
                    "purpose" => vars.purpose.to_string(),
                    "feedback" => vars.feedback.to_string(),
                    "narrative" => vars.narrative.to_string(),
                    "directive" => vars.directive.to_string(),
                    "count" => vars.count.to_string(),
                    other => other.to_string(),
                }
            };
            if !v.trim().is_empty() {
                value = v;
                break;
            }
        }
        if value.is_empty() {
            if let Some(key) = missing {
                return Err(TemplateError::MissingContext(key));
            }
        }
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(Filled { text: out, context_keys: keys })
}
