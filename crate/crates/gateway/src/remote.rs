//! Planner backed by a chat-completion style HTTP endpoint.
//!
//! Each operation sends a system prompt naming the JSON shape to return
//! and the serialized request as the user message, at temperature 0, then
//! validates the single JSON object that comes back. Transport errors and
//! invalid replies are retried; once retries run out the last failure is
//! reported (transport as `BackendFailure`, bad content as
//! `MalformedResponse`).
//!
//! The API key is read from the configured environment variable for each
//! request and only ever placed in the `Authorization` header.

use std::sync::OnceLock;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wayfinder_core::domain::{
    ActionModule, ContextDraft, FeedbackPayload, KnowledgeBase, ModuleKind, ModuleResult, ModuleSketch, Presentation,
    Subgoal, SuggestionDraft, SuggestionKind,
};
use wayfinder_core::planner::{
    default_presentation, findings_table, ModelError, ModuleDraft, PlannerRequest, ProposalRequest, TextClass,
};
use wayfinder_core::projection::Phase;
use wayfinder_core::ModelBackend;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemotePlannerConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

pub struct RemotePlanner {
    cfg: RemotePlannerConfig,
    // built on first use so construction is safe inside an async runtime
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl std::fmt::Debug for RemotePlanner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePlanner").field("endpoint", &self.cfg.endpoint).field("model", &self.cfg.model).finish()
    }
}

enum Failure {
    Transport(String),
    Content(String),
}

const DECOMPOSE: &str = r#"Split the user's goal into one or more ordered subgoals. Reply with {"subgoals": [string, ...]} (at least one, non-empty)."#;
const QUESTIONS: &str = r#"Ask the clarifying questions needed before browsing for this subgoal; skip anything already in the context. Reply with {"questions": [{"text": string, "context_key": string|null}]} (possibly empty)."#;
const MODULE: &str = r#"Write the next action module for the browsing agent. Exploration modules visit web pages; Exploitation modules only work on findings already collected. If feedback.payload.module_kind is set you must use it. Reply with {"kind": "Exploration"|"Exploitation", "directive": string, "context_keys": [string]} or, if you cannot, {"refuse": string} holding one clarifying question."#;
const SUMMARY: &str = r#"Summarize the module result for the user in a few sentences. Reply with {"narrative": string}."#;
const PROPOSE: &str = r#"Propose 1 to 5 next steps for this subgoal. Include a TerminationOffer when the subgoal purpose appears satisfied; never end it yourself. Reply with {"suggestions": [{"kind": "ProposedModule"|"Question"|"TerminationOffer", "text": string, "module_kind": "Exploration"|"Exploitation"|null, "directive": string|null, "context_key": string|null}]}."#;
const CLASSIFY: &str = r#"Classify the user's free-text feedback. Reply with exactly one of {"kind": "context", "items": [{"key": string, "value": string}]}, {"kind": "decision", "directive": string, "module_kind": "Exploration"|"Exploitation"|null} or {"kind": "terminate", "reason": string|null}."#;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Subgoals {
    subgoals: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Questions {
    questions: Vec<QuestionOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionOut {
    text: String,
    #[serde(default)]
    context_key: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModuleOut {
    Refuse {
        refuse: String,
    },
    Module {
        kind: ModuleKind,
        directive: String,
        #[serde(default)]
        context_keys: Vec<String>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Summary {
    narrative: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Proposals {
    suggestions: Vec<ProposalOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalOut {
    kind: SuggestionKind,
    text: String,
    #[serde(default)]
    module_kind: Option<ModuleKind>,
    #[serde(default)]
    directive: Option<String>,
    #[serde(default)]
    context_key: Option<String>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum ClassOut {
    Context { items: Vec<ItemOut> },
    Decision {
        directive: String,
        #[serde(default)]
        module_kind: Option<ModuleKind>,
    },
    Terminate {
        #[serde(default)]
        reason: Option<String>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemOut {
    key: String,
    value: String,
}

fn non_empty(s: &str, what: &str) -> Result<(), String> {
    if s.trim().is_empty() {
        Err(format!("{what} is empty"))
    } else {
        Ok(())
    }
}

/// The JSON object inside a reply, tolerating a surrounding code fence.
fn reply_object(content: &str) -> Result<Value, String> {
    let t = content.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    let t = t.strip_suffix("```").unwrap_or(t).trim();
    let v: Value = serde_json::from_str(t).map_err(|e| format!("reply is not JSON: {e}"))?;
    if !v.is_object() {
        return Err("reply is not a JSON object".into());
    }
    Ok(v)
}

impl RemotePlanner {
    pub fn new(cfg: RemotePlannerConfig) -> Self {
        RemotePlanner { cfg, client: OnceLock::new() }
    }

    pub fn config(&self) -> &RemotePlannerConfig {
        &self.cfg
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, String> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder().timeout(self.cfg.timeout).build().map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn post(&self, system: &str, input: &Value) -> Result<Value, Failure> {
        let client = self.client().map_err(Failure::Transport)?;
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": input.to_string()},
            ],
        });
        let mut req = client.post(&self.cfg.endpoint).json(&body);
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Failure::Transport(format!("planner endpoint answered {status}")));
        }
        let envelope: Value = resp.json().map_err(|e| Failure::Content(format!("undecodable body: {e}")))?;
        let content = envelope
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Failure::Content("no choices[0].message.content".into()))?;
        reply_object(content).map_err(Failure::Content)
    }

    /// Ask, decode into `T`, validate; retry on any failure.
    fn ask<T: DeserializeOwned, R>(
        &self,
        op: &'static str,
        system: &str,
        input: Value,
        validate: impl Fn(T) -> Result<R, String>,
    ) -> Result<R, ModelError> {
        let mut last = Failure::Transport("no attempt made".into());
        for attempt in 0..=self.cfg.max_retries {
            let outcome = self.post(system, &input).and_then(|v| {
                let t: T = serde_json::from_value(v).map_err(|e| Failure::Content(format!("schema violation: {e}")))?;
                validate(t).map_err(Failure::Content)
            });
            match outcome {
                Ok(r) => return Ok(r),
                Err(f) => {
                    let msg = match &f {
                        Failure::Transport(m) | Failure::Content(m) => m.as_str(),
                    };
                    tracing::warn!(op, attempt, error = msg, "remote planner call failed");
                    last = f;
                }
            }
        }
        Err(match last {
            Failure::Transport(m) => ModelError::BackendFailure(format!("{op}: {m}")),
            Failure::Content(m) => ModelError::MalformedResponse(format!("{op}: {m}")),
        })
    }
}

fn kb_view(kb: &KnowledgeBase) -> Value {
    serde_json::to_value(kb).unwrap_or(Value::Null)
}

#[derive(Serialize)]
struct ResultView<'a> {
    module: &'a ActionModule,
    result: &'a ModuleResult,
}

impl ModelBackend for RemotePlanner {
    fn decompose_goal(&self, goal: &str, kb: &KnowledgeBase) -> Result<Vec<String>, ModelError> {
        self.ask("decompose_goal", DECOMPOSE, json!({"goal": goal, "kb": kb_view(kb)}), |s: Subgoals| {
            if s.subgoals.is_empty() {
                return Err("no subgoals".into());
            }
            for p in &s.subgoals {
                non_empty(p, "subgoal purpose")?;
            }
            Ok(s.subgoals)
        })
    }

    fn initial_questions(&self, subgoal: &Subgoal, kb: &KnowledgeBase) -> Result<Vec<SuggestionDraft>, ModelError> {
        self.ask("initial_questions", QUESTIONS, json!({"subgoal": subgoal, "kb": kb_view(kb)}), |q: Questions| {
            q.questions
                .into_iter()
                .map(|q| {
                    non_empty(&q.text, "question text")?;
                    Ok(SuggestionDraft::question(q.text, q.context_key.as_deref().filter(|k| !k.trim().is_empty())))
                })
                .collect()
        })
    }

    fn generate_module(&self, req: &PlannerRequest<'_>) -> Result<ModuleDraft, ModelError> {
        let requested = req.requested_kind();
        let input = serde_json::to_value(req).unwrap_or(Value::Null);
        let out = self.ask("generate_module", MODULE, input, |m: ModuleOut| match m {
            ModuleOut::Refuse { refuse } => {
                non_empty(&refuse, "refusal question")?;
                Ok(Err(refuse))
            }
            ModuleOut::Module { kind, directive, context_keys } => {
                non_empty(&directive, "directive")?;
                if requested.is_some_and(|k| k != kind) {
                    return Err(format!("returned {kind:?} for an explicit {:?} request", requested.unwrap()));
                }
                Ok(Ok(ModuleDraft { kind, directive, context_keys }))
            }
        })?;
        out.map_err(|question| ModelError::PlannerRefusal { question })
    }

    fn summarize(&self, module: &ActionModule, result: &ModuleResult, kb: &KnowledgeBase) -> Presentation {
        let input = json!({"result": ResultView { module, result }, "kb": kb_view(kb)});
        match self.ask("summarize", SUMMARY, input, |s: Summary| {
            non_empty(&s.narrative, "narrative")?;
            Ok(s.narrative)
        }) {
            Ok(narrative) => {
                // the table is always built locally so it only cites real findings
                let findings: Vec<_> = result.finding_ids.iter().filter_map(|id| kb.finding(*id)).collect();
                Presentation {
                    narrative,
                    table: if findings.is_empty() { None } else { Some(findings_table(&findings)) },
                }
            }
            Err(_) => default_presentation(module, result, kb),
        }
    }

    fn propose_next(&self, req: &ProposalRequest<'_>) -> Result<Vec<SuggestionDraft>, ModelError> {
        let input = serde_json::to_value(req).unwrap_or(Value::Null);
        self.ask("propose_next", PROPOSE, input, |p: Proposals| {
            if p.suggestions.is_empty() {
                return Err("no suggestions".into());
            }
            p.suggestions
                .into_iter()
                .map(|s| {
                    non_empty(&s.text, "suggestion text")?;
                    let proposed_module = match (s.kind, s.module_kind) {
                        (SuggestionKind::ProposedModule, Some(kind)) => Some(ModuleSketch {
                            kind,
                            directive: s.directive.filter(|d| !d.trim().is_empty()).unwrap_or_else(|| s.text.clone()),
                        }),
                        _ => None,
                    };
                    let context_key = match s.kind {
                        SuggestionKind::Question => s.context_key,
                        _ => None,
                    };
                    Ok(SuggestionDraft { kind: s.kind, text: s.text, proposed_module, context_key })
                })
                .collect()
        })
    }

    fn classify_text(&self, text: &str, phase: &Phase) -> Result<TextClass, ModelError> {
        self.ask("classify_text", CLASSIFY, json!({"text": text, "phase": phase}), |c: ClassOut| {
            let payload = match c {
                ClassOut::Context { items } => {
                    if items.is_empty() {
                        return Err("context without items".into());
                    }
                    let items = items
                        .into_iter()
                        .map(|i| {
                            non_empty(&i.key, "context key")?;
                            Ok(ContextDraft { key: i.key, value: i.value, goal_wide: false })
                        })
                        .collect::<Result<Vec<_>, String>>()?;
                    FeedbackPayload::ContextInjection { items }
                }
                ClassOut::Decision { directive, module_kind } => FeedbackPayload::Decision {
                    directive: Some(directive).filter(|d| !d.trim().is_empty()),
                    module_kind,
                },
                ClassOut::Terminate { reason } => FeedbackPayload::Terminate { reason },
            };
            Ok(TextClass { payload })
        })
    }
}
