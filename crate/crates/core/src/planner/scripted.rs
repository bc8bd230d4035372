//! Deterministic planner driven by a [`ScenarioScript`].

use crate::domain::{
    ActionModule, ContextDraft, FeedbackPayload, KnowledgeBase, ModuleKind, ModuleResult, Presentation,
    Subgoal, SuggestionDraft, SuggestionKind,
};
use crate::projection::{Phase, MAX_SUGGESTIONS};
use crate::text;

use super::script::{fill, Probe, RuleOp, RuleResponse, ScenarioScript, TemplateError, Vars};
use super::{
    default_presentation, parse_context_statement, ModelBackend, ModelError, ModuleDraft, PlannerRequest,
    ProposalRequest, TextClass,
};

#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    script: ScenarioScript,
}

impl Default for ScriptedPlanner {
    fn default() -> Self {
        ScriptedPlanner { script: ScenarioScript::defaults() }
    }
}

impl ScriptedPlanner {
    pub fn new(script: ScenarioScript) -> Self {
        ScriptedPlanner { script }
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }
}

fn refusal_for(err: TemplateError) -> ModelError {
    match err {
        TemplateError::MissingContext(key) => ModelError::PlannerRefusal {
            question: format!("What {} should I use?", key.replace('_', " ")),
        },
        TemplateError::Unclosed(t) => ModelError::BackendFailure(format!("bad template: {t}")),
    }
}

const TERMINATE_PHRASES: &[&str] = &[
    "stop", "done", "quit", "end", "finish", "terminate", "that's all", "that is all", "that's enough",
    "enough", "we're done", "i'm done", "all done",
];

const TERMINATE_PREFIXES: &[&str] = &["stop ", "end the ", "end this ", "finish the ", "terminate ", "conclude "];

const PROCEED_PHRASES: &[&str] = &["go", "go ahead", "proceed", "start", "continue", "ok", "okay", "yes", "sounds good"];

impl ModelBackend for ScriptedPlanner {
    fn decompose_goal(&self, goal: &str, _kb: &KnowledgeBase) -> Result<Vec<String>, ModelError> {
        let rule = self.script.lookup(Probe { op: RuleOp::Decompose, subgoal: None, loop_index: None, text: goal });
        let RuleResponse::Subgoals(templates) = &rule.then else {
            unreachable!("validated op/response pair")
        };
        let vars = Vars { goal, purpose: goal, ..Default::default() };
        let mut out = Vec::with_capacity(templates.len());
        for t in templates {
            let filled = fill(t, &vars).map_err(|e| ModelError::BackendFailure(e.to_string()))?;
            let purpose = text::normalize_ws(&filled.text);
            if !purpose.is_empty() {
                out.push(purpose);
            }
        }
        Ok(out)
    }

    fn initial_questions(&self, subgoal: &Subgoal, kb: &KnowledgeBase) -> Result<Vec<SuggestionDraft>, ModelError> {
        let rule = self.script.lookup(Probe {
            op: RuleOp::Questions,
            subgoal: Some(subgoal.ordinal),
            loop_index: None,
            text: &subgoal.purpose,
        });
        let RuleResponse::Questions(specs) = &rule.then else {
            unreachable!("validated op/response pair")
        };
        let known = kb.visible_context(subgoal.id);
        let vars = Vars { purpose: &subgoal.purpose, context: &known, ..Default::default() };
        let mut out = Vec::new();
        for q in specs {
            if let Some(key) = &q.context_key {
                if known.iter().any(|(k, _)| k == key) {
                    continue;
                }
            }
            let text = fill(&q.text, &vars).map_err(|e| ModelError::BackendFailure(e.to_string()))?.text;
            out.push(SuggestionDraft::question(text, q.context_key.as_deref()));
        }
        Ok(out)
    }

    fn generate_module(&self, req: &PlannerRequest<'_>) -> Result<ModuleDraft, ModelError> {
        let requested = req.requested_kind();
        if let Some(sketch) = req.accepted.and_then(|s| s.proposed_module.as_ref()) {
            if requested.is_some_and(|k| k != sketch.kind) {
                return Err(ModelError::PlannerRefusal {
                    question: format!(
                        "That suggestion is an {:?} step; should I run it as proposed or do something else?",
                        sketch.kind
                    ),
                });
            }
            return Ok(ModuleDraft {
                kind: sketch.kind,
                directive: sketch.directive.clone(),
                context_keys: used_keys(&sketch.directive, &req.context),
            });
        }

        let feedback = req.feedback_text();
        let rule = self.script.lookup(Probe {
            op: RuleOp::Module,
            subgoal: Some(req.subgoal.ordinal),
            loop_index: Some(req.loop_index),
            text: &feedback,
        });
        let vars = Vars {
            goal: req.goal,
            purpose: &req.subgoal.purpose,
            feedback: &feedback,
            directive: req.last_module.map(|m| m.directive.as_str()).unwrap_or(""),
            context: &req.context,
            ..Default::default()
        };
        match &rule.then {
            RuleResponse::Refuse(q) => Err(ModelError::PlannerRefusal {
                question: fill(q, &vars).map(|f| f.text).unwrap_or_else(|_| q.clone()),
            }),
            RuleResponse::Module(spec) => {
                let filled = fill(&spec.directive, &vars).map_err(refusal_for)?;
                let directive = text::normalize_ws(&filled.text);
                if directive.is_empty() {
                    return Err(ModelError::PlannerRefusal { question: "What should the agent do next?".into() });
                }
                let kind = match (spec.kind.fixed(), requested) {
                    (Some(fixed), Some(asked)) if fixed != asked => {
                        return Err(ModelError::PlannerRefusal {
                            question: format!(
                                "\"{directive}\" is an {fixed:?} step, not {asked:?}. What should the agent do instead?"
                            ),
                        })
                    }
                    (Some(fixed), _) => fixed,
                    (None, Some(asked)) => asked,
                    (None, None) => text::infer_kind(&directive),
                };
                Ok(ModuleDraft { kind, directive, context_keys: filled.context_keys })
            }
            _ => unreachable!("validated op/response pair"),
        }
    }

    fn summarize(&self, module: &ActionModule, result: &ModuleResult, kb: &KnowledgeBase) -> Presentation {
        let base = default_presentation(module, result, kb);
        let rule = self.script.lookup(Probe {
            op: RuleOp::Summary,
            subgoal: Some(module.subgoal_id.0),
            loop_index: Some(module.loop_index),
            text: &module.directive,
        });
        let RuleResponse::Summary(template) = &rule.then else {
            unreachable!("validated op/response pair")
        };
        let vars = Vars {
            narrative: &base.narrative,
            directive: &module.directive,
            count: result.finding_ids.len(),
            ..Default::default()
        };
        match fill(template, &vars) {
            Ok(f) if !f.text.trim().is_empty() => Presentation { narrative: f.text, table: base.table },
            _ => base,
        }
    }

    fn propose_next(&self, req: &ProposalRequest<'_>) -> Result<Vec<SuggestionDraft>, ModelError> {
        let rule = self.script.lookup(Probe {
            op: RuleOp::Suggestions,
            subgoal: Some(req.subgoal.ordinal),
            loop_index: Some(req.last_module.loop_index),
            text: &req.last_module.directive,
        });
        let RuleResponse::Suggestions(specs) = &rule.then else {
            unreachable!("validated op/response pair")
        };
        let vars = Vars {
            goal: req.goal,
            purpose: &req.subgoal.purpose,
            directive: &req.last_module.directive,
            narrative: &req.last_result.narrative,
            count: req.last_result.finding_ids.len(),
            context: &req.context,
            ..Default::default()
        };
        let mut out = Vec::new();
        for s in specs.iter().take(MAX_SUGGESTIONS) {
            // a suggestion whose template needs missing context is skipped
            let Ok(text) = fill(&s.text, &vars) else { continue };
            let draft = match (&s.kind, &s.module) {
                (SuggestionKind::ProposedModule, Some(m)) => {
                    let Ok(directive) = fill(&m.directive, &vars) else { continue };
                    let kind = m.kind.fixed().unwrap_or_else(|| text::infer_kind(&directive.text));
                    SuggestionDraft::proposal(text.text, kind, directive.text)
                }
                (SuggestionKind::Question, _) => SuggestionDraft::question(text.text, None),
                _ => SuggestionDraft::termination(text.text),
            };
            out.push(draft);
        }
        Ok(out)
    }

    fn classify_text(&self, text: &str, phase: &Phase) -> Result<TextClass, ModelError> {
        let lower = text::normalize_ws(text).to_lowercase();
        let bare = lower.trim_end_matches(['.', '!']);
        if TERMINATE_PHRASES.contains(&bare) || TERMINATE_PREFIXES.iter().any(|p| bare.starts_with(p)) {
            return Ok(TextClass { payload: FeedbackPayload::Terminate { reason: Some(text.to_string()) } });
        }
        if let Some((key, value)) = parse_context_statement(text) {
            return Ok(TextClass {
                payload: FeedbackPayload::ContextInjection {
                    items: vec![ContextDraft { key, value, goal_wide: false }],
                },
            });
        }
        if PROCEED_PHRASES.contains(&bare) {
            return Ok(TextClass { payload: FeedbackPayload::Decision { directive: None, module_kind: None } });
        }
        if matches!(phase, Phase::ContextGathering { .. }) && !starts_with_verb(bare) {
            return Ok(TextClass {
                payload: FeedbackPayload::ContextInjection {
                    items: vec![ContextDraft { key: "note".into(), value: text.trim().to_string(), goal_wide: false }],
                },
            });
        }
        // kind is left to the planner so a fixed-kind rule is not refused
        Ok(TextClass {
            payload: FeedbackPayload::Decision { directive: Some(text.trim().to_string()), module_kind: None },
        })
    }
}

fn starts_with_verb(lower: &str) -> bool {
    text::tokenize(lower).into_iter().find(|t| !text::is_stopword(t)).is_some_and(|t| {
        text::EXPLOITATION_VERBS.contains(&t.as_str()) || text::EXPLORATION_VERBS.contains(&t.as_str())
    })
}

fn used_keys(directive: &str, context: &[(String, String)]) -> Vec<String> {
    let lower = directive.to_lowercase();
    context
        .iter()
        .filter(|(_, v)| !v.trim().is_empty() && lower.contains(&v.to_lowercase()))
        .map(|(k, _)| k.clone())
        .collect()
}

/// The kind a text directive would infer to, for callers that want to show it.
pub fn inferred_kind(directive: &str) -> ModuleKind {
    text::infer_kind(directive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GoalId, SubgoalId, SubgoalStatus};

    fn subgoal(purpose: &str) -> Subgoal {
        Subgoal {
            id: SubgoalId(0),
            goal_id: GoalId(0),
            ordinal: 0,
            purpose: purpose.into(),
            status: SubgoalStatus::ContextGathering,
            loop_count: 0,
        }
    }

    #[test]
    fn catch_all_decomposition_is_identity() {
        let p = ScriptedPlanner::default();
        assert_eq!(p.decompose_goal("Plan a trip", &KnowledgeBase::new()).unwrap(), vec!["Plan a trip"]);
        assert!(p.initial_questions(&subgoal("x"), &KnowledgeBase::new()).unwrap().is_empty());
    }

    #[test]
    fn free_text_classification() {
        let p = ScriptedPlanner::default();
        let decision = Phase::DecisionPhase { subgoal: SubgoalId(0), loop_index: 1 };
        let c = p.classify_text("The budget is $10", &decision).unwrap();
        assert!(matches!(c.payload, FeedbackPayload::ContextInjection { ref items } if items[0].key == "budget"));
        let c = p.classify_text("Investigate other brands of milk", &decision).unwrap();
        assert!(matches!(c.payload, FeedbackPayload::Decision { directive: Some(_), .. }));
        assert_eq!(inferred_kind("Investigate other brands of milk"), ModuleKind::Exploration);
        let c = p.classify_text("Stop.", &decision).unwrap();
        assert!(matches!(c.payload, FeedbackPayload::Terminate { .. }));
        let gathering = Phase::ContextGathering { subgoal: SubgoalId(0) };
        let c = p.classify_text("Amazon and Walmart", &gathering).unwrap();
        assert!(matches!(c.payload, FeedbackPayload::ContextInjection { .. }));
    }
}
