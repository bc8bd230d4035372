//! Scenario files and the headless replay runner.
//!
//! A scenario is one JSON record per line:
//!
//! ```text
//! {"record":"meta","name":"milk","corpus":"milk"}
//! {"record":"goal","text":"Buy milk for me"}
//! {"record":"rule", ...}                      planner rules, see planner::script
//! {"record":"step","accept":"Which store?","text":"Amazon"}
//! {"record":"step","text":"Yes, search on Walmart too"}
//! {"record":"expect","kind":"ModuleGenerated","nth":2,"match":{"module":{"kind":"Exploitation"}}}
//! {"record":"expect_kinds","kinds":["GoalSet","SubgoalsDecomposed", ...]}
//! {"record":"expect_final","phase":"GoalDone","module_kinds":["E","E","X","E"]}
//! ```
//!
//! A `step` carries the fields of a raw feedback request; `accept` names an
//! open suggestion by its text and fills in its id. `expect` locates an
//! event by `seq` or by the `nth` occurrence of `kind` and requires `match`
//! to be a subset of its payload.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{AgentBackend, ExplorationBudget, SimulatedAgent, SiteGraph};
use crate::clock::Clock;
use crate::domain::{FeedbackPayload, ModuleKind, SuggestionKind};
use crate::event::{EventBody, EventKind, SessionEvent};
use crate::metrics::{self, SessionMetrics};
use crate::orchestrator::Session;
use crate::planner::script::ScriptError;
use crate::planner::{ModelBackend, RawFeedback, ScenarioScript, ScriptedPlanner};
use crate::projection::SessionState;
use crate::text::normalize_ws;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept: Option<String>,
    #[serde(flatten)]
    pub feedback: RawFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expect {
    pub kind: EventKind,
    /// 1-based; defaults to the first occurrence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, rename = "match", skip_serializing_if = "Value::is_null")]
    pub subset: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectFinal {
    /// A phase name as reported by `Phase::name`, e.g. `GoalDone`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    /// `E` / `X` per module, in generation order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_kinds: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_kind: Option<EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminated_subgoals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loops_to_terminate: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: Option<String>,
    pub corpus: Option<String>,
    pub goal: String,
    pub script: ScenarioScript,
    pub steps: Vec<Step>,
    pub expects: Vec<Expect>,
    pub expect_kinds: Option<Vec<EventKind>>,
    pub expect_final: Option<ExpectFinal>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scenario has no goal record")]
    NoGoal,
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Meta {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        corpus: Option<String>,
    },
    Goal {
        text: String,
    },
    Rule,
    Step(Step),
    Expect(Expect),
    ExpectKinds {
        kinds: Vec<EventKind>,
    },
    ExpectFinal(ExpectFinal),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let script = ScenarioScript::parse(text)?;
        let (mut name, mut corpus, mut goal) = (None, None, None);
        let mut steps = Vec::new();
        let mut expects = Vec::new();
        let mut expect_kinds = None;
        let mut expect_final = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let value: Value = serde_json::from_str(line)
                .map_err(|e| ScenarioError::Parse { line: i + 1, message: e.to_string() })?;
            // rule bodies were validated by the script parser
            let record: Record = if value.get("record").and_then(Value::as_str) == Some("rule") {
                Record::Rule
            } else {
                serde_json::from_value(value).map_err(|e| ScenarioError::Parse { line: i + 1, message: e.to_string() })?
            };
            match record {
                Record::Meta { name: n, corpus: c } => {
                    name = n.or(name);
                    corpus = c.or(corpus);
                }
                Record::Goal { text } => goal = Some(text),
                Record::Rule => {}
                Record::Step(s) => steps.push(s),
                Record::Expect(e) => expects.push(e),
                Record::ExpectKinds { kinds } => expect_kinds = Some(kinds),
                Record::ExpectFinal(f) => expect_final = Some(f),
            }
        }
        Ok(Scenario {
            name,
            corpus,
            goal: goal.ok_or(ScenarioError::NoGoal)?,
            script,
            steps,
            expects,
            expect_kinds,
            expect_final,
        })
    }

    /// Serialize back to the line format.
    pub fn to_lines(&self) -> String {
        fn record(tag: &str, v: Value) -> String {
            let mut map = serde_json::Map::new();
            map.insert("record".into(), Value::String(tag.into()));
            if let Value::Object(fields) = v {
                map.extend(fields);
            }
            let mut line = Value::Object(map).to_string();
            line.push('\n');
            line
        }
        let mut out = String::new();
        if self.name.is_some() || self.corpus.is_some() {
            out += &record("meta", serde_json::json!({ "name": self.name, "corpus": self.corpus }));
        }
        out += &record("goal", serde_json::json!({ "text": self.goal }));
        out += &self.script.to_lines();
        for s in &self.steps {
            out += &record("step", serde_json::to_value(s).expect("step serializes"));
        }
        for e in &self.expects {
            out += &record("expect", serde_json::to_value(e).expect("expect serializes"));
        }
        if let Some(k) = &self.expect_kinds {
            out += &record("expect_kinds", serde_json::json!({ "kinds": k }));
        }
        if let Some(f) = &self.expect_final {
            out += &record("expect_final", serde_json::to_value(f).expect("expect_final serializes"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// What was being checked, e.g. `step 3` or `expect #2`.
    pub at: String,
    pub seq: Option<u64>,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.seq {
            Some(seq) => writeln!(f, "divergence at {} (seq {seq})", self.at)?,
            None => writeln!(f, "divergence at {}", self.at)?,
        }
        writeln!(f, "  expected: {}", self.expected)?;
        write!(f, "  actual:   {}", self.actual)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub events: Vec<SessionEvent>,
    pub state: SessionState,
    pub metrics: SessionMetrics,
    pub transcript: String,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.divergence.is_none()
    }

    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }
}

/// Replay with the scenario's own scripted planner and a simulated agent.
pub fn run_scripted(
    scenario: &Scenario,
    world: Arc<SiteGraph>,
    budget: ExplorationBudget,
    clock: Arc<dyn Clock>,
) -> ReplayReport {
    let model = ScriptedPlanner::new(scenario.script.clone());
    let agent = SimulatedAgent::new(world, budget);
    run(scenario, &model, &agent, clock)
}

pub fn run(scenario: &Scenario, model: &dyn ModelBackend, agent: &dyn AgentBackend, clock: Arc<dyn Clock>) -> ReplayReport {
    let id = scenario.name.clone().unwrap_or_else(|| "replay".into());
    let (session, divergence) = drive(&id, scenario, model, agent, clock);
    let events = session.as_ref().map(|s| s.events().to_vec()).unwrap_or_default();
    let state = session.map(|s| s.current_state()).unwrap_or_default();
    let divergence = divergence.or_else(|| check(scenario, &events, &state));
    let metrics = if events.is_empty() {
        empty_metrics()
    } else {
        metrics::compute(&events).expect("orchestrated logs always project")
    };
    ReplayReport { transcript: transcript(&events), events, state, metrics, divergence }
}

fn empty_metrics() -> SessionMetrics {
    SessionMetrics {
        modules: vec![],
        total_cost: Default::default(),
        findings: 0,
        distinct_entities: 0,
        exploration_modules: 0,
        exploitation_modules: 0,
        exploration_ratio: None,
        loops_to_terminate: vec![],
        context_items_injected: 0,
        suggestions_offered: 0,
        suggestions_accepted: 0,
        acceptance_ratio: None,
        errors: 0,
    }
}

fn drive(
    id: &str,
    scenario: &Scenario,
    model: &dyn ModelBackend,
    agent: &dyn AgentBackend,
    clock: Arc<dyn Clock>,
) -> (Option<Session>, Option<Divergence>) {
    let diverge = |at: String, expected: String, actual: String| Divergence { at, seq: None, expected, actual };
    let mut session = match Session::create(id, &scenario.goal, clock) {
        Ok(s) => s,
        Err(e) => return (None, Some(diverge("goal".into(), "session created".into(), e.to_string()))),
    };
    if let Err(e) = session.run_decomposition(model) {
        return (Some(session), Some(diverge("decomposition".into(), "subgoals".into(), e.to_string())));
    }
    for (i, step) in scenario.steps.iter().enumerate() {
        let mut raw = step.feedback.clone();
        if let Some(text) = &step.accept {
            let wanted = normalize_ws(text);
            let open: Vec<_> = session.state().open_suggestions().cloned().collect();
            match open.iter().find(|s| normalize_ws(&s.text) == wanted) {
                Some(s) => raw.accepted_suggestion_id = Some(s.id),
                None => {
                    let offered: Vec<String> = open.iter().map(|s| format!("\"{}\"", s.text)).collect();
                    let d = diverge(
                        format!("step {}", i + 1),
                        format!("open suggestion \"{text}\""),
                        format!("open: [{}]", offered.join(", ")),
                    );
                    return (Some(session), Some(d));
                }
            }
        }
        if let Err(e) = session.step(&raw, model, agent) {
            let d = diverge(format!("step {}", i + 1), "feedback applied".into(), e.to_string());
            return (Some(session), Some(d));
        }
    }
    (Some(session), None)
}

/// Whether `expected` is contained in `actual`: objects by key, arrays
/// element-wise with equal length, scalars by equality.
pub fn json_subset(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => {
            e.iter().all(|(k, ev)| a.get(k).is_some_and(|av| json_subset(ev, av)))
        }
        (Value::Array(e), Value::Array(a)) => e.len() == a.len() && e.iter().zip(a).all(|(x, y)| json_subset(x, y)),
        _ => expected == actual,
    }
}

fn payload_of(ev: &SessionEvent) -> Value {
    let v = serde_json::to_value(ev).expect("events serialize");
    v.get("payload").cloned().unwrap_or(Value::Null)
}

fn check(scenario: &Scenario, events: &[SessionEvent], state: &SessionState) -> Option<Divergence> {
    if let Some(kinds) = &scenario.expect_kinds {
        for i in 0..kinds.len().max(events.len()) {
            let want = kinds.get(i).copied();
            let got = events.get(i).map(|e| e.kind());
            if want != got {
                return Some(Divergence {
                    at: "expect_kinds".into(),
                    seq: Some(i as u64),
                    expected: want.map(|k| k.to_string()).unwrap_or_else(|| "end of log".into()),
                    actual: events.get(i).map(|e| e.to_line()).unwrap_or_else(|| "end of log".into()),
                });
            }
        }
    }
    for (n, exp) in scenario.expects.iter().enumerate() {
        let found = match (exp.seq, exp.nth) {
            (Some(seq), _) => events.get(seq as usize),
            (None, nth) => events.iter().filter(|e| e.kind() == exp.kind).nth(nth.unwrap_or(1).saturating_sub(1)),
        };
        let at = format!("expect #{}", n + 1);
        let expected = format!("{} {}", exp.kind, exp.subset);
        let Some(ev) = found else {
            return Some(Divergence { at, seq: exp.seq, expected, actual: "no such event".into() });
        };
        if ev.kind() != exp.kind || !json_subset(&exp.subset, &payload_of(ev)) {
            return Some(Divergence { at, seq: Some(ev.seq), expected, actual: ev.to_line() });
        }
    }
    if let Some(f) = &scenario.expect_final {
        let fail = |what: &str, expected: String, actual: String| {
            Some(Divergence { at: format!("expect_final.{what}"), seq: None, expected, actual })
        };
        if let Some(phase) = &f.phase {
            if state.phase.name() != phase {
                return fail("phase", phase.clone(), state.phase.name().into());
            }
        }
        if let Some(kinds) = &f.module_kinds {
            let actual: Vec<String> = state.modules.iter().map(|m| m.kind.short().to_string()).collect();
            if *kinds != actual {
                let seq = first_module_mismatch(kinds, state, events);
                return Some(Divergence {
                    at: "expect_final.module_kinds".into(),
                    seq,
                    expected: format!("{kinds:?}"),
                    actual: format!("{actual:?}"),
                });
            }
        }
        if let Some(kind) = f.last_kind {
            let actual = events.last().map(|e| e.kind());
            if actual != Some(kind) {
                return fail("last_kind", kind.to_string(), format!("{actual:?}"));
            }
        }
        let terminated = events.iter().filter(|e| e.kind() == EventKind::SubgoalTerminated).count();
        if let Some(n) = f.terminated_subgoals {
            if n != terminated {
                return fail("terminated_subgoals", n.to_string(), terminated.to_string());
            }
        }
        if let Some(loops) = &f.loops_to_terminate {
            let m = metrics::compute(events).ok()?;
            if *loops != m.loops_to_terminate {
                return fail("loops_to_terminate", format!("{loops:?}"), format!("{:?}", m.loops_to_terminate));
            }
        }
    }
    None
}

fn first_module_mismatch(kinds: &[String], state: &SessionState, events: &[SessionEvent]) -> Option<u64> {
    let idx = state
        .modules
        .iter()
        .enumerate()
        .find(|(i, m)| kinds.get(*i).map(String::as_str) != Some(m.kind.short()))
        .map(|(i, _)| i)?;
    events.iter().filter(|e| e.kind() == EventKind::ModuleGenerated).nth(idx).map(|e| e.seq)
}

/// A readable account of a session log.
pub fn transcript(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    let mut purposes: BTreeMap<u32, String> = BTreeMap::new();
    let mut suggestion_text: BTreeMap<u32, String> = BTreeMap::new();
    for ev in events {
        let _ = match &ev.body {
            EventBody::GoalSet { text, .. } => writeln!(out, "Goal: {text}"),
            EventBody::SubgoalsDecomposed { subgoals } => {
                let _ = writeln!(out, "Subgoals:");
                for s in subgoals {
                    purposes.insert(s.id.0, s.purpose.clone());
                    let _ = writeln!(out, "  {}. {}", s.ordinal + 1, s.purpose);
                }
                Ok(())
            }
            EventBody::SubgoalStarted { subgoal_id, ordinal } => writeln!(
                out,
                "\n== Subgoal {}: {} ==",
                ordinal + 1,
                purposes.get(&subgoal_id.0).map(String::as_str).unwrap_or("")
            ),
            EventBody::QuestionsPosed { questions, .. } => {
                for q in questions {
                    suggestion_text.insert(q.id.0, q.text.clone());
                    let _ = writeln!(out, "Model asks: {}", q.text);
                }
                Ok(())
            }
            EventBody::FeedbackReceived { feedback } => {
                let replying = feedback
                    .in_reply_to
                    .and_then(|id| suggestion_text.get(&id.0))
                    .map(|t| format!(" (re: \"{t}\")"))
                    .unwrap_or_default();
                match &feedback.payload {
                    FeedbackPayload::ContextInjection { items } => {
                        let kv: Vec<String> = items.iter().map(|i| format!("{} = {}", i.key, i.value)).collect();
                        writeln!(out, "User [context]: {}{replying}", kv.join("; "))
                    }
                    FeedbackPayload::Decision { directive, module_kind } => {
                        let kind = module_kind.map(|k| format!(" as {k:?}")).unwrap_or_default();
                        match directive {
                            Some(d) => writeln!(out, "User [decision{kind}]: {d}{replying}"),
                            None if replying.is_empty() => writeln!(out, "User [decision{kind}]: proceed"),
                            None => writeln!(out, "User [decision{kind}]: accept{replying}"),
                        }
                    }
                    FeedbackPayload::Terminate { reason } => {
                        writeln!(out, "User [terminate]: {}{replying}", reason.as_deref().unwrap_or("end subgoal"))
                    }
                }
            }
            EventBody::ModuleGenerated { module } => writeln!(
                out,
                "\n-- Loop {} / {} [{}] {}",
                module.loop_index + 1,
                module.id,
                match module.kind {
                    ModuleKind::Exploration => "exploration",
                    ModuleKind::Exploitation => "exploitation",
                },
                module.directive
            ),
            EventBody::ModuleDispatched { .. } => Ok(()),
            EventBody::ModuleCompleted { result, actions, .. } => {
                let verbs: Vec<String> = actions.iter().map(|a| format!("{:?}", a.verb)).collect();
                let _ = writeln!(
                    out,
                    "Agent: {:?} after {} action(s), {} page(s), {} tick(s): {}",
                    result.status,
                    result.cost.actions_executed,
                    result.cost.pages_visited,
                    result.cost.simulated_time,
                    verbs.join(" ")
                );
                for n in &result.error_notes {
                    let _ = writeln!(out, "  note: {n}");
                }
                Ok(())
            }
            EventBody::ResultsPresented { presentation, .. } => {
                let _ = writeln!(out, "Model presents: {}", presentation.narrative);
                if let Some(t) = &presentation.table {
                    let _ = writeln!(out, "  | {} |", t.columns.join(" | "));
                    for r in &t.rows {
                        let _ = writeln!(out, "  | {} |", r.cells.join(" | "));
                    }
                }
                Ok(())
            }
            EventBody::SuggestionsOffered { suggestions, .. } => {
                for s in suggestions {
                    suggestion_text.insert(s.id.0, s.text.clone());
                    let tag = match s.kind {
                        SuggestionKind::Question => "question",
                        SuggestionKind::ProposedModule => "proposal",
                        SuggestionKind::TerminationOffer => "end?",
                    };
                    let _ = writeln!(out, "Model suggests [{tag}]: {}", s.text);
                }
                Ok(())
            }
            EventBody::SubgoalTerminated { subgoal_id, .. } => writeln!(out, "Subgoal {} terminated by the user.", subgoal_id.0 + 1),
            EventBody::GoalCompleted { .. } => writeln!(out, "\nGoal completed."),
            EventBody::ErrorNoted { code, message, .. } => writeln!(out, "! {code:?}: {message}"),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn subset_semantics() {
        let actual = json!({"module": {"kind": "Exploration", "directive": "x", "loop_index": 0}});
        assert!(json_subset(&json!({"module": {"kind": "Exploration"}}), &actual));
        assert!(!json_subset(&json!({"module": {"kind": "Exploitation"}}), &actual));
        assert!(json_subset(&Value::Null, &Value::Null));
        assert!(!json_subset(&json!([1]), &json!([1, 2])));
    }

    #[test]
    fn scenario_requires_goal() {
        let script = ScenarioScript::defaults().to_lines();
        assert!(matches!(Scenario::parse(&script), Err(ScenarioError::NoGoal)));
    }

    #[test]
    fn unknown_records_are_rejected() {
        let mut text = ScenarioScript::defaults().to_lines();
        text.push_str("{\"record\":\"goal\",\"text\":\"g\"}\n{\"record\":\"bogus\"}\n");
        assert!(matches!(Scenario::parse(&text), Err(ScenarioError::Parse { .. })));
    }
}
