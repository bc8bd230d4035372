//! Random worlds and sessions for property tests.
//!
//! Everything is a pure function of a `u64` seed. A generated session is
//! driven step by step with randomly chosen but phase-appropriate feedback;
//! the feedback that was accepted is kept as a replayable [`Scenario`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::world::{FactTemplate, FieldFill, Form, FormField, Link, LinkTarget, Page, Site, SiteGraph};
use crate::agent::{ExplorationBudget, SimulatedAgent};
use crate::clock::FixedClock;
use crate::domain::{AttrValue, ModuleKind, Money, Quantity, SuggestionKind};
use crate::event::SessionEvent;
use crate::orchestrator::Session;
use crate::planner::script::{
    KindSpec, ModuleSpec, QuestionSpec, RuleMatch, RuleOp, RuleRecord, RuleResponse, SuggestionSpec,
};
use crate::planner::{RawFeedback, RawKind, ScenarioScript, ScriptedPlanner};
use crate::projection::Phase;
use crate::replay::{Scenario, Step};

const VOCAB: &[&str] = &["milk", "fat-free", "organic", "oat", "fresh", "juice", "coffee", "tea", "bread", "cheap"];
const VOLUMES_ML: &[f64] = &[250.0, 500.0, 750.0, 1000.0, 2000.0];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scent(r: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = r.random_range(1..=max);
    let mut out: Vec<String> = VOCAB.choose_multiple(r, n).map(|s| s.to_string()).collect();
    out.sort();
    out
}

/// Price and volume for a random product. Volumes are whole millilitres,
/// sometimes written in litres.
pub fn random_product_attrs(r: &mut ChaCha8Rng, currency: &str) -> BTreeMap<String, AttrValue> {
    let ml = *VOLUMES_ML.choose(r).unwrap();
    let volume = if ml >= 1000.0 && r.random_bool(0.5) { Quantity::new(ml / 1000.0, "L") } else { Quantity::new(ml, "ml") };
    BTreeMap::from([
        ("price".to_string(), AttrValue::Money(Money::new(r.random_range(50..=3000), currency))),
        ("volume".to_string(), AttrValue::Quantity(volume)),
        ("same_day".to_string(), AttrValue::Bool(r.random_bool(0.5))),
    ])
}

fn links_to<'a>(r: &mut ChaCha8Rng, targets: impl Iterator<Item = &'a String>, p: f64) -> Vec<Link> {
    let mut out = Vec::new();
    for t in targets {
        if r.random_bool(p) {
            out.push(Link { to: LinkTarget::Page(t.clone()), anchor: format!("to {t}"), scent: scent(r, 3) });
        }
    }
    out
}

/// 1-3 sites of 2-7 pages (an entry page plus products) each, with random scent, some broken links and
/// some purchase forms. Rarely a product is priced in a second currency.
pub fn random_world(r: &mut ChaCha8Rng) -> SiteGraph {
    let mixed_currency = r.random_bool(0.05);
    let mut sites = Vec::new();
    let mut pages = Vec::new();
    for s in 0..r.random_range(1..=3) {
        let name = format!("Site{s}");
        let prefix = format!("site{s}");
        let n = r.random_range(1..=6);
        let ids: Vec<String> = (0..n).map(|p| format!("{prefix}/p{p}")).collect();
        let entry = format!("{prefix}/home");
        let mut home_links = links_to(r, ids.iter(), 0.5);
        if r.random_bool(0.3) {
            home_links.push(Link {
                to: LinkTarget::Broken(format!("https://{prefix}.test/gone")),
                anchor: "dead end".into(),
                scent: scent(r, 3),
            });
        }
        pages.push(Page {
            id: entry.clone(),
            url: format!("https://{prefix}.test/"),
            title: name.clone(),
            scent: vec![],
            facts: vec![],
            links: home_links,
            forms: vec![],
        });
        for (p, id) in ids.iter().enumerate() {
            let currency = if mixed_currency && p == 0 && s == 0 { "EUR" } else { "USD" };
            let mut links = links_to(r, ids.iter().filter(|o| *o != id), 0.3);
            if r.random_bool(0.1) {
                links.push(Link {
                    to: LinkTarget::Broken(format!("https://{prefix}.test/{p}/gone")),
                    anchor: "missing".into(),
                    scent: scent(r, 2),
                });
            }
            let forms = if r.random_bool(0.4) {
                vec![Form {
                    id: "buy".into(),
                    scent: vec!["buy".into(), "purchase".into()],
                    fields: vec![FormField { name: "item".into(), fill: FieldFill::PageEntity }],
                    effect: FactTemplate {
                        entity: "Order: {item}".into(),
                        attributes: BTreeMap::from([("message".into(), AttrValue::Text("Bought {item}".into()))]),
                    },
                }]
            } else {
                vec![]
            };
            pages.push(Page {
                id: id.clone(),
                url: format!("https://{prefix}.test/{p}"),
                title: format!("Item {s}-{p}"),
                scent: scent(r, 3),
                facts: vec![FactTemplate { entity: format!("Item {s}-{p}"), attributes: random_product_attrs(r, currency) }],
                links,
                forms,
            });
        }
        let search_index = links_to(r, ids.iter(), 0.7);
        sites.push(Site { name, domain: format!("{prefix}.test"), entry, search_index });
    }
    SiteGraph::new(sites, pages).expect("generated worlds are well formed")
}

fn directive(r: &mut ChaCha8Rng, world: &SiteGraph) -> (String, Option<ModuleKind>) {
    let site = &world.sites.choose(r).unwrap().name;
    let w = VOCAB.choose_multiple(r, 2).copied().collect::<Vec<_>>();
    match r.random_range(0..10) {
        0 | 1 => (format!("Search for {} {} on {site}", w[0], w[1]), Some(ModuleKind::Exploration)),
        2 => (format!("Find {} on {site}", w[0]), Some(ModuleKind::Exploration)),
        3 => (format!("Buy {} on {site}", w[0]), Some(ModuleKind::Exploration)),
        4 => ("Compare the products found so far with fast shipping".into(), Some(ModuleKind::Exploitation)),
        5 => ("Rank the items by price".into(), Some(ModuleKind::Exploitation)),
        6 => ("Summarize the findings".into(), Some(ModuleKind::Exploitation)),
        7 => ("Draft a short note about the findings".into(), Some(ModuleKind::Exploitation)),
        8 => ("Filter the items by same_day".into(), Some(ModuleKind::Exploitation)),
        _ => (format!("Search for {} on Nowhere", w[0]), None),
    }
}

fn kind_spec(k: Option<ModuleKind>) -> KindSpec {
    match k {
        Some(ModuleKind::Exploration) => KindSpec::Exploration,
        Some(ModuleKind::Exploitation) => KindSpec::Exploitation,
        None => KindSpec::Auto,
    }
}

/// A valid script: 1-3 subgoals, up to two questions, a few proposals and
/// occasionally a refusal.
pub fn random_script(r: &mut ChaCha8Rng, world: &SiteGraph) -> ScenarioScript {
    let mut records = Vec::new();
    let n = r.random_range(1..=3);
    records.push(RuleRecord {
        op: RuleOp::Decompose,
        when: RuleMatch::default(),
        then: RuleResponse::Subgoals((0..n).map(|i| format!("Task {i} of {{goal}}")).collect()),
    });
    let questions = (0..r.random_range(0..=2))
        .map(|i| QuestionSpec { text: format!("Question {i}?"), context_key: Some(format!("k{i}")) })
        .collect();
    records.push(RuleRecord { op: RuleOp::Questions, when: RuleMatch::default(), then: RuleResponse::Questions(questions) });
    if r.random_bool(0.3) {
        records.push(RuleRecord {
            op: RuleOp::Module,
            when: RuleMatch { loop_index: Some(r.random_range(0..3)), ..Default::default() },
            then: RuleResponse::Refuse("Which site should I use?".into()),
        });
    }
    if r.random_bool(0.3) {
        let (d, k) = directive(r, world);
        records.push(RuleRecord {
            op: RuleOp::Module,
            when: RuleMatch { loop_index: Some(0), ..Default::default() },
            then: RuleResponse::Module(ModuleSpec { kind: kind_spec(k), directive: d }),
        });
    }
    records.push(RuleRecord {
        op: RuleOp::Module,
        when: RuleMatch::default(),
        then: RuleResponse::Module(ModuleSpec { kind: KindSpec::Auto, directive: "{feedback|purpose}".into() }),
    });
    let mut suggestions: Vec<SuggestionSpec> = (0..r.random_range(0..=3))
        .map(|_| {
            let (d, k) = directive(r, world);
            SuggestionSpec {
                kind: SuggestionKind::ProposedModule,
                text: d.clone(),
                module: Some(ModuleSpec { kind: kind_spec(k), directive: d }),
            }
        })
        .collect();
    if r.random_bool(0.3) {
        suggestions.push(SuggestionSpec { kind: SuggestionKind::Question, text: "Anything else?".into(), module: None });
    }
    if r.random_bool(0.7) {
        suggestions.push(SuggestionSpec { kind: SuggestionKind::TerminationOffer, text: "Shall I conclude?".into(), module: None });
    }
    records.push(RuleRecord { op: RuleOp::Suggestions, when: RuleMatch::default(), then: RuleResponse::Suggestions(suggestions) });
    records.push(RuleRecord { op: RuleOp::Summary, when: RuleMatch::default(), then: RuleResponse::Summary("{narrative}".into()) });
    ScenarioScript::from_records(records).expect("generated scripts are valid")
}

fn random_feedback(r: &mut ChaCha8Rng, session: &Session, world: &SiteGraph) -> RawFeedback {
    let open: Vec<_> = session.state().open_suggestions().cloned().collect();
    let in_context = matches!(session.phase(), Phase::ContextGathering { .. });
    match r.random_range(0..10) {
        0..=3 if !open.is_empty() => {
            let s = open.choose(r).unwrap();
            let text = match s.kind {
                SuggestionKind::Question => Some(format!("answer {}", r.random_range(0..100))),
                _ => None,
            };
            RawFeedback { accepted_suggestion_id: Some(s.id), text, ..Default::default() }
        }
        0..=4 if in_context => RawFeedback {
            kind: Some(RawKind::Context),
            text: Some(format!("the budget is {}", r.random_range(1..50))),
            goal_wide: r.random_bool(0.3),
            ..Default::default()
        },
        5 | 6 => {
            let (d, k) = directive(r, world);
            RawFeedback {
                text: Some(d),
                module_kind: if r.random_bool(0.3) { k } else { None },
                kind: if r.random_bool(0.5) { Some(RawKind::Decision) } else { None },
                ..Default::default()
            }
        }
        7 => RawFeedback { kind: Some(RawKind::Decision), ..Default::default() },
        8 => RawFeedback { kind: Some(RawKind::Terminate), ..Default::default() },
        _ => RawFeedback { text: Some("ok".into()), ..Default::default() },
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSession {
    pub seed: u64,
    pub world: Arc<SiteGraph>,
    pub scenario: Scenario,
    pub events: Vec<SessionEvent>,
    /// Feedback the orchestrator rejected (not part of the scenario).
    pub rejected: usize,
}

/// Drive a random session for up to `max_steps` feedback submissions.
pub fn random_session(seed: u64, max_steps: usize) -> GeneratedSession {
    let mut r = rng(seed);
    let world = Arc::new(random_world(&mut r));
    let script = random_script(&mut r, &world);
    let goal = format!("Goal {seed}");
    let model = ScriptedPlanner::new(script.clone());
    let agent = SimulatedAgent::new(world.clone(), ExplorationBudget::default());
    let mut session = Session::create(format!("random-{seed}"), &goal, Arc::new(FixedClock::default())).unwrap();
    session.run_decomposition(&model).expect("scripted decomposition succeeds");
    let mut steps = Vec::new();
    let mut rejected = 0;
    for _ in 0..max_steps {
        if session.phase() == Phase::GoalDone {
            break;
        }
        let raw = random_feedback(&mut r, &session, &world);
        let before = session.events().len();
        match session.step(&raw, &model, &agent) {
            Ok(_) => steps.push(Step { accept: None, feedback: raw }),
            Err(_) => {
                assert_eq!(session.events().len(), before, "a rejected step emitted events");
                rejected += 1;
            }
        }
    }
    let scenario = Scenario {
        name: Some(format!("random-{seed}")),
        corpus: None,
        goal,
        script,
        steps,
        expects: vec![],
        expect_kinds: None,
        expect_final: None,
    };
    GeneratedSession { seed, world, scenario, events: session.events().to_vec(), rejected }
}
