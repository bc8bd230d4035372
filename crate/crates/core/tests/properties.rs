//! Properties over randomly generated sessions, worlds and product sets.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use num_rational::Ratio;
use proptest::prelude::*;

use wayfinder_core::agent::exploit::{cheapest_tier, rank_by_unit_price};
use wayfinder_core::agent::explore::{run_exploration, scent_keywords};
use wayfinder_core::agent::world::{Link, LinkTarget, SiteGraph};
use wayfinder_core::domain::{
    AttrValue, FeedbackPayload, Finding, FindingId, KnowledgeBase, ModuleId, ModuleKind, SubgoalId, Verb,
};
use wayfinder_core::event::{EventBody, SessionEvent};
use wayfinder_core::metrics;
use wayfinder_core::projection::{project, validate_module_actions, ProjectionError};
use wayfinder_core::replay;
use wayfinder_core::testkit::{self, GeneratedSession};
use wayfinder_core::{ExplorationBudget, FixedClock, ScriptedPlanner, Session, SimulatedAgent};

const SESSIONS: u64 = 1000;
const MAX_STEPS: usize = 14;

fn sessions() -> &'static [GeneratedSession] {
    static CELL: OnceLock<Vec<GeneratedSession>> = OnceLock::new();
    CELL.get_or_init(|| (0..SESSIONS).map(|seed| testkit::random_session(seed, MAX_STEPS)).collect())
}

#[test]
fn generated_sessions_are_varied() {
    let all = sessions();
    let done = all.iter().filter(|s| project(&s.events).unwrap().phase.name() == "GoalDone").count();
    let modules: usize = all.iter().map(|s| project(&s.events).unwrap().modules.len()).sum();
    let exploit = all
        .iter()
        .flat_map(|s| project(&s.events).unwrap().modules)
        .filter(|m| m.kind == ModuleKind::Exploitation)
        .count();
    let errors: usize = all.iter().map(|s| project(&s.events).unwrap().errors.len()).sum();
    // guard against a generator that stopped exercising the protocol
    assert!(done > 100, "only {done} sessions finished");
    assert!(modules > 1000 && exploit > 200, "{modules} modules, {exploit} exploitation");
    assert!(errors > 0);
}

#[test]
fn exploitation_modules_never_touch_the_web() {
    let mut checked = 0;
    for s in sessions() {
        let state = project(&s.events).unwrap();
        for ev in &s.events {
            let EventBody::ModuleCompleted { result, actions, .. } = &ev.body else { continue };
            let module = state.module(result.module_id).unwrap();
            if module.kind == ModuleKind::Exploitation {
                assert_eq!(result.cost.pages_visited, 0, "seed {} module {}", s.seed, module.id);
                assert!(actions.iter().all(|a| a.verb.kind() == ModuleKind::Exploitation));
                checked += 1;
            }
            validate_module_actions(module, actions).unwrap_or_else(|e| panic!("seed {}: {e}", s.seed));
        }
    }
    assert!(checked > 0);
}

#[test]
fn every_termination_follows_a_user_terminate() {
    for s in sessions() {
        let mut last_terminate: Option<(u32, SubgoalId)> = None;
        for ev in &s.events {
            match &ev.body {
                EventBody::FeedbackReceived { feedback } => {
                    last_terminate = matches!(feedback.payload, FeedbackPayload::Terminate { .. })
                        .then_some((feedback.id.0, feedback.subgoal_id));
                }
                EventBody::SubgoalTerminated { subgoal_id, feedback_id } => {
                    assert_eq!(last_terminate, Some((feedback_id.0, *subgoal_id)), "seed {}", s.seed);
                    last_terminate = None;
                }
                _ => {}
            }
        }
    }
}

fn orphan_termination(events: &[SessionEvent]) -> Option<Vec<SessionEvent>> {
    // drop the Terminate feedback in front of the first SubgoalTerminated
    let i = events.iter().position(|e| matches!(e.body, EventBody::SubgoalTerminated { .. }))?;
    let mut out: Vec<SessionEvent> = events[..i - 1].to_vec();
    let mut ev = events[i].clone();
    ev.seq -= 1;
    out.push(ev);
    Some(out)
}

#[test]
fn orphan_terminations_are_illegal() {
    let mut tried = 0;
    for s in sessions() {
        let Some(mutated) = orphan_termination(&s.events) else { continue };
        match project(&mutated) {
            Err(ProjectionError::IllegalTransition { .. }) => tried += 1,
            other => panic!("seed {}: expected IllegalTransition, got {other:?}", s.seed),
        }
    }
    assert!(tried > 100);
}

#[test]
fn persisted_logs_restore_the_live_state() {
    for s in sessions().iter().step_by(3) {
        let text: String = s.events.iter().map(|e| e.to_line() + "\n").collect();
        let parsed: Vec<SessionEvent> = text.lines().map(|l| SessionEvent::from_line(l).unwrap()).collect();
        assert_eq!(parsed, s.events);
        let restored = Session::restore("x", parsed, Arc::new(FixedClock::default())).unwrap();
        assert_eq!(restored.state(), &project(&s.events).unwrap(), "seed {}", s.seed);
    }
}

#[test]
fn generation_and_scenario_replay_are_byte_identical() {
    for s in sessions().iter().step_by(5) {
        let again = testkit::random_session(s.seed, MAX_STEPS);
        let bytes = |evs: &[SessionEvent]| evs.iter().map(|e| e.to_line() + "\n").collect::<String>();
        assert_eq!(bytes(&again.events), bytes(&s.events), "seed {}", s.seed);

        let model = ScriptedPlanner::new(s.scenario.script.clone());
        let agent = SimulatedAgent::new(s.world.clone(), ExplorationBudget::default());
        let report = replay::run(&s.scenario, &model, &agent, Arc::new(FixedClock::default()));
        assert!(report.passed(), "seed {}: {:?}", s.seed, report.divergence);
        assert_eq!(report.log_text(), bytes(&s.events), "seed {}", s.seed);
    }
}

#[test]
fn replaying_any_prefix_then_the_rest_matches() {
    for s in sessions().iter().step_by(7) {
        let full = project(&s.events).unwrap();
        let cut = s.events.len() / 2;
        let mut state = project(&s.events[..cut.max(1)]).unwrap();
        for ev in &s.events[cut.max(1)..] {
            state.apply(ev).unwrap();
        }
        assert_eq!(state, full);
    }
}

/// Counts straight off the raw events, without projection.
#[derive(Debug, Default, PartialEq)]
struct Brute {
    modules: u64,
    exploration: u64,
    actions: u64,
    pages: u64,
    ticks: u64,
    findings: u64,
    entities: usize,
    loops: Vec<u32>,
    context_items: u64,
    offered: u64,
    accepted: u64,
    errors: u64,
}

fn brute(events: &[SessionEvent]) -> Brute {
    let mut b = Brute::default();
    let mut entities = BTreeSet::new();
    let mut per_subgoal: BTreeMap<SubgoalId, u32> = BTreeMap::new();
    for ev in events {
        match &ev.body {
            EventBody::ModuleGenerated { module } => {
                b.modules += 1;
                b.exploration += (module.kind == ModuleKind::Exploration) as u64;
                *per_subgoal.entry(module.subgoal_id).or_default() += 1;
            }
            EventBody::ModuleCompleted { result, findings, .. } => {
                b.actions += result.cost.actions_executed as u64;
                b.pages += result.cost.pages_visited as u64;
                b.ticks += result.cost.simulated_time;
                b.findings += findings.len() as u64;
                entities.extend(findings.iter().map(|f| f.entity.clone()));
            }
            EventBody::SubgoalTerminated { subgoal_id, .. } => {
                b.loops.push(per_subgoal.get(subgoal_id).copied().unwrap_or(0));
            }
            EventBody::FeedbackReceived { feedback } => {
                if let FeedbackPayload::ContextInjection { items } = &feedback.payload {
                    b.context_items += items.len() as u64;
                }
                b.accepted += feedback.in_reply_to.is_some() as u64;
            }
            EventBody::QuestionsPosed { questions, .. } => b.offered += questions.len() as u64,
            EventBody::SuggestionsOffered { suggestions, .. } => b.offered += suggestions.len() as u64,
            EventBody::ErrorNoted { .. } => b.errors += 1,
            _ => {}
        }
    }
    b.entities = entities.len();
    b
}

#[test]
fn metrics_match_brute_force_counts() {
    for s in sessions() {
        let m = metrics::compute(&s.events).unwrap();
        let b = brute(&s.events);
        let got = Brute {
            modules: m.modules.len() as u64,
            exploration: m.exploration_modules,
            actions: m.total_cost.actions,
            pages: m.total_cost.pages,
            ticks: m.total_cost.ticks,
            findings: m.findings,
            entities: m.distinct_entities as usize,
            loops: m.loops_to_terminate.clone(),
            context_items: m.context_items_injected,
            offered: m.suggestions_offered,
            accepted: m.suggestions_accepted,
            errors: m.errors,
        };
        assert_eq!(got, b, "seed {}", s.seed);
        for r in [m.exploration_ratio, m.acceptance_ratio].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&r));
        }
        assert_eq!(m.exploration_ratio.is_none(), b.modules == 0);
    }
}

#[test]
fn cost_and_gain_never_decrease_over_prefixes() {
    for s in sessions().iter().step_by(10) {
        let mut prev = None;
        for n in 1..=s.events.len() {
            let m = metrics::compute(&s.events[..n]).unwrap();
            let now = (m.total_cost.actions, m.total_cost.pages, m.total_cost.ticks, m.findings, m.distinct_entities);
            if let Some(p) = prev {
                let p: (u64, u64, u64, u64, u64) = p;
                assert!(now.0 >= p.0 && now.1 >= p.1 && now.2 >= p.2 && now.3 >= p.3 && now.4 >= p.4);
            }
            prev = Some(now);
        }
    }
}

#[test]
fn knowledge_base_only_grows() {
    for s in sessions().iter().step_by(4) {
        let mut state = project(&s.events[..1]).unwrap();
        for ev in &s.events[1..] {
            let before_f: Vec<Finding> = state.kb.findings().to_vec();
            let before_c = state.kb.context().to_vec();
            state.apply(ev).unwrap();
            assert_eq!(&state.kb.findings()[..before_f.len()], &before_f[..]);
            assert_eq!(&state.kb.context()[..before_c.len()], &before_c[..]);
        }
    }
}

// ---- simulated web ----

/// Rebuild the frontier from the world and check every click against it.
fn check_greedy(world: &SiteGraph, directive: &str, run_actions: &[wayfinder_core::domain::Action]) {
    let keywords = scent_keywords(directive, &[]);
    let overlap = |l: &Link| l.scent.iter().map(|s| s.to_lowercase()).collect::<BTreeSet<_>>().intersection(&keywords).count();
    let site = world.sites.iter().find(|s| directive.contains(&s.name)).unwrap();
    let mut offered: Vec<Link> = Vec::new();
    let mut visited: BTreeSet<String> = BTreeSet::new();
    let mut dead_clicked: BTreeSet<String> = BTreeSet::new();
    for a in run_actions {
        match a.verb {
            Verb::Navigate => {
                visited.insert(a.target.clone());
                offered.extend(world.page(&a.target).unwrap().links.iter().cloned());
            }
            Verb::Search => offered.extend(site.search_index.iter().cloned()),
            Verb::ClickLink => {
                let open: Vec<&Link> = offered
                    .iter()
                    .filter(|l| match &l.to {
                        LinkTarget::Page(id) => !visited.contains(id),
                        LinkTarget::Broken(url) => !dead_clicked.contains(url),
                    })
                    .collect();
                let best = open.iter().map(|l| overlap(l)).max().unwrap();
                assert!(best > 0);
                let chosen_overlap: usize = a.params["scent_overlap"].parse().unwrap();
                assert_eq!(chosen_overlap, best, "{directive}: click on {} is not greedy", a.target);
                let first = open.iter().filter(|l| overlap(l) == best).map(|l| l.to.key()).min().unwrap();
                assert_eq!(first, a.target, "tie-break");
                match world.page(&a.target) {
                    Some(p) => {
                        visited.insert(p.id.clone());
                        offered.extend(p.links.iter().cloned());
                    }
                    None => {
                        dead_clicked.insert(a.target.clone());
                    }
                }
            }
            _ => {}
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exploration_is_scent_greedy_and_within_budget(
        seed in any::<u64>(),
        words in proptest::sample::subsequence(vec!["milk", "fat-free", "organic", "oat", "fresh", "juice", "coffee", "tea"], 1..4),
        max_pages in 1u32..8,
        max_actions in 1u32..30,
    ) {
        let mut r = testkit::rng(seed);
        let world = testkit::random_world(&mut r);
        let site = world.sites[0].name.clone();
        let directive = format!("Search for {} on {site}", words.join(" "));
        let budget = ExplorationBudget { max_pages, max_actions };
        let kb = KnowledgeBase::new();
        let run = run_exploration(&directive, &[], &kb, &world, budget).unwrap();
        prop_assert!(run.cost.pages_visited <= max_pages);
        prop_assert!(run.cost.actions_executed <= max_actions);
        check_greedy(&world, &directive, &run.actions);
        // the world is not consulted mutably, so a second run is identical
        let again = run_exploration(&directive, &[], &kb, &world, budget).unwrap();
        prop_assert_eq!(again.actions, run.actions);
        prop_assert_eq!(again.findings, run.findings);
    }

    #[test]
    fn cheapest_tier_matches_exact_fractions(seed in any::<u64>(), n in 1usize..=20) {
        let mut r = testkit::rng(seed);
        let mut kb = KnowledgeBase::new();
        for i in 0..n {
            kb.push_finding(Finding {
                id: FindingId(i as u32),
                entity: format!("P{i}"),
                attributes: testkit::random_product_attrs(&mut r, "USD"),
                source_page: Some(format!("p{i}")),
                module_id: ModuleId(0),
                subgoal_id: SubgoalId(0),
            });
        }
        let price_per_l = |f: &Finding| {
            let (AttrValue::Money(m), AttrValue::Quantity(q)) = (&f.attributes["price"], &f.attributes["volume"]) else { unreachable!() };
            let ml = if q.unit == "L" { (q.value * 1000.0) as i64 } else { q.value as i64 };
            Ratio::new(m.minor as i128 * 1000, ml as i128)
        };
        let all: Vec<(FindingId, Ratio<i128>)> = kb.findings().iter().map(|f| (f.id, price_per_l(f))).collect();
        let min = all.iter().map(|(_, p)| *p).min().unwrap();
        let expected: Vec<FindingId> = all.iter().filter(|(_, p)| *p == min).map(|(id, _)| *id).collect();
        prop_assert_eq!(cheapest_tier(&kb).unwrap(), expected);
        let ranked: Vec<Ratio<i128>> = rank_by_unit_price(&kb).unwrap().iter().map(|(f, _)| price_per_l(f)).collect();
        prop_assert!(ranked.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn exploitation_ignores_the_world() {
    use wayfinder_core::agent::execute;
    let mut checked = 0;
    for s in sessions().iter().step_by(11) {
        let state = project(&s.events).unwrap();
        for m in state.modules.iter().filter(|m| m.kind == ModuleKind::Exploitation) {
            let context = state.kb.visible_context(m.subgoal_id);
            let budget = ExplorationBudget::default();
            let with = execute(m, &context, &state.kb, Some(&s.world), budget);
            let without = execute(m, &context, &state.kb, None, budget);
            assert_eq!(with, without, "seed {}", s.seed);
            checked += 1;
        }
    }
    assert!(checked > 0);
}
