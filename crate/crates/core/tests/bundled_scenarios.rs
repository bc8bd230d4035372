use std::sync::Arc;

use wayfinder_core::bundled;
use wayfinder_core::event::EventKind;
use wayfinder_core::replay::{run_scripted, ReplayReport, Scenario};
use wayfinder_core::{ExplorationBudget, FixedClock};

fn replay(name: &str) -> ReplayReport {
    let scenario = bundled::scenario(name).unwrap().unwrap();
    let world = bundled::corpus(scenario.corpus.as_deref().unwrap_or(name)).unwrap().unwrap();
    run_scripted(&scenario, Arc::new(world), ExplorationBudget::default(), Arc::new(FixedClock::default()))
}

fn assert_passes(name: &str) -> ReplayReport {
    let r = replay(name);
    if let Some(d) = &r.divergence {
        panic!("{name}: {d}\n--- transcript ---\n{}", r.transcript);
    }
    r
}

#[test]
fn milk_replays() {
    let r = assert_passes("milk");
    println!("{}", r.transcript);
}

#[test]
fn market_replays() {
    let r = assert_passes("market");
    println!("{}", r.transcript);
}

#[test]
fn broken_replays() {
    let r = assert_passes("broken");
    println!("{}", r.transcript);
}

fn tampered(name: &str, from: &str, to: &str) -> ReplayReport {
    let text = bundled::scenario_text(name).unwrap().replacen(from, to, 1);
    let scenario = Scenario::parse(&text).unwrap();
    let world = bundled::corpus(scenario.corpus.as_deref().unwrap()).unwrap().unwrap();
    run_scripted(&scenario, Arc::new(world), ExplorationBudget::default(), Arc::new(FixedClock::default()))
}

#[test]
fn a_wrong_expected_kind_diverges_at_module_generation() {
    let r = tampered("milk", r#""nth": 3, "match": {"module": {"kind": "Exploitation"}}"#, r#""nth": 3, "match": {"module": {"kind": "Exploration"}}"#);
    let d = r.divergence.expect("tampered expectation must fail");
    let seq = d.seq.expect("divergence names a seq");
    assert_eq!(r.events[seq as usize].kind(), EventKind::ModuleGenerated, "{d}");
}

#[test]
fn a_wrong_final_module_kind_list_diverges() {
    let r = tampered("milk", r#""module_kinds": ["E", "E", "X", "E"]"#, r#""module_kinds": ["E", "E", "E", "E"]"#);
    assert!(r.divergence.is_some());
}

#[test]
fn unrecognised_feedback_falls_through_and_diverges() {
    let r = tampered("milk", r#""text": "Yes, search on Walmart too""#, r#""text": "Yes, search on Target too""#);
    let d = r.divergence.expect("module 2 directive is pinned");
    assert_eq!(r.events[d.seq.unwrap() as usize].kind(), EventKind::ModuleGenerated, "{d}");
    assert_eq!(r.state.modules[1].directive, "Yes, search on Target too");
}

#[test]
fn accepting_a_suggestion_that_was_never_offered_diverges() {
    let r = tampered("milk", r#""accept": "The purchase is now complete, so I will end the task""#, r#""accept": "Shall we stop?""#);
    let d = r.divergence.unwrap();
    assert!(d.at.starts_with("step"), "{d}");
}

#[test]
fn an_interrupted_report_is_finished_from_the_log() {
    let full = assert_passes("milk").events;
    let script = bundled::scenario("milk").unwrap().unwrap().script;
    let planner = wayfinder_core::ScriptedPlanner::new(script);
    for cut_after in [EventKind::ModuleCompleted, EventKind::ResultsPresented] {
        let cut = full.iter().position(|e| e.kind() == cut_after).unwrap();
        let mut s = wayfinder_core::Session::restore("s", full[..=cut].to_vec(), Arc::new(FixedClock::default())).unwrap();
        assert!(s.needs_report());
        s.report(&planner).unwrap();
        assert!(!s.needs_report());
        let rebuilt: Vec<_> = s.events().iter().map(|e| (e.kind(), e.body.clone())).collect();
        let expected: Vec<_> = full[..rebuilt.len()].iter().map(|e| (e.kind(), e.body.clone())).collect();
        assert_eq!(rebuilt, expected);
        assert_eq!(s.events().last().unwrap().kind(), EventKind::SuggestionsOffered);
    }
    let done = wayfinder_core::Session::restore("s", full.clone(), Arc::new(FixedClock::default())).unwrap();
    assert!(!done.needs_report());
}
