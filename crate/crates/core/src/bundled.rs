//! Corpora and scenarios shipped with the crate.

use crate::agent::world::{CorpusError, SiteGraph};
use crate::replay::{Scenario, ScenarioError};

pub const CORPORA: &[(&str, &str)] = &[
    ("milk", include_str!("../data/corpus/milk.jsonl")),
    ("market", include_str!("../data/corpus/market.jsonl")),
    ("broken", include_str!("../data/corpus/broken.jsonl")),
];

pub const SCENARIOS: &[(&str, &str)] = &[
    ("milk", include_str!("../data/scenarios/milk.jsonl")),
    ("market", include_str!("../data/scenarios/market.jsonl")),
    ("broken", include_str!("../data/scenarios/broken.jsonl")),
];

pub fn corpus_text(name: &str) -> Option<&'static str> {
    CORPORA.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn scenario_text(name: &str) -> Option<&'static str> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn corpus(name: &str) -> Option<Result<SiteGraph, CorpusError>> {
    corpus_text(name).map(SiteGraph::parse)
}

pub fn scenario(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    scenario_text(name).map(Scenario::parse)
}
