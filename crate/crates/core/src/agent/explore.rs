//! Scent-guided navigation over the simulated web.
//!
//! From the site's entry page the agent runs the site search with the
//! directive keywords, then repeatedly follows the unvisited link with the
//! highest scent overlap (ties: lowest page id, or URL for dead links).
//! It stops when no positive-scent link remains or the budget runs out.
//! When gathering, pages that already sourced a finding in the knowledge
//! base are not offered again.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::world::{FieldFill, Form, Link, LinkTarget, Page, SiteGraph};
use super::{ticks, AgentError, ExplorationBudget};
use crate::domain::{Action, AttrValue, Cost, FindingDraft, KnowledgeBase, Verb};
use crate::text;

/// Directive words that turn a visit into a transaction (fill and submit a form).
const TRANSACTION_WORDS: &[&str] = &["book", "buy", "checkout", "order", "pay", "purchase", "send", "submit"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExplorationMode {
    Gather,
    Transaction,
}

/// One greedy link choice and the alternatives it beat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickStep {
    pub chosen: String,
    pub chosen_overlap: u32,
    pub alternatives: Vec<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationRun {
    pub mode: ExplorationMode,
    pub site: String,
    pub findings: Vec<FindingDraft>,
    pub actions: Vec<Action>,
    pub cost: Cost,
    pub notes: Vec<String>,
    /// Budget ran out or a dead link was hit.
    pub partial: bool,
    /// Transaction mode found and submitted a form.
    pub submitted: bool,
    pub steps: Vec<ClickStep>,
}

pub fn mode_for(directive: &str) -> ExplorationMode {
    let kw = text::keywords(directive);
    if TRANSACTION_WORDS.iter().any(|w| kw.contains(*w)) {
        ExplorationMode::Transaction
    } else {
        ExplorationMode::Gather
    }
}

/// Resolve the target site: the first site named in the directive, else the
/// first named in the context values.
pub fn resolve_site<'w>(
    directive: &str,
    context: &[(String, String)],
    world: &'w SiteGraph,
) -> Result<&'w super::world::Site, AgentError> {
    let from_directive = text::tokenize(directive).into_iter().find_map(|t| world.site_by_alias(&t));
    if let Some(site) = from_directive {
        return Ok(site);
    }
    context
        .iter()
        .flat_map(|(_, v)| text::tokenize(v))
        .find_map(|t| world.site_by_alias(&t))
        .ok_or_else(|| AgentError::UnknownDomain(directive.to_string()))
}

/// Scent keywords: directive keywords plus keywords of every visible context value.
pub fn scent_keywords(directive: &str, context: &[(String, String)]) -> BTreeSet<String> {
    let mut kw = text::keywords(directive);
    for (_, v) in context {
        kw.extend(text::keywords(v));
    }
    kw
}

struct Candidate {
    link: Link,
    overlap: u32,
}

struct Walker<'a> {
    world: &'a SiteGraph,
    budget: ExplorationBudget,
    keywords: BTreeSet<String>,
    run: ExplorationRun,
    visited: BTreeSet<String>,
    /// Pages harvested by earlier modules; skipped when gathering.
    known: BTreeSet<String>,
    frontier: Vec<Candidate>,
}

impl Walker<'_> {
    fn actions_left(&self) -> bool {
        self.run.cost.actions_executed < self.budget.max_actions
    }

    fn act(&mut self, verb: Verb, target: &str, params: BTreeMap<String, String>) {
        self.run.actions.push(Action {
            ordinal: self.run.actions.len() as u32,
            verb,
            target: target.to_string(),
            params,
        });
        self.run.cost.actions_executed += 1;
        self.run.cost.simulated_time += ticks(verb);
    }

    fn exhausted(&mut self, what: &str) {
        self.run.partial = true;
        self.run.notes.push(format!("budget exhausted: {what}"));
    }

    fn visit(&mut self, page: &Page) {
        self.visited.insert(page.id.clone());
        self.run.cost.pages_visited += 1;
        self.frontier.retain(|c| c.link.to != LinkTarget::Page(page.id.clone()));
        let links = page.links.clone();
        self.offer(&links);
    }

    fn offer(&mut self, links: &[Link]) {
        for link in links {
            if let LinkTarget::Page(id) = &link.to {
                if self.visited.contains(id) || self.known.contains(id) {
                    continue;
                }
            }
            let overlap = text::overlap(&self.keywords, &link.scent);
            self.frontier.push(Candidate { link: link.clone(), overlap });
        }
    }

    /// Highest positive overlap, ties by lowest key.
    fn pick(&mut self) -> Option<Candidate> {
        let best = self
            .frontier
            .iter()
            .enumerate()
            .filter(|(_, c)| c.overlap > 0)
            .min_by(|(_, a), (_, b)| b.overlap.cmp(&a.overlap).then_with(|| a.link.to.key().cmp(b.link.to.key())))
            .map(|(i, _)| i)?;
        let chosen = self.frontier.remove(best);
        let alternatives = self
            .frontier
            .iter()
            .map(|c| (c.link.to.key().to_string(), c.overlap))
            .collect();
        self.run.steps.push(ClickStep {
            chosen: chosen.link.to.key().to_string(),
            chosen_overlap: chosen.overlap,
            alternatives,
        });
        Some(chosen)
    }

    fn extract(&mut self, page: &Page) -> bool {
        for fact in &page.facts {
            if !self.actions_left() {
                self.exhausted("max_actions");
                return false;
            }
            self.act(Verb::ExtractFact, &page.id, BTreeMap::from([("entity".to_string(), fact.entity.clone())]));
            self.run.findings.push(FindingDraft {
                entity: fact.entity.clone(),
                attributes: fact.attributes.clone(),
                source_page: Some(page.id.clone()),
            });
        }
        true
    }
}

pub fn run_exploration(
    directive: &str,
    context: &[(String, String)],
    kb: &KnowledgeBase,
    world: &SiteGraph,
    budget: ExplorationBudget,
) -> Result<ExplorationRun, AgentError> {
    let site = resolve_site(directive, context, world)?;
    let entry = world.page(&site.entry).ok_or_else(|| AgentError::UnknownDomain(site.name.clone()))?;
    let mode = mode_for(directive);
    let mut w = Walker {
        world,
        budget,
        keywords: scent_keywords(directive, context),
        run: ExplorationRun {
            mode,
            site: site.name.clone(),
            findings: Vec::new(),
            actions: Vec::new(),
            cost: Cost::default(),
            notes: Vec::new(),
            partial: false,
            submitted: false,
            steps: Vec::new(),
        },
        visited: BTreeSet::new(),
        known: match mode {
            ExplorationMode::Gather => kb.findings().iter().filter_map(|f| f.source_page.clone()).collect(),
            ExplorationMode::Transaction => BTreeSet::new(),
        },
        frontier: Vec::new(),
    };

    if budget.max_actions == 0 || budget.max_pages == 0 {
        w.exhausted("nothing allowed");
        return Ok(w.run);
    }
    w.act(Verb::Navigate, &entry.id, BTreeMap::from([("url".to_string(), entry.url.clone())]));
    w.visit(entry);
    if on_page(&mut w, entry, context, kb)? {
        return Ok(w.run);
    }

    if !site.search_index.is_empty() {
        if !w.actions_left() {
            w.exhausted("max_actions");
            return Ok(w.run);
        }
        let query = w.keywords.iter().cloned().collect::<Vec<_>>().join(" ");
        w.act(Verb::Search, &entry.id, BTreeMap::from([("query".to_string(), query)]));
        let results = site.search_index.clone();
        w.offer(&results);
    }

    while let Some(next) = peek_positive(&w) {
        if !w.actions_left() {
            w.exhausted("max_actions");
            break;
        }
        if matches!(next, LinkTarget::Page(_)) && w.run.cost.pages_visited >= w.budget.max_pages {
            w.exhausted("max_pages");
            break;
        }
        let chosen = w.pick().expect("peeked candidate exists");
        let params = BTreeMap::from([
            ("anchor".to_string(), chosen.link.anchor.clone()),
            ("scent_overlap".to_string(), chosen.overlap.to_string()),
        ]);
        match &chosen.link.to {
            LinkTarget::Broken(url) => {
                w.act(Verb::ClickLink, url, params);
                w.run.partial = true;
                w.run.notes.push(format!("broken link: {url}"));
            }
            LinkTarget::Page(id) => {
                w.act(Verb::ClickLink, id, params);
                let page = w.world.page(id).expect("links are validated at load");
                w.visit(page);
                if on_page(&mut w, page, context, kb)? {
                    return Ok(w.run);
                }
            }
        }
    }

    if mode == ExplorationMode::Transaction && !w.run.submitted {
        w.run.notes.push("no matching form was reachable".to_string());
    }
    Ok(w.run)
}

fn peek_positive(w: &Walker<'_>) -> Option<LinkTarget> {
    w.frontier
        .iter()
        .filter(|c| c.overlap > 0)
        .min_by(|a, b| b.overlap.cmp(&a.overlap).then_with(|| a.link.to.key().cmp(b.link.to.key())))
        .map(|c| c.link.to.clone())
}

/// Handle a freshly visited page. Returns true when the run is finished.
fn on_page(
    w: &mut Walker<'_>,
    page: &Page,
    context: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<bool, AgentError> {
    match w.run.mode {
        ExplorationMode::Gather => Ok(!w.extract(page)),
        ExplorationMode::Transaction => {
            let Some(form) = pick_form(page, &w.keywords) else {
                return Ok(false);
            };
            submit(w, page, form, context, kb)?;
            Ok(true)
        }
    }
}

fn pick_form<'p>(page: &'p Page, keywords: &BTreeSet<String>) -> Option<&'p Form> {
    page.forms
        .iter()
        .max_by(|a, b| {
            text::overlap(keywords, &a.scent)
                .cmp(&text::overlap(keywords, &b.scent))
                .then_with(|| b.id.cmp(&a.id))
        })
}

fn submit(
    w: &mut Walker<'_>,
    page: &Page,
    form: &Form,
    context: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<(), AgentError> {
    let mut values = BTreeMap::new();
    for field in &form.fields {
        let value = match &field.fill {
            FieldFill::Literal(v) => Some(v.clone()),
            FieldFill::PageEntity => Some(page.facts.first().map(|f| f.entity.clone()).unwrap_or_else(|| page.title.clone())),
            FieldFill::Context(key) => context.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone()),
            FieldFill::Draft(attr) => kb.findings().iter().rev().find_map(|f| f.text(attr).map(str::to_owned)),
        };
        let value = value.ok_or_else(|| AgentError::MissingFormValue { form: form.id.clone(), field: field.name.clone() })?;
        values.insert(field.name.clone(), value);
    }
    let target = format!("{}#{}", page.id, form.id);
    for (verb, params) in [(Verb::FillForm, values.clone()), (Verb::SubmitForm, BTreeMap::new())] {
        if !w.actions_left() {
            w.exhausted("max_actions");
            return Ok(());
        }
        w.act(verb, &target, params);
    }
    let mut attributes: BTreeMap<String, AttrValue> = form
        .effect
        .attributes
        .iter()
        .map(|(k, v)| {
            let v = match v {
                AttrValue::Text(t) => AttrValue::Text(fill(t, &values)),
                other => other.clone(),
            };
            (k.clone(), v)
        })
        .collect();
    attributes.insert("confirmation".to_string(), AttrValue::Bool(true));
    w.run.findings.push(FindingDraft {
        entity: fill(&form.effect.entity, &values),
        attributes,
        source_page: Some(page.id.clone()),
    });
    w.run.submitted = true;
    Ok(())
}

fn fill(template: &str, values: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}
