//! Operators that derive results from findings already in the knowledge
//! base. Nothing here can see the web.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::AgentError;
use crate::domain::{Action, AttrValue, Cost, Finding, FindingDraft, FindingId, KnowledgeBase, Money, Verb, DERIVED_FROM};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operator {
    /// Cheapest per-litre tier, optionally narrowed to same-day delivery.
    UnitPriceShortlist { same_day: bool },
    UnitPriceRank,
    AttributeFilter { key: String },
    Extremum { key: String, max: bool },
    Summarize,
    Draft,
}

impl Operator {
    /// The verbs the operator executes, in order.
    pub fn plan(&self) -> Vec<Verb> {
        match self {
            Operator::UnitPriceShortlist { same_day } => {
                let mut v = vec![Verb::Compare, Verb::Rank, Verb::Filter];
                if *same_day {
                    v.push(Verb::Filter);
                }
                v
            }
            Operator::UnitPriceRank => vec![Verb::Compare, Verb::Rank],
            Operator::AttributeFilter { .. } => vec![Verb::Filter],
            Operator::Extremum { .. } => vec![Verb::Compare, Verb::Rank],
            Operator::Summarize => vec![Verb::Summarize],
            Operator::Draft => vec![Verb::DraftDocument],
        }
    }
}

const SHIPPING_WORDS: &[&str] = &["delivery", "fast", "fast-shipping", "same-day", "shipping", "quick"];
const MAX_WORDS: &[&str] = &["highest", "largest", "max", "maximum", "most", "biggest"];
const MIN_WORDS: &[&str] = &["lowest", "smallest", "min", "minimum", "least"];

/// Map a directive to an operator over the findings in `kb`.
pub fn parse_operator(directive: &str, kb: &KnowledgeBase) -> Result<Operator, AgentError> {
    let kw = text::keywords(directive);
    let has = |words: &[&str]| words.iter().any(|w| kw.contains(*w));
    if has(&["draft", "write", "compose"]) {
        return Ok(Operator::Draft);
    }
    if has(&["summarize", "summarise", "summary"]) {
        return Ok(Operator::Summarize);
    }
    if has(&["compare", "recommend", "cheapest", "shortlist"]) {
        return Ok(Operator::UnitPriceShortlist { same_day: has(SHIPPING_WORDS) });
    }
    if has(&["rank", "sort"]) {
        return Ok(Operator::UnitPriceRank);
    }
    if kw.contains("filter") {
        return bool_key_in(&kw, kb)
            .map(|key| Operator::AttributeFilter { key })
            .ok_or_else(|| AgentError::UnsupportedOperator(format!("no boolean attribute named in '{directive}'")));
    }
    let max = has(MAX_WORDS);
    if max || has(MIN_WORDS) {
        return numeric_key_in(&kw, kb)
            .map(|key| Operator::Extremum { key, max })
            .ok_or_else(|| AgentError::UnsupportedOperator(format!("no numeric attribute named in '{directive}'")));
    }
    Err(AgentError::UnsupportedOperator(directive.to_string()))
}

/// Attribute keys match when all their `_`-separated parts appear as
/// keywords (or the hyphenated form does).
fn key_named(key: &str, kw: &BTreeSet<String>) -> bool {
    kw.contains(&key.replace('_', "-")) || key.split('_').all(|part| kw.contains(part))
}

fn bool_key_in(kw: &BTreeSet<String>, kb: &KnowledgeBase) -> Option<String> {
    observations(kb)
        .flat_map(|f| f.attributes.iter())
        .find(|(k, v)| matches!(v, AttrValue::Bool(_)) && *k != "confirmation" && key_named(k, kw))
        .map(|(k, _)| k.clone())
}

fn numeric_key_in(kw: &BTreeSet<String>, kb: &KnowledgeBase) -> Option<String> {
    observations(kb)
        .flat_map(|f| f.attributes.iter())
        .find(|(k, v)| matches!(v, AttrValue::Money(_) | AttrValue::Quantity(_)) && key_named(k, kw))
        .map(|(k, _)| k.clone())
}

/// Findings observed on the web (not derived, not form confirmations).
pub fn observations(kb: &KnowledgeBase) -> impl Iterator<Item = &Finding> {
    kb.findings()
        .iter()
        .filter(|f| f.source_page.is_some() && !matches!(f.attributes.get("confirmation"), Some(AttrValue::Bool(true))))
}

/// Price per litre as the exact fraction `minor * 1000 / ml`. Equality is
/// by value, so 2000/2000 equals 1000/1000.
#[derive(Debug, Clone, Copy)]
pub struct UnitPrice {
    pub minor_times_1000: i128,
    pub ml: i128,
}

impl UnitPrice {
    /// Per-litre price rounded half-up to the minor unit.
    pub fn per_liter_minor(self) -> i64 {
        ((2 * self.minor_times_1000 + self.ml) / (2 * self.ml)) as i64
    }
}

impl PartialEq for UnitPrice {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for UnitPrice {}

impl Ord for UnitPrice {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.minor_times_1000 * other.ml).cmp(&(other.minor_times_1000 * self.ml))
    }
}

impl PartialOrd for UnitPrice {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Unit price of a finding with a `price` and a volume `volume`. Volumes must
/// be a whole, positive number of millilitres.
pub fn unit_price(f: &Finding) -> Option<(UnitPrice, &str)> {
    let AttrValue::Money(price) = f.attributes.get("price")? else { return None };
    let AttrValue::Quantity(q) = f.attributes.get("volume")? else { return None };
    let ml = q.milliliters()?;
    if ml <= 0.0 || ml.fract() != 0.0 {
        return None;
    }
    Some((
        UnitPrice { minor_times_1000: price.minor as i128 * 1000, ml: ml as i128 },
        price.currency.as_str(),
    ))
}

/// Priced observations ranked by unit price (ties by id). Mixed currencies
/// cannot be compared.
pub fn rank_by_unit_price(kb: &KnowledgeBase) -> Result<Vec<(&Finding, UnitPrice)>, AgentError> {
    let mut priced = Vec::new();
    let mut currency: Option<&str> = None;
    for f in observations(kb) {
        let Some((up, cur)) = unit_price(f) else { continue };
        match currency {
            None => currency = Some(cur),
            Some(c) if c != cur => {
                return Err(AgentError::UnsupportedOperator(format!("mixed currencies {c} and {cur}")));
            }
            _ => {}
        }
        priced.push((f, up));
    }
    if priced.is_empty() {
        return Err(AgentError::NoFindings);
    }
    priced.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
    Ok(priced)
}

/// Ids of every observation whose unit price equals the minimum.
pub fn cheapest_tier(kb: &KnowledgeBase) -> Result<Vec<FindingId>, AgentError> {
    let ranked = rank_by_unit_price(kb)?;
    let min = ranked[0].1;
    Ok(ranked.iter().take_while(|(_, up)| *up == min).map(|(f, _)| f.id).collect())
}

pub struct ExploitationRun {
    pub findings: Vec<FindingDraft>,
    pub actions: Vec<Action>,
    pub cost: Cost,
    pub notes: Vec<String>,
}

struct Recorder {
    actions: Vec<Action>,
    cost: Cost,
}

impl Recorder {
    fn act(&mut self, verb: Verb, target: &str, params: &[(&str, String)]) {
        self.actions.push(Action {
            ordinal: self.actions.len() as u32,
            verb,
            target: target.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        });
        self.cost.actions_executed += 1;
        self.cost.simulated_time += super::ticks(verb);
    }
}

pub fn run_exploitation(
    directive: &str,
    context: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<ExploitationRun, AgentError> {
    let op = parse_operator(directive, kb)?;
    if observations(kb).next().is_none() {
        return Err(AgentError::NoFindings);
    }
    let mut rec = Recorder { actions: Vec::new(), cost: Cost::default() };
    let mut notes = Vec::new();
    let findings = match op {
        Operator::UnitPriceShortlist { same_day } => {
            let ranked = rank_by_unit_price(kb)?;
            rec.act(Verb::Compare, "findings:priced", &[("count", ranked.len().to_string())]);
            rec.act(Verb::Rank, "findings:priced", &[("by", "unit_price".into())]);
            let min = ranked[0].1;
            let tier: Vec<_> = ranked.iter().take_while(|(_, up)| *up == min).cloned().collect();
            rec.act(Verb::Filter, "findings:ranked", &[("keep", "min_unit_price".into()), ("count", tier.len().to_string())]);
            let mut shortlist = tier.clone();
            if same_day {
                let fast: Vec<_> = tier
                    .iter()
                    .filter(|(f, _)| matches!(f.attributes.get("same_day"), Some(AttrValue::Bool(true))))
                    .cloned()
                    .collect();
                rec.act(Verb::Filter, "findings:cheapest", &[("keep", "same_day".into()), ("count", fast.len().to_string())]);
                if fast.is_empty() {
                    notes.push("no same-day option in the cheapest tier; keeping the whole tier".to_string());
                } else {
                    shortlist = fast;
                }
            }
            shortlist
                .iter()
                .enumerate()
                .map(|(i, (f, up))| priced_derivative(f, *up, i + 1))
                .collect()
        }
        Operator::UnitPriceRank => {
            let ranked = rank_by_unit_price(kb)?;
            rec.act(Verb::Compare, "findings:priced", &[("count", ranked.len().to_string())]);
            rec.act(Verb::Rank, "findings:priced", &[("by", "unit_price".into())]);
            ranked.iter().enumerate().map(|(i, (f, up))| priced_derivative(f, *up, i + 1)).collect()
        }
        Operator::AttributeFilter { key } => {
            let kept: Vec<&Finding> = observations(kb)
                .filter(|f| matches!(f.attributes.get(&key), Some(AttrValue::Bool(true))))
                .collect();
            rec.act(Verb::Filter, "findings:all", &[("keep", key.clone()), ("count", kept.len().to_string())]);
            kept.into_iter().map(copy_derivative).collect()
        }
        Operator::Extremum { key, max } => {
            let mut scored: Vec<(&Finding, f64)> = observations(kb)
                .filter_map(|f| numeric(f.attributes.get(&key)?).map(|v| (f, v)))
                .collect();
            if scored.is_empty() {
                return Err(AgentError::NoFindings);
            }
            rec.act(Verb::Compare, "findings:all", &[("by", key.clone())]);
            scored.sort_by(|a, b| {
                let o = a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal);
                if max { o.reverse() } else { o }.then(a.0.id.cmp(&b.0.id))
            });
            rec.act(Verb::Rank, "findings:all", &[("by", key.clone()), ("order", if max { "desc" } else { "asc" }.into())]);
            let best = scored[0].1;
            scored.iter().take_while(|(_, v)| *v == best).map(|(f, _)| copy_derivative(f)).collect()
        }
        Operator::Summarize => {
            let inputs: Vec<&Finding> = observations(kb).collect();
            rec.act(Verb::Summarize, "findings:all", &[("count", inputs.len().to_string())]);
            let lines: Vec<String> = inputs.iter().map(|f| describe(f)).collect();
            vec![FindingDraft {
                entity: "Summary".to_string(),
                attributes: BTreeMap::from([
                    ("text".to_string(), AttrValue::Text(lines.join("\n"))),
                    (DERIVED_FROM.to_string(), AttrValue::Refs(inputs.iter().map(|f| f.id).collect())),
                ]),
                source_page: None,
            }]
        }
        Operator::Draft => {
            let inputs: Vec<&Finding> = observations(kb).collect();
            rec.act(Verb::DraftDocument, "findings:all", &[("count", inputs.len().to_string())]);
            vec![draft(directive, context, &inputs)]
        }
    };
    Ok(ExploitationRun { findings, actions: rec.actions, cost: rec.cost, notes })
}

fn numeric(v: &AttrValue) -> Option<f64> {
    match v {
        AttrValue::Money(m) => Some(m.minor as f64),
        AttrValue::Quantity(q) => Some(q.value),
        _ => None,
    }
}

fn copy_derivative(f: &Finding) -> FindingDraft {
    let mut attributes = f.attributes.clone();
    attributes.insert(DERIVED_FROM.to_string(), AttrValue::Refs(vec![f.id]));
    FindingDraft { entity: f.entity.clone(), attributes, source_page: None }
}

fn priced_derivative(f: &Finding, up: UnitPrice, rank: usize) -> FindingDraft {
    let mut d = copy_derivative(f);
    let currency = match f.attributes.get("price") {
        Some(AttrValue::Money(m)) => m.currency.clone(),
        _ => unreachable!("priced findings carry a price"),
    };
    d.attributes.insert("unit_price_per_l".to_string(), AttrValue::Money(Money::new(up.per_liter_minor(), currency)));
    d.attributes.insert("rank".to_string(), AttrValue::Text(rank.to_string()));
    d
}

fn describe(f: &Finding) -> String {
    let attrs: Vec<String> = f
        .attributes
        .iter()
        .filter(|(k, _)| k.as_str() != DERIVED_FROM)
        .map(|(k, v)| format!("{}: {v}", k.replace('_', " ")))
        .collect();
    format!("{} ({})", f.entity, attrs.join(", "))
}

fn context_value<'c>(context: &'c [(String, String)], key: &str) -> Option<&'c str> {
    context.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn draft(directive: &str, context: &[(String, String)], inputs: &[&Finding]) -> FindingDraft {
    let formal = context.iter().any(|(_, v)| v.to_lowercase().contains("formal"));
    let is_email = {
        let kw = text::keywords(directive);
        kw.contains("email") || kw.contains("e-mail") || kw.contains("mail")
    };
    let recipient = context_value(context, "recipient");
    let subject = subject_from(directive);
    let bullet_lines: Vec<String> = inputs.iter().map(|f| format!("- {}", describe(f))).collect();
    let (greeting, opener, closing) = if formal {
        (
            format!("Dear {},", recipient.unwrap_or("Sir or Madam")),
            format!("Please find below the {}.", subject.to_lowercase()),
            "Kind regards".to_string(),
        )
    } else {
        (format!("Hi {},", recipient.unwrap_or("there")), "Here is what I found:".to_string(), "Cheers".to_string())
    };
    let body = format!("{greeting}\n\n{opener}\n\n{}\n\n{closing}", bullet_lines.join("\n"));
    let mut attributes = BTreeMap::from([
        ("subject".to_string(), AttrValue::Text(subject)),
        ("body".to_string(), AttrValue::Text(body)),
        ("format".to_string(), AttrValue::Text(if formal { "formal" } else { "casual" }.to_string())),
        (DERIVED_FROM.to_string(), AttrValue::Refs(inputs.iter().map(|f| f.id).collect())),
    ]);
    if let Some(r) = recipient {
        attributes.insert("recipient".to_string(), AttrValue::Text(r.to_string()));
    }
    FindingDraft {
        entity: if is_email { "Email draft" } else { "Document draft" }.to_string(),
        attributes,
        source_page: None,
    }
}

/// "Draft an email to share the X" → "X", capitalised.
fn subject_from(directive: &str) -> String {
    let lower = directive.to_lowercase();
    let rest = ["to share ", " about ", " on ", " of "]
        .iter()
        .find_map(|m| lower.find(m).map(|i| &directive[i + m.len()..]))
        .unwrap_or("findings")
        .trim()
        .trim_end_matches('.');
    let rest = rest.strip_prefix("the ").or_else(|| rest.strip_prefix("The ")).unwrap_or(rest);
    let mut chars = rest.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => "Findings".to_string(),
    }
}
