//! The simulated web: sites, pages, scent-labelled links, extractable facts
//! and forms. Loaded from a line-oriented corpus file:
//!
//! ```text
//! {"record":"site","name":"Amazon","domain":"amazon.com","entry":"amazon/home","search_index":[LINK...]}
//! {"record":"page","id":"amazon/home","url":"https://amazon.com/","title":"Amazon","scent":[..],"facts":[..],"links":[LINK...],"forms":[..]}
//! ```
//!
//! A LINK is `{"target": PAGE_ID, "anchor": TEXT, "scent": [TAG...]}` or,
//! for a dead link, `{"broken": URL, "anchor": TEXT, "scent": [TAG...]}`.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AttrValue;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTarget {
    #[serde(rename = "target")]
    Page(String),
    Broken(String),
}

impl LinkTarget {
    /// Page id, or the dead URL; used for tie-breaking.
    pub fn key(&self) -> &str {
        match self {
            LinkTarget::Page(id) | LinkTarget::Broken(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    #[serde(flatten)]
    pub to: LinkTarget,
    pub anchor: String,
    #[serde(default)]
    pub scent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTemplate {
    pub entity: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldFill {
    /// Value of a visible context item.
    Context(String),
    /// Entity of the page's first fact (or the page title).
    PageEntity,
    Literal(String),
    /// Text attribute of the most recent finding that has it.
    Draft(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormField {
    pub name: String,
    pub fill: FieldFill,
}

/// Submitting a form emits `effect` with `{field}` placeholders filled in.
/// Nothing in the world changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Form {
    pub id: String,
    #[serde(default)]
    pub scent: Vec<String>,
    pub fields: Vec<FormField>,
    pub effect: FactTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub id: String,
    pub url: String,
    pub title: String,
    #[serde(default)]
    pub scent: Vec<String>,
    #[serde(default)]
    pub facts: Vec<FactTemplate>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub forms: Vec<Form>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub domain: String,
    pub entry: String,
    /// Results returned by the site's search box, as links.
    #[serde(default)]
    pub search_index: Vec<Link>,
}

impl Site {
    /// Tokens that name this site in a directive: the name and the domain
    /// with and without its TLD.
    pub fn aliases(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        out.insert(self.name.to_lowercase());
        let domain = self.domain.to_lowercase();
        if let Some((stem, _)) = domain.split_once('.') {
            out.insert(stem.to_string());
        }
        out.insert(domain);
        out
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("duplicate page id {0}")]
    DuplicatePage(String),
    #[error("duplicate site {0}")]
    DuplicateSite(String),
    #[error("{from} links to unknown page {target}")]
    DanglingLink { from: String, target: String },
    #[error("site {site} has unknown entry page {entry}")]
    UnknownEntry { site: String, entry: String },
    #[error("corpus defines no sites")]
    NoSites,
}

#[derive(Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CorpusRecord {
    Site(Site),
    Page(Page),
}

/// Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteGraph {
    pub sites: Vec<Site>,
    pub pages: BTreeMap<String, Page>,
}

impl SiteGraph {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut sites = Vec::new();
        let mut pages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match serde_json::from_str(line).map_err(|source| CorpusError::Parse { line: i + 1, source })? {
                CorpusRecord::Site(s) => sites.push(s),
                CorpusRecord::Page(p) => pages.push(p),
            }
        }
        Self::new(sites, pages)
    }

    pub fn new(sites: Vec<Site>, pages: Vec<Page>) -> Result<Self, CorpusError> {
        if sites.is_empty() {
            return Err(CorpusError::NoSites);
        }
        let mut map = BTreeMap::new();
        for p in pages {
            if map.contains_key(&p.id) {
                return Err(CorpusError::DuplicatePage(p.id));
            }
            map.insert(p.id.clone(), p);
        }
        let mut names = BTreeSet::new();
        for s in &sites {
            if !names.insert(s.name.to_lowercase()) {
                return Err(CorpusError::DuplicateSite(s.name.clone()));
            }
            if !map.contains_key(&s.entry) {
                return Err(CorpusError::UnknownEntry { site: s.name.clone(), entry: s.entry.clone() });
            }
            check_links(&map, &format!("site {}", s.name), &s.search_index)?;
        }
        for p in map.values() {
            check_links(&map, &p.id, &p.links)?;
        }
        Ok(SiteGraph { sites, pages: map })
    }

    pub fn page(&self, id: &str) -> Option<&Page> {
        self.pages.get(id)
    }

    pub fn site_by_alias(&self, token: &str) -> Option<&Site> {
        let token = token.to_lowercase();
        self.sites.iter().find(|s| s.aliases().contains(&token))
    }
}

fn check_links(pages: &BTreeMap<String, Page>, from: &str, links: &[Link]) -> Result<(), CorpusError> {
    for l in links {
        if let LinkTarget::Page(t) = &l.to {
            if !pages.contains_key(t) {
                return Err(CorpusError::DanglingLink { from: from.to_string(), target: t.clone() });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
# two pages, one dead link
{"record":"site","name":"Shop","domain":"shop.test","entry":"home","search_index":[{"target":"p1","anchor":"P1","scent":["milk"]}]}
{"record":"page","id":"home","url":"https://shop.test/","title":"Shop","links":[{"broken":"https://shop.test/gone","anchor":"Gone","scent":["milk"]}]}
{"record":"page","id":"p1","url":"https://shop.test/p1","title":"P1","facts":[{"entity":"P1","attributes":{"price":{"money":{"minor":500,"currency":"USD"}}}}]}
"#;

    #[test]
    fn parses_and_resolves() {
        let g = SiteGraph::parse(TINY).unwrap();
        assert_eq!(g.pages.len(), 2);
        assert_eq!(g.site_by_alias("shop").unwrap().entry, "home");
        assert_eq!(g.site_by_alias("SHOP.test").unwrap().name, "Shop");
        assert!(matches!(g.pages["home"].links[0].to, LinkTarget::Broken(_)));
    }

    #[test]
    fn dangling_links_are_rejected() {
        let bad = TINY.replace(r#""target":"p1""#, r#""target":"p9""#);
        assert!(matches!(SiteGraph::parse(&bad), Err(CorpusError::DanglingLink { .. })));
    }

    #[test]
    fn duplicate_pages_are_rejected() {
        let dup = format!("{TINY}\n{}", TINY.lines().last().unwrap());
        assert!(matches!(SiteGraph::parse(&dup), Err(CorpusError::DuplicatePage(_))));
    }
}
