//! Keyword handling shared by the scripted planner and the simulated agent.

use std::collections::BTreeSet;

use crate::domain::ModuleKind;

const STOPWORDS: &[&str] = &[
    "a", "all", "already", "also", "an", "and", "any", "are", "as", "at", "be", "by", "do", "for",
    "from", "i", "in", "into", "is", "it", "its", "me", "my", "of", "on", "or", "our", "please",
    "so", "some", "that", "the", "their", "them", "these", "this", "those", "to", "too", "us",
    "using", "via", "we", "what", "which", "with", "yes", "you", "your",
];

/// Verbs that derive results from collected findings.
pub const EXPLOITATION_VERBS: &[&str] = &[
    "analyse", "analyze", "choose", "compare", "compose", "draft", "evaluate", "filter", "rank",
    "recommend", "shortlist", "sort", "summarise", "summarize", "write",
];

/// Verbs that require interacting with the web.
pub const EXPLORATION_VERBS: &[&str] = &[
    "browse", "buy", "check", "enter", "explore", "fill", "find", "go", "investigate", "look",
    "navigate", "open", "order", "purchase", "research", "search", "send", "submit", "visit",
];

/// Lower-cased tokens. Hyphens, `@` and interior dots stay inside tokens so
/// `fat-free` and `abc@abc.com` survive intact.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | ':' | '!' | '?' | '(' | ')' | '"' | '/'))
        .map(|t| t.trim_matches(|c: char| matches!(c, '.' | '\'' | '`' | '-' | '*')))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Tokens minus stopwords, as a set.
pub fn keywords(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Collapse runs of whitespace and trim.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Kind implied by the first recognised verb; exploration when none is found.
pub fn infer_kind(directive: &str) -> ModuleKind {
    for token in tokenize(directive) {
        if EXPLOITATION_VERBS.contains(&token.as_str()) {
            return ModuleKind::Exploitation;
        }
        if EXPLORATION_VERBS.contains(&token.as_str()) {
            return ModuleKind::Exploration;
        }
    }
    ModuleKind::Exploration
}

/// Size of the case-folded intersection.
pub fn overlap<'a>(keywords: &BTreeSet<String>, labels: impl IntoIterator<Item = &'a String>) -> u32 {
    let labels: BTreeSet<String> = labels.into_iter().map(|l| l.to_lowercase()).collect();
    labels.iter().filter(|l| keywords.contains(*l)).count() as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_are_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn tokens_keep_hyphens_and_addresses() {
        assert_eq!(
            tokenize("Search for low-priced, fast-shipping fat-free milk on Amazon."),
            vec!["search", "for", "low-priced", "fast-shipping", "fat-free", "milk", "on", "amazon"]
        );
        assert_eq!(tokenize("Send the draft to abc@abc.com by Gmail"), vec![
            "send", "the", "draft", "to", "abc@abc.com", "by", "gmail"
        ]);
    }

    #[test]
    fn kind_follows_first_verb() {
        assert_eq!(infer_kind("Compare the products already found"), ModuleKind::Exploitation);
        assert_eq!(infer_kind("Yes, search on Walmart too"), ModuleKind::Exploration);
        assert_eq!(infer_kind("Investigate other brands of milk"), ModuleKind::Exploration);
        assert_eq!(infer_kind("Draft an initial email"), ModuleKind::Exploitation);
        assert_eq!(infer_kind("Send the email"), ModuleKind::Exploration);
        assert_eq!(infer_kind("milk"), ModuleKind::Exploration);
    }

    #[test]
    fn overlap_is_case_folded() {
        let kw = keywords("fat-free milk");
        let labels = vec!["Milk".to_string(), "FAT-FREE".to_string(), "aaa".to_string()];
        assert_eq!(overlap(&kw, &labels), 2);
    }
}
