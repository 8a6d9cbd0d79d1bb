//! Stage 1 text handling: tag hygiene, instruction assembly, language-model
//! output parsing and final prompt assembly.

use std::collections::HashSet;

use crate::error::TypeError;
use crate::types::{PromptBundle, PromptTemplate, TagSet, TAGS_PLACEHOLDER};

/// Substituted for the tag list when no object tags are available.
pub const EMPTY_TAGS_FALLBACK: &str = "objects";

const TAG_DELIMITERS: [char; 2] = ['|', ','];

/// Normalizes raw tagger output into a [`TagSet`].
///
/// Entries are lowercased, split on `|` and `,`, trimmed, and dropped when
/// empty or when any of their whitespace-separated tokens is blacklisted.
/// Tags are otherwise kept as whole phrases.
pub fn sanitize_tags<S: AsRef<str>>(raw: &[S], blacklist: &[String]) -> TagSet {
    let blocked: HashSet<String> = blacklist
        .iter()
        .map(|b| b.trim().to_lowercase())
        .filter(|b| !b.is_empty())
        .collect();
    let mut seen = HashSet::new();
    let mut tags = Vec::new();
    for entry in raw {
        let lowered = entry.as_ref().trim().to_lowercase();
        for piece in lowered.split(TAG_DELIMITERS) {
            let tag = piece.trim();
            if tag.is_empty() || tag.split_whitespace().any(|tok| blocked.contains(tok)) {
                continue;
            }
            if seen.insert(tag.to_string()) {
                tags.push(tag.to_string());
            }
        }
    }
    TagSet::new(tags).expect("sanitized tags satisfy TagSet invariants")
}

/// Ordered union of tag sets; the first occurrence of a tag wins.
pub fn merge_tag_sets(sets: &[TagSet]) -> TagSet {
    let mut seen = HashSet::new();
    let tags = sets
        .iter()
        .flat_map(|s| s.tags().iter())
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect();
    TagSet::new(tags).expect("union of valid tag sets is valid")
}

/// Fills the template's `{tags}` slot with the comma-joined object tags.
pub fn build_iap_prompt(template: &PromptTemplate, tags: &TagSet) -> String {
    let joined = if tags.is_empty() {
        EMPTY_TAGS_FALLBACK.to_string()
    } else {
        tags.tags().join(", ")
    };
    template.text().replacen(TAGS_PLACEHOLDER, &joined, 1)
}

fn strip_list_marker(item: &str) -> &str {
    let mut s = item.trim_start();
    loop {
        let before = s;
        if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
            s = rest.trim_start();
        }
        let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

fn is_word(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_alphabetic())
        && token.chars().all(|c| c.is_ascii_lowercase() || c == '-')
}

/// Extracts short descriptor words from free-form model output.
///
/// Items are split on commas, semicolons and newlines. List markers, quotes
/// and a trailing period are stripped. Only items of one or two tokens made of
/// ASCII letters and hyphens survive. The result is deduplicated and capped
/// at `max_adjectives`.
pub fn parse_llm_output(text: &str, max_adjectives: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in text.split([',', ';', '\n']) {
        if out.len() >= max_adjectives {
            break;
        }
        let item = strip_list_marker(raw)
            .trim()
            .trim_matches([
                '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}',
            ])
            .trim_end_matches('.')
            .trim()
            .to_lowercase();
        let tokens: Vec<&str> = item.split_whitespace().collect();
        if tokens.is_empty() || tokens.len() > 2 || !tokens.iter().all(|t| is_word(t)) {
            continue;
        }
        let item = tokens.join(" ");
        if seen.insert(item.clone()) {
            out.push(item);
        }
    }
    out
}

/// Combines adjectives, fixed prompts and object tags into the detector
/// prompt list, dropping repeats.
pub fn assemble_final_prompt(
    adjectives: &[String],
    fixed: &[String],
    objects: &TagSet,
) -> Result<PromptBundle, TypeError> {
    PromptBundle::new(adjectives.to_vec(), fixed.to_vec(), objects.clone())
}
