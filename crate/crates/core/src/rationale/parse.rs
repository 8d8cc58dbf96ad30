//! Parsers for the three structured LLM responses.
//!
//! Responses follow the loose brace/bracket formats the prompts request,
//! with single or double quotes and unquoted keys. Parsing never trusts
//! the model: probability vectors are renormalized, keywords are grounded
//! against the source text, and neighbor ids are checked against the true
//! candidate set.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

fn probs_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)probabilities\s*:?\s*\[([^\]]*)\]").unwrap())
}

fn category_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)category\s*:?\s*['"]?([^'"}\n\r]+)"#).unwrap())
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\]]*)\]").unwrap())
}

fn keylink_entry_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)node\s*(\d+)\s*:\s*\[([^\]]*)\]").unwrap())
}

fn split_items(list: &str) -> Vec<String> {
    list.split(',')
        .map(|w| w.trim().trim_matches(|c| c == '\'' || c == '"').trim())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Case-insensitive class lookup: exact name match first, then the name
/// sharing the most tokens with the answer.
fn match_class(answer: &str, class_names: &[String]) -> Option<usize> {
    let answer_lower = answer.trim().to_lowercase();
    if let Some(i) = class_names
        .iter()
        .position(|c| c.to_lowercase() == answer_lower)
    {
        return Some(i);
    }
    let answer_tokens: BTreeSet<String> = crate::encoder::tokenize(&answer_lower)
        .into_iter()
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, name) in class_names.iter().enumerate() {
        let overlap = crate::encoder::tokenize(&name.to_lowercase())
            .iter()
            .filter(|t| answer_tokens.contains(*t))
            .count();
        if overlap > 0 && best.map(|(_, b)| overlap > b).unwrap_or(true) {
            best = Some((i, overlap));
        }
    }
    best.map(|(i, _)| i)
}

/// Extracts `(pseudo_label, soft_label)` from a label-step response.
///
/// The probability vector is clamped at zero and renormalized; an all-zero
/// vector becomes one-hot on the category. The categorical answer wins
/// over the argmax of the vector when they disagree.
pub fn parse_label_response(raw: &str, class_names: &[String]) -> Result<(usize, Vec<f64>)> {
    let class_count = class_names.len();
    let caps = probs_re()
        .captures(raw)
        .ok_or_else(|| Error::ResponseParse("no probability list found".into()))?;
    let mut probs = Vec::new();
    for item in split_items(&caps[1]) {
        let v: f64 = item
            .parse()
            .map_err(|_| Error::ResponseParse(format!("bad probability {item:?}")))?;
        probs.push(if v.is_finite() { v.max(0.0) } else { 0.0 });
    }
    if probs.len() != class_count {
        return Err(Error::ResponseParse(format!(
            "expected {class_count} probabilities, got {}",
            probs.len()
        )));
    }

    let category_raw = category_re()
        .captures(raw)
        .map(|c| c[1].trim().to_string())
        .ok_or_else(|| Error::ResponseParse("no category found".into()))?;
    let category = match_class(&category_raw, class_names)
        .ok_or_else(|| Error::ResponseParse(format!("unrecognized category {category_raw:?}")))?;

    let sum: f64 = probs.iter().sum();
    let soft: Vec<f64> = if sum > 0.0 {
        probs.iter().map(|p| p / sum).collect()
    } else {
        log::warn!("all-zero probability vector; using one-hot on category {category}");
        (0..class_count)
            .map(|i| if i == category { 1.0 } else { 0.0 })
            .collect()
    };

    let argmax = soft
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if argmax != category {
        log::warn!(
            "categorical answer {category} disagrees with soft-label argmax {argmax}; keeping the categorical answer"
        );
    }
    Ok((category, soft))
}

/// Extracts the keyword list from a keyword-step response. Words absent
/// from `node_text` (case-insensitive) are dropped; the result is
/// deduplicated with order preserved.
pub fn parse_keyword_response(raw: &str, node_text: &str) -> Result<Vec<String>> {
    let caps = bracket_re()
        .captures(raw)
        .ok_or_else(|| Error::ResponseParse("no bracketed keyword list found".into()))?;
    let text_lower = node_text.to_lowercase();
    let mut seen_lower = BTreeSet::new();
    let mut out = Vec::new();
    for word in split_items(&caps[1]) {
        let lower = word.to_lowercase();
        if !text_lower.contains(&lower) {
            log::warn!("dropping keyword {word:?}: not present in the node text");
            continue;
        }
        if seen_lower.insert(lower) {
            out.push(word);
        }
    }
    Ok(out)
}

/// Extracts `(key_neighbors, messages)` from a key-link response. Ids not
/// in `neighbor_ids` are dropped; each message list is capped at
/// `message_cap` words. An empty mapping `{}` is valid and yields an empty
/// key set.
pub fn parse_keylink_response(
    raw: &str,
    neighbor_ids: &BTreeSet<usize>,
    message_cap: usize,
) -> Result<(Vec<usize>, Vec<(usize, Vec<String>)>)> {
    let open = raw.find('{');
    let close = raw.rfind('}');
    let body = match (open, close) {
        (Some(o), Some(c)) if o < c => &raw[o + 1..c],
        _ => return Err(Error::ResponseParse("no braced mapping found".into())),
    };
    let mut neighbors = Vec::new();
    let mut messages = Vec::new();
    for caps in keylink_entry_re().captures_iter(body) {
        let id: usize = caps[1]
            .parse()
            .map_err(|_| Error::ResponseParse(format!("bad neighbor id {:?}", &caps[1])))?;
        if !neighbor_ids.contains(&id) {
            log::warn!("dropping key link to {id}: not a candidate neighbor");
            continue;
        }
        if neighbors.contains(&id) {
            continue;
        }
        let mut words = split_items(&caps[2]);
        words.truncate(message_cap);
        neighbors.push(id);
        messages.push((id, words));
    }
    if neighbors.is_empty() && !body.trim().is_empty() && keylink_entry_re().find(body).is_none() {
        return Err(Error::ResponseParse(
            "mapping body has no parseable Node entries".into(),
        ));
    }
    neighbors.sort_unstable();
    messages.sort_by_key(|(id, _)| *id);
    Ok((neighbors, messages))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["Neural Networks".into(), "Generic Algorithms".into()]
    }

    #[test]
    fn label_response_from_the_documented_format() {
        let raw = "{Probabilities: [0.05, 0.85], Category: 'Generic Algorithm'}";
        let (pseudo, soft) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(pseudo, 1, "token-overlap fallback maps the singular form");
        assert!((soft[1] - 0.85 / 0.90).abs() < 1e-12);
        assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_answer_wins_ties() {
        let raw = "{Probabilities: [0.5, 0.5], Category: 'Neural Networks'}";
        let (pseudo, _) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(pseudo, 0);
        let raw = "{Probabilities: [0.5, 0.5], Category: 'Generic Algorithms'}";
        let (pseudo, _) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(pseudo, 1);
    }

    #[test]
    fn unnormalized_vector_is_renormalized() {
        let raw = "{Probabilities: [2, 2], Category: 'Neural Networks'}";
        let (_, soft) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(soft, vec![0.5, 0.5]);
    }

    #[test]
    fn negative_entries_clamp_to_zero() {
        let raw = "{Probabilities: [-1, 0.5], Category: 'Generic Algorithms'}";
        let (_, soft) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(soft, vec![0.0, 1.0]);
    }

    #[test]
    fn all_zero_vector_becomes_one_hot_on_category() {
        let raw = "{Probabilities: [0, 0], Category: 'Neural Networks'}";
        let (pseudo, soft) = parse_label_response(raw, &classes()).unwrap();
        assert_eq!(pseudo, 0);
        assert_eq!(soft, vec![1.0, 0.0]);
    }

    #[test]
    fn wrong_vector_length_is_an_error() {
        let raw = "{Probabilities: [0.2, 0.3, 0.5], Category: 'Neural Networks'}";
        assert!(parse_label_response(raw, &classes()).is_err());
    }

    #[test]
    fn missing_category_is_an_error() {
        assert!(parse_label_response("{Probabilities: [1, 0]}", &classes()).is_err());
        let raw = "{Probabilities: [1, 0], Category: 'Quantum Chromodynamics'}";
        assert!(parse_label_response(raw, &classes()).is_err());
    }

    #[test]
    fn keyword_response_from_the_documented_format() {
        let kws = parse_keyword_response(
            "[Algorithm, Optimization, Bayesian]",
            "A Bayesian Algorithm for Optimization problems",
        )
        .unwrap();
        assert_eq!(kws, vec!["Algorithm", "Optimization", "Bayesian"]);
    }

    #[test]
    fn ungrounded_keywords_are_dropped() {
        let kws =
            parse_keyword_response("[Algorithm, Zeppelin]", "an algorithm for planning").unwrap();
        assert_eq!(kws, vec!["Algorithm"]);
    }

    #[test]
    fn empty_keyword_list_is_valid() {
        assert!(parse_keyword_response("[]", "whatever").unwrap().is_empty());
    }

    #[test]
    fn unparseable_keyword_list_is_an_error() {
        assert!(parse_keyword_response("no brackets here", "text").is_err());
    }

    #[test]
    fn keyword_dedup_preserves_order() {
        let kws = parse_keyword_response("[graph, Learning, graph]", "graph learning").unwrap();
        assert_eq!(kws, vec!["graph", "Learning"]);
    }

    #[test]
    fn keylink_response_from_the_documented_format() {
        let ids: BTreeSet<usize> = [0, 248].into_iter().collect();
        let (nbrs, msgs) = parse_keylink_response(
            "{Node 0: ['Bayesian', 'Learning'], Node 248: ['Optimize', 'Convex']}",
            &ids,
            5,
        )
        .unwrap();
        assert_eq!(nbrs, vec![0, 248]);
        assert_eq!(
            msgs,
            vec![
                (0, vec!["Bayesian".to_string(), "Learning".to_string()]),
                (248, vec!["Optimize".to_string(), "Convex".to_string()]),
            ]
        );
    }

    #[test]
    fn alien_neighbor_ids_are_dropped() {
        let ids: BTreeSet<usize> = [3].into_iter().collect();
        let (nbrs, msgs) =
            parse_keylink_response("{Node 3: [x], Node 99: [y]}", &ids, 5).unwrap();
        assert_eq!(nbrs, vec![3]);
        assert_eq!(msgs.len(), 1);
    }

    #[test]
    fn empty_mapping_is_valid() {
        let ids: BTreeSet<usize> = [1].into_iter().collect();
        let (nbrs, msgs) = parse_keylink_response("{}", &ids, 5).unwrap();
        assert!(nbrs.is_empty());
        assert!(msgs.is_empty());
    }

    #[test]
    fn messages_are_capped() {
        let ids: BTreeSet<usize> = [1].into_iter().collect();
        let (_, msgs) =
            parse_keylink_response("{Node 1: [a, b, c, d]}", &ids, 2).unwrap();
        assert_eq!(msgs[0].1.len(), 2);
    }

    #[test]
    fn garbage_keylink_is_an_error() {
        let ids: BTreeSet<usize> = [1].into_iter().collect();
        assert!(parse_keylink_response("not a mapping", &ids, 5).is_err());
        assert!(parse_keylink_response("{complete nonsense}", &ids, 5).is_err());
    }
}
