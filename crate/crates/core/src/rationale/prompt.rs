//! Prompt construction for the three annotation steps.
//!
//! Rendered text is a pure function of (kind, node, graph view, class
//! names, template version); the cache keys on it, so any wording change
//! must bump [`TEMPLATE_VERSION`].

use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// Bump when any prompt wording changes; stale cache entries stop matching.
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Label,
    Keyword,
    Keylink,
}

/// A rendered prompt ready to send or hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub kind: PromptKind,
    pub node: usize,
    pub rendered_text: String,
    pub template_version: String,
    /// Characters divided by four, rounded up.
    pub token_estimate: usize,
}

impl PromptRecord {
    fn new(kind: PromptKind, node: usize, rendered_text: String) -> Self {
        let token_estimate = rendered_text.chars().count().div_ceil(4);
        PromptRecord {
            kind,
            node,
            rendered_text,
            template_version: TEMPLATE_VERSION.to_string(),
            token_estimate,
        }
    }

    /// Same prompt with a repair instruction appended after a parse
    /// failure; hashes (and caches) separately from the original.
    pub fn with_repair(&self, parse_error: &str) -> PromptRecord {
        let rendered = format!(
            "{}\nYour previous response could not be parsed ({parse_error}). \
             Answer again using exactly the required format.",
            self.rendered_text
        );
        PromptRecord::new(self.kind, self.node, rendered)
    }
}

fn category_list(classes: &[String]) -> String {
    format!("[{}]", classes.join(", "))
}

fn neighbor_section(neighbors: &[(usize, String)]) -> String {
    let mut s = String::new();
    for (id, text) in neighbors {
        let _ = write!(s, "\nNode {id}: {text}");
    }
    s
}

/// Step 1: ask for logits-like class probabilities and a final category,
/// from the node text and its capped neighbor texts. Isolated nodes omit
/// the neighbor section entirely.
pub fn build_label_prompt(
    node: usize,
    node_text: &str,
    neighbors: &[(usize, String)],
    classes: &[String],
) -> PromptRecord {
    let mut text = format!(
        "We want to classify a paper into the following categories: {}. \
         Please identify logits-like probabilities for each class and give your final classification. \
         The paper is: {node_text}",
        category_list(classes)
    );
    if !neighbors.is_empty() {
        let _ = write!(
            text,
            "\nIts neighbors are:{}",
            neighbor_section(neighbors)
        );
    }
    let _ = write!(
        text,
        "\nRespond with exactly one line of the form \
         {{Probabilities: [p0, p1, ...], Category: '<category>'}} where the list has one \
         probability per category in the order given above."
    );
    PromptRecord::new(PromptKind::Label, node, text)
}

/// Step 2: ask for at most `cap` words from the node text that support the
/// classification to the pseudo-label's class name.
pub fn build_keyword_prompt(
    node: usize,
    node_text: &str,
    pseudo_class_name: &str,
    classes: &[String],
    cap: usize,
) -> PromptRecord {
    let word = if cap == 1 { "word" } else { "words" };
    let text = format!(
        "We want to classify a paper into the following categories: {}. \
         Please identify at most {cap} {word} in the provided text that help most with the \
         classification to '{pseudo_class_name}'. \
         The paper is: {node_text}\n\
         Respond with exactly one line of the form [word1, word2, ...] using words copied \
         verbatim from the text.",
        category_list(classes)
    );
    PromptRecord::new(PromptKind::Keyword, node, text)
}

/// Step 3: ask for an important-neighbor subset and at most `cap` message
/// keywords per chosen neighbor; neighbor ids are graph node indices.
pub fn build_keylink_prompt(
    node: usize,
    node_text: &str,
    neighbors: &[(usize, String)],
    pseudo_class_name: &str,
    classes: &[String],
    cap: usize,
) -> PromptRecord {
    let text = format!(
        "We want to classify a paper in a citation network to the following categories: {}. \
         Please identify a subset of important neighbors and at most {cap} keywords of each \
         important neighbor that help most to classify the central node into the category of \
         '{pseudo_class_name}'. \
         The paper is: {node_text}\nIts neighbors are:{}\n\
         Respond with exactly one line of the form \
         {{Node <id>: ['word', ...], ...}} naming only neighbor ids listed above, or {{}} if \
         none is important.",
        category_list(classes),
        neighbor_section(neighbors)
    );
    PromptRecord::new(PromptKind::Keylink, node, text)
}
