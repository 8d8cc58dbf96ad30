//! LLM clients: a live chat-completion endpoint and the deterministic
//! offline oracle. Cache-only operation is handled by the annotator (no
//! client at all), so replay never constructs a client.

use serde::Deserialize;
use serde_json::json;

use super::prompt::{PromptKind, PromptRecord};
use super::{oracle_annotate, NodeRationale};
use crate::error::{Error, Result};
use crate::graph::{neighbor_texts, SyntheticSpec, TextGraph};

pub trait LlmClient: Send + Sync {
    /// Model identifier; part of the cache key.
    fn model_name(&self) -> &str;
    /// Completes a prompt, returning the raw response text.
    fn complete(&self, prompt: &PromptRecord) -> Result<String>;
}

/// Chat-completion HTTP client. The API key is read from an environment
/// variable at call time and never stored in configs.
pub struct LiveClient {
    base_url: String,
    model: String,
    api_key_env: String,
    temperature: f64,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn new(base_url: &str, model: &str, api_key_env: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(LiveClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            temperature: 0.0,
            http,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl LlmClient for LiveClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &PromptRecord) -> Result<String> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            Error::Client(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))
        })?;
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt.rendered_text}],
        });
        let resp = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(key)
            .json(&body)
            .send()
            .map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("HTTP {}", resp.status())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Client("empty choices in response".into()))
    }
}

/// Deterministic stand-in for a live LLM on synthetic graphs. Responses are
/// rendered in the same loose format a live model is instructed to use, so
/// the full prompt/parse/cache path is exercised.
pub struct OracleClient {
    view: TextGraph,
    spec: SyntheticSpec,
    neighbor_cap: usize,
    keyword_cap: usize,
    message_cap: usize,
}

impl OracleClient {
    /// `view` must be the same graph view the annotator prompts from, so
    /// candidate neighbor sets agree.
    pub fn new(
        view: TextGraph,
        spec: SyntheticSpec,
        neighbor_cap: usize,
        keyword_cap: usize,
        message_cap: usize,
    ) -> Self {
        OracleClient {
            view,
            spec,
            neighbor_cap,
            keyword_cap,
            message_cap,
        }
    }

    fn rationale(&self, node: usize) -> NodeRationale {
        oracle_annotate(
            &self.view,
            &self.spec,
            node,
            self.keyword_cap,
            self.message_cap,
        )
    }
}

impl LlmClient for OracleClient {
    fn model_name(&self) -> &str {
        "oracle-v1"
    }

    fn complete(&self, prompt: &PromptRecord) -> Result<String> {
        let r = self.rationale(prompt.node);
        Ok(match prompt.kind {
            PromptKind::Label => {
                let probs: Vec<String> =
                    r.soft_label.iter().map(|p| format!("{p:.6}")).collect();
                format!(
                    "{{Probabilities: [{}], Category: '{}'}}",
                    probs.join(", "),
                    self.view.class_names[r.pseudo_label]
                )
            }
            PromptKind::Keyword => format!("[{}]", r.keywords.join(", ")),
            PromptKind::Keylink => {
                // Restrict to the neighbors actually listed in the prompt.
                let candidates: Vec<usize> = neighbor_texts(&self.view, prompt.node, self.neighbor_cap)
                    .items
                    .iter()
                    .map(|(i, _)| *i)
                    .collect();
                let parts: Vec<String> = r
                    .key_neighbors
                    .iter()
                    .filter(|n| candidates.contains(n))
                    .map(|n| {
                        let words: Vec<String> =
                            r.messages[n].iter().map(|w| format!("'{w}'")).collect();
                        format!("Node {n}: [{}]", words.join(", "))
                    })
                    .collect();
                format!("{{{}}}", parts.join(", "))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_synthetic;
    use crate::rationale::parse::{parse_keylink_response, parse_label_response};
    use crate::rationale::prompt::{build_keylink_prompt, build_label_prompt};

    #[test]
    fn oracle_responses_round_trip_through_the_parsers() {
        let spec = SyntheticSpec::with_generated_vocab(3, 10, 5, 0.3, 0.05, 0.2, 2);
        let g = generate_synthetic(&spec).unwrap();
        let client = OracleClient::new(g.clone(), spec, 20, 5, 5);
        for node in 0..6 {
            let nbrs = neighbor_texts(&g, node, 20).items;
            let label_prompt = build_label_prompt(node, &g.texts[node], &nbrs, &g.class_names);
            let raw = client.complete(&label_prompt).unwrap();
            let (pseudo, soft) = parse_label_response(&raw, &g.class_names).unwrap();
            assert!(pseudo < 3);
            assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);

            if !nbrs.is_empty() {
                let kl = build_keylink_prompt(
                    node,
                    &g.texts[node],
                    &nbrs,
                    &g.class_names[pseudo],
                    &g.class_names,
                    5,
                );
                let raw = client.complete(&kl).unwrap();
                let ids = nbrs.iter().map(|(i, _)| *i).collect();
                let (key_nbrs, _) = parse_keylink_response(&raw, &ids, 5).unwrap();
                for k in key_nbrs {
                    assert!(g.neighbors(node).contains(&k));
                }
            }
        }
    }
}
