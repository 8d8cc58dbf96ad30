//! Three-step annotation with caching, bounded retries, and fallbacks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cache::{now_unix, request_hash, CacheEntry, RationaleCache};
use super::client::LlmClient;
use super::parse::{parse_keylink_response, parse_keyword_response, parse_label_response};
use super::prompt::{
    build_keylink_prompt, build_keyword_prompt, build_label_prompt, PromptRecord,
};
use super::{NodeRationale, RationaleSet};
use crate::error::{Error, Result};
use crate::graph::{neighbor_texts, Split, TextGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateParams {
    /// Most neighbors embedded in a prompt.
    pub neighbor_cap: usize,
    /// Most keywords requested per node.
    pub keyword_cap: usize,
    /// Most message words kept per key neighbor.
    pub message_cap: usize,
    /// Parse-failure retries, each with a repair instruction appended.
    pub retries: usize,
}

impl Default for AnnotateParams {
    fn default() -> Self {
        AnnotateParams {
            neighbor_cap: 20,
            keyword_cap: 5,
            message_cap: 5,
            retries: 2,
        }
    }
}

/// Prompt/response size accounting, estimated as characters over four.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_count: usize,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
    /// True: counts are chars/4 estimates, not client-reported usage.
    pub estimated: bool,
}

/// Runs the three-step annotation against a cache and an optional client.
/// Without a client (cache-only mode), any cache miss fails fast.
pub struct Annotator {
    model: String,
    client: Option<Box<dyn LlmClient>>,
    cache: Mutex<RationaleCache>,
    params: AnnotateParams,
    client_calls: AtomicUsize,
    usage: Mutex<TokenUsage>,
    exposed_nodes: Mutex<BTreeSet<usize>>,
}

impl Annotator {
    pub fn new(client: Box<dyn LlmClient>, cache: RationaleCache, params: AnnotateParams) -> Self {
        Annotator {
            model: client.model_name().to_string(),
            client: Some(client),
            cache: Mutex::new(cache),
            params,
            client_calls: AtomicUsize::new(0),
            usage: Mutex::new(TokenUsage {
                estimated: true,
                ..TokenUsage::default()
            }),
            exposed_nodes: Mutex::new(BTreeSet::new()),
        }
    }

    /// Cache-only annotator for `model`: replays a warm cache, fails fast on
    /// a cold one.
    pub fn cache_only(model: &str, cache: RationaleCache, params: AnnotateParams) -> Self {
        Annotator {
            model: model.to_string(),
            client: None,
            cache: Mutex::new(cache),
            params,
            client_calls: AtomicUsize::new(0),
            usage: Mutex::new(TokenUsage {
                estimated: true,
                ..TokenUsage::default()
            }),
            exposed_nodes: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn params(&self) -> &AnnotateParams {
        &self.params
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Number of actual client invocations (cache hits do not count).
    pub fn client_calls(&self) -> usize {
        self.client_calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> TokenUsage {
        *self.usage.lock().unwrap()
    }

    /// Distinct nodes whose text went to the live client this run.
    pub fn exposed_nodes(&self) -> BTreeSet<usize> {
        self.exposed_nodes.lock().unwrap().clone()
    }

    /// All cache entries, for the exposure audit.
    pub fn cache_entries(&self) -> Result<Vec<CacheEntry>> {
        self.cache.lock().unwrap().entries()
    }

    /// Fetches a raw response, preferring the cache. Raw responses are
    /// cached before any parsing happens.
    fn call(&self, prompt: &PromptRecord) -> Result<String> {
        let hash = request_hash(&self.model, prompt);
        {
            let mut cache = self.cache.lock().unwrap();
            if let Some(entry) = cache.get(&hash)? {
                return Ok(entry.raw_response);
            }
        }
        let client = self
            .client
            .as_ref()
            .ok_or_else(|| Error::CacheMiss { hash: hash.clone() })?;
        self.client_calls.fetch_add(1, Ordering::SeqCst);
        self.exposed_nodes.lock().unwrap().insert(prompt.node);
        let raw = client.complete(prompt)?;
        {
            let mut usage = self.usage.lock().unwrap();
            usage.prompt_count += 1;
            usage.prompt_tokens += prompt.token_estimate;
            usage.response_tokens += raw.chars().count().div_ceil(4);
        }
        let entry = CacheEntry {
            request_hash: hash,
            node: prompt.node,
            kind: prompt.kind,
            model: self.model.clone(),
            raw_response: raw.clone(),
            parsed: None,
            timestamp: now_unix(),
        };
        self.cache.lock().unwrap().put(&entry)?;
        Ok(raw)
    }

    /// Appends the parsed fragment for a request once parsing succeeded.
    fn record_parsed(&self, prompt: &PromptRecord, raw: &str, parsed: serde_json::Value) {
        let hash = request_hash(&self.model, prompt);
        let entry = CacheEntry {
            request_hash: hash,
            node: prompt.node,
            kind: prompt.kind,
            model: self.model.clone(),
            raw_response: raw.to_string(),
            parsed: Some(parsed),
            timestamp: now_unix(),
        };
        if let Err(e) = self.cache.lock().unwrap().put(&entry) {
            log::warn!("failed to record parsed fragment: {e}");
        }
    }

    /// Runs a prompt through parse-with-retries: on a parse failure the
    /// prompt is re-sent with a repair instruction appended, up to the
    /// retry bound.
    fn call_parsed<T>(
        &self,
        base: &PromptRecord,
        mut parse: impl FnMut(&str) -> Result<T>,
        to_json: impl Fn(&T) -> serde_json::Value,
    ) -> Result<T> {
        let mut prompt = base.clone();
        let mut last_err = None;
        for attempt in 0..=self.params.retries {
            let raw = self.call(&prompt)?;
            match parse(&raw) {
                Ok(v) => {
                    self.record_parsed(&prompt, &raw, to_json(&v));
                    return Ok(v);
                }
                Err(e) => {
                    log::warn!(
                        "parse failure for node {} ({:?}, attempt {attempt}): {e}",
                        base.node,
                        base.kind
                    );
                    prompt = prompt.with_repair(&e.to_string());
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::ResponseParse("exhausted retries".into())))
    }

    /// Annotates one train-tagged node of `view` in three steps: label,
    /// keywords, key links. Only train nodes may be exposed; calling on any
    /// other node is an error. A label-step failure fails the node; later
    /// failures degrade it to labels-only.
    pub fn annotate_node(&self, view: &TextGraph, node: usize) -> Result<NodeRationale> {
        if view.splits[node] != Split::Train {
            return Err(Error::ExposureViolation { node });
        }
        let neighbors = neighbor_texts(view, node, self.params.neighbor_cap);
        let classes = &view.class_names;

        // Step 1: pseudo-label and soft label.
        let label_prompt = build_label_prompt(node, &view.texts[node], &neighbors.items, classes);
        let (pseudo, soft) = self
            .call_parsed(
                &label_prompt,
                |raw| parse_label_response(raw, classes),
                |(p, s)| json!({"pseudo_label": p, "soft_label": s}),
            )
            .map_err(|e| Error::AnnotationFailed {
                node,
                msg: format!("label step: {e}"),
            })?;

        // Step 2: keywords supporting the pseudo-label. Failure degrades to
        // the raw-text fallback (empty keyword list).
        let kw_prompt = build_keyword_prompt(
            node,
            &view.texts[node],
            &classes[pseudo],
            classes,
            self.params.keyword_cap,
        );
        let mut labels_only = false;
        let keywords = match self.call_parsed(
            &kw_prompt,
            |raw| {
                let mut kws = parse_keyword_response(raw, &view.texts[node])?;
                kws.truncate(self.params.keyword_cap);
                Ok(kws)
            },
            |kws| json!({ "keywords": kws }),
        ) {
            Ok(kws) => kws,
            Err(e) => {
                log::warn!("node {node} degraded to labels-only keywords: {e}");
                labels_only = true;
                Vec::new()
            }
        };

        // Step 3: key links and messages. Skipped for isolated nodes; a
        // failure degrades to the empty key set (full-neighborhood
        // fallback downstream).
        let (mut key_neighbors, mut messages) = (Vec::new(), BTreeMap::new());
        if !neighbors.items.is_empty() {
            let candidate_ids: BTreeSet<usize> =
                neighbors.items.iter().map(|(i, _)| *i).collect();
            let kl_prompt = build_keylink_prompt(
                node,
                &view.texts[node],
                &neighbors.items,
                &classes[pseudo],
                classes,
                self.params.message_cap,
            );
            match self.call_parsed(
                &kl_prompt,
                |raw| parse_keylink_response(raw, &candidate_ids, self.params.message_cap),
                |(nbrs, msgs)| json!({"key_neighbors": nbrs, "messages": msgs}),
            ) {
                Ok((nbrs, msgs)) => {
                    key_neighbors = nbrs;
                    for (nbr, words) in msgs {
                        // Ground message words in the neighbor's own text.
                        let nbr_lower = view.texts[nbr].to_lowercase();
                        let grounded: Vec<String> = words
                            .into_iter()
                            .filter(|w| {
                                let keep = nbr_lower.contains(&w.to_lowercase());
                                if !keep {
                                    log::warn!(
                                        "dropping message word {w:?}: not in text of neighbor {nbr}"
                                    );
                                }
                                keep
                            })
                            .collect();
                        messages.insert(nbr, grounded);
                    }
                }
                Err(e) => {
                    log::warn!("node {node} degraded to labels-only links: {e}");
                    labels_only = true;
                }
            }
        }

        let rationale = NodeRationale {
            node,
            pseudo_label: pseudo,
            soft_label: soft,
            keywords,
            key_neighbors,
            messages,
            labels_only,
        };
        rationale.validate(view)?;
        Ok(rationale)
    }

    /// Annotates every given train node, collecting hard failures.
    pub fn annotate_all(&self, view: &TextGraph, nodes: &[usize]) -> Result<RationaleSet> {
        let mut set = RationaleSet::default();
        for &node in nodes {
            match self.annotate_node(view, node) {
                Ok(r) => {
                    set.rationales.insert(node, r);
                }
                Err(Error::ExposureViolation { node }) => {
                    return Err(Error::ExposureViolation { node });
                }
                Err(Error::CacheMiss { hash }) => {
                    return Err(Error::CacheMiss { hash });
                }
                Err(e) => {
                    log::warn!("annotation failed for node {node}: {e}");
                    set.failed.push(node);
                }
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, make_inductive_view, split_nodes, SyntheticSpec};
    use crate::rationale::client::OracleClient;
    use crate::rationale::oracle_annotate;

    fn setup(dir: &std::path::Path) -> (TextGraph, SyntheticSpec, Annotator) {
        let spec = SyntheticSpec::with_generated_vocab(3, 12, 5, 0.25, 0.05, 0.25, 5);
        let g = generate_synthetic(&spec).unwrap();
        let split = split_nodes(&g, (0.6, 0.2, 0.2), 1).unwrap();
        let view = make_inductive_view(&g, &split).unwrap();
        let cache = RationaleCache::open(&dir.join("cache.jsonl")).unwrap();
        let params = AnnotateParams::default();
        let client = OracleClient::new(
            view.clone(),
            spec.clone(),
            params.neighbor_cap,
            params.keyword_cap,
            params.message_cap,
        );
        let annotator = Annotator::new(Box::new(client), cache, params);
        (view, spec, annotator)
    }

    #[test]
    fn oracle_client_annotation_matches_pure_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let (view, spec, annotator) = setup(dir.path());
        let train = view.split_ids(Split::Train);
        for &node in train.iter().take(8) {
            let via_client = annotator.annotate_node(&view, node).unwrap();
            let direct = oracle_annotate(&view, &spec, node, 5, 5);
            assert_eq!(via_client.pseudo_label, direct.pseudo_label);
            assert_eq!(via_client.keywords, direct.keywords);
            assert_eq!(via_client.key_neighbors, direct.key_neighbors);
            for (a, b) in via_client.soft_label.iter().zip(&direct.soft_label) {
                assert!((a - b).abs() < 1e-5, "soft label round-trip");
            }
        }
    }

    #[test]
    fn non_train_nodes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (view, _, annotator) = setup(dir.path());
        let test_node = view.split_ids(Split::Test)[0];
        assert!(matches!(
            annotator.annotate_node(&view, test_node),
            Err(Error::ExposureViolation { .. })
        ));
        let val_node = view.split_ids(Split::Val)[0];
        assert!(matches!(
            annotator.annotate_node(&view, val_node),
            Err(Error::ExposureViolation { .. })
        ));
    }

    #[test]
    fn warm_cache_replays_with_zero_client_calls() {
        let dir = tempfile::tempdir().unwrap();
        let (view, spec, annotator) = setup(dir.path());
        let train = view.split_ids(Split::Train);
        let first = annotator.annotate_all(&view, &train).unwrap();
        let calls_after_first = annotator.client_calls();
        assert!(calls_after_first > 0);

        // Second annotator on the same cache, oracle client still present.
        let cache = RationaleCache::open(&dir.path().join("cache.jsonl")).unwrap();
        let params = AnnotateParams::default();
        let client = OracleClient::new(view.clone(), spec, 20, 5, 5);
        let second_annotator = Annotator::new(Box::new(client), cache, params);
        let second = second_annotator.annotate_all(&view, &train).unwrap();
        assert_eq!(second_annotator.client_calls(), 0, "pure replay");
        assert_eq!(first, second, "bit-identical rationales");
    }

    #[test]
    fn cache_only_annotator_fails_fast_on_cold_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (view, _, _) = setup(dir.path());
        let cache = RationaleCache::open(&dir.path().join("cold.jsonl")).unwrap();
        let annotator = Annotator::cache_only("oracle-v1", cache, AnnotateParams::default());
        let train = view.split_ids(Split::Train);
        assert!(matches!(
            annotator.annotate_all(&view, &train),
            Err(Error::CacheMiss { .. })
        ));
    }

    #[test]
    fn cache_only_annotator_replays_warm_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (view, _, annotator) = setup(dir.path());
        let train = view.split_ids(Split::Train);
        let first = annotator.annotate_all(&view, &train).unwrap();

        let cache = RationaleCache::open(&dir.path().join("cache.jsonl")).unwrap();
        let replay = Annotator::cache_only("oracle-v1", cache, AnnotateParams::default());
        let second = replay.annotate_all(&view, &train).unwrap();
        assert_eq!(first, second);
        assert_eq!(replay.client_calls(), 0);
    }

    #[test]
    fn exposure_audit_covers_only_train_nodes() {
        let dir = tempfile::tempdir().unwrap();
        let (view, _, annotator) = setup(dir.path());
        let train = view.split_ids(Split::Train);
        annotator.annotate_all(&view, &train).unwrap();
        let train_set: BTreeSet<usize> = train.iter().copied().collect();
        for entry in annotator.cache_entries().unwrap() {
            assert!(train_set.contains(&entry.node));
        }
        assert!(annotator.exposed_nodes().is_subset(&train_set));
    }

    /// A client that returns garbage for keyword prompts, to exercise the
    /// retry-then-degrade path.
    struct FlakyClient {
        inner: OracleClient,
    }

    impl LlmClient for FlakyClient {
        fn model_name(&self) -> &str {
            "flaky-v1"
        }
        fn complete(&self, prompt: &PromptRecord) -> Result<String> {
            match prompt.kind {
                super::super::prompt::PromptKind::Keyword => Ok("no list here".into()),
                _ => self.inner.complete(prompt),
            }
        }
    }

    #[test]
    fn keyword_failure_degrades_to_labels_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::with_generated_vocab(2, 6, 4, 0.4, 0.1, 0.2, 3);
        let g = generate_synthetic(&spec).unwrap();
        let split = split_nodes(&g, (0.6, 0.2, 0.2), 1).unwrap();
        let view = make_inductive_view(&g, &split).unwrap();
        let cache = RationaleCache::open(&dir.path().join("cache.jsonl")).unwrap();
        let params = AnnotateParams::default();
        let client = FlakyClient {
            inner: OracleClient::new(view.clone(), spec, 20, 5, 5),
        };
        let annotator = Annotator::new(Box::new(client), cache, params);
        let node = view.split_ids(Split::Train)[0];
        let r = annotator.annotate_node(&view, node).unwrap();
        assert!(r.labels_only);
        assert!(r.keywords.is_empty());
        // 1 label call + (retries + 1) keyword attempts + 1 keylink call.
        assert_eq!(annotator.client_calls(), 1 + 3 + 1);
    }
}
