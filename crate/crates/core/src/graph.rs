//! Text-attributed graph data model.
//!
//! A graph is a set of nodes each carrying a raw text attribute, an
//! undirected adjacency with no self-loops, an ordered list of class names,
//! optional gold labels, and a per-node split tag. Graphs are immutable
//! after construction; training-time edge removal produces a new view.
//!
//! File formats:
//! - node file: `<id>\t<label-or-dash>\t<escaped text>` per line, where the
//!   text escape is JSON string escaping without the surrounding quotes and
//!   the label is a class name or class index;
//! - edge file: `<src>\t<dst>` per line (node ids, not indices);
//! - class file: one class name per line;
//! - manifest: JSON with node count, edge count, and a content checksum.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-node split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A text-attributed graph: nodes with text attributes, symmetric adjacency
/// with no self-loops, class names, optional gold labels, split tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGraph {
    pub node_count: usize,
    /// Sorted neighbor lists; symmetric, no self-loops.
    neighbors: Vec<Vec<usize>>,
    /// Canonical undirected edge list, each `(u, v)` with `u < v`, sorted.
    edges: Vec<(usize, usize)>,
    pub texts: Vec<String>,
    pub class_names: Vec<String>,
    /// Gold class index per node, when known.
    pub gold_labels: Vec<Option<usize>>,
    /// Split tag per node. Freshly loaded graphs are all-train until a
    /// `SplitAssignment` is applied.
    pub splits: Vec<Split>,
}

impl TextGraph {
    /// Builds a graph from raw parts. Edges are symmetrized, duplicates
    /// collapsed, self-loops dropped.
    pub fn new(
        texts: Vec<String>,
        raw_edges: &[(usize, usize)],
        class_names: Vec<String>,
        gold_labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let node_count = texts.len();
        if gold_labels.len() != node_count {
            return Err(Error::DimMismatch {
                context: "gold_labels".into(),
                expected: node_count,
                got: gold_labels.len(),
            });
        }
        for (n, lbl) in gold_labels.iter().enumerate() {
            if let Some(c) = lbl {
                if *c >= class_names.len() {
                    return Err(Error::Config(format!(
                        "node {n} has class index {c} but only {} classes exist",
                        class_names.len()
                    )));
                }
            }
        }
        let mut set = BTreeSet::new();
        for &(a, b) in raw_edges {
            if a == b {
                continue; // self-loop
            }
            if a >= node_count || b >= node_count {
                return Err(Error::Config(format!(
                    "edge ({a},{b}) references a node outside 0..{node_count}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(TextGraph {
            node_count,
            neighbors,
            edges,
            texts,
            class_names,
            gold_labels,
            splits: vec![Split::Train; node_count],
        })
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Canonical undirected edge list, each `(u, v)` with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        (0..self.node_count)
            .filter(|&n| self.splits[n] == split)
            .collect()
    }

    /// Tags every node with its split from `assignment`.
    pub fn apply_split(&mut self, assignment: &SplitAssignment) -> Result<()> {
        assignment.validate(self.node_count)?;
        for &n in &assignment.train_ids {
            self.splits[n] = Split::Train;
        }
        for &n in &assignment.val_ids {
            self.splits[n] = Split::Val;
        }
        for &n in &assignment.test_ids {
            self.splits[n] = Split::Test;
        }
        Ok(())
    }

    /// Content checksum over texts, adjacency, class names, and gold labels.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.texts {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        for &(u, v) in &self.edges {
            hasher.update(u.to_le_bytes());
            hasher.update(v.to_le_bytes());
        }
        for c in &self.class_names {
            hasher.update(c.as_bytes());
            hasher.update([0u8]);
        }
        for l in &self.gold_labels {
            match l {
                Some(c) => hasher.update((*c as u64 + 1).to_le_bytes()),
                None => hasher.update(0u64.to_le_bytes()),
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Disjoint train/val/test node-index sets produced by [`split_nodes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    /// Checks the union covers all nodes exactly once.
    pub fn validate(&self, node_count: usize) -> Result<()> {
        let mut seen = vec![false; node_count];
        for &n in self
            .train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
        {
            if n >= node_count {
                return Err(Error::Config(format!(
                    "split references node {n} outside 0..{node_count}"
                )));
            }
            if seen[n] {
                return Err(Error::Config(format!("node {n} appears in two splits")));
            }
            seen[n] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("split does not cover all nodes".into()));
        }
        Ok(())
    }
}

/// Uniform random split under `seed`, partitioned by `ratios`.
///
/// Counts are `round(r0 * N)` train and `round(r1 * N)` val, remainder test.
/// Pure function of `(graph.node_count, ratios, seed)`.
pub fn split_nodes(
    graph: &TextGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (r0, r1, r2) = ratios;
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            r0 + r1 + r2
        )));
    }
    if r0 < 0.0 || r1 < 0.0 || r2 < 0.0 {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let n = graph.node_count;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let n_train = ((r0 * n as f64).round() as usize).min(n);
    let n_val = ((r1 * n as f64).round() as usize).min(n - n_train);
    let mut train_ids: Vec<usize> = perm[..n_train].to_vec();
    let mut val_ids: Vec<usize> = perm[n_train..n_train + n_val].to_vec();
    let mut test_ids: Vec<usize> = perm[n_train + n_val..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitAssignment {
        train_ids,
        val_ids,
        test_ids,
        seed,
    })
}

/// Training view: every edge incident to a test-tagged node is removed, so
/// test nodes are unseen during training. The input graph is untouched;
/// evaluation uses the full adjacency.
pub fn make_inductive_view(graph: &TextGraph, split: &SplitAssignment) -> Result<TextGraph> {
    split.validate(graph.node_count)?;
    let mut tagged = graph.clone();
    tagged.apply_split(split)?;
    let kept: Vec<(usize, usize)> = tagged
        .edges
        .iter()
        .copied()
        .filter(|&(u, v)| tagged.splits[u] != Split::Test && tagged.splits[v] != Split::Test)
        .collect();
    let mut view = TextGraph::new(
        tagged.texts.clone(),
        &kept,
        tagged.class_names.clone(),
        tagged.gold_labels.clone(),
    )?;
    view.splits = tagged.splits.clone();
    Ok(view)
}

/// Specification for the synthetic generator backing the offline oracle.
///
/// Node texts mix words sampled from the node's class signature vocabulary
/// with distractor words sampled from the other classes' vocabularies: each
/// word is a distractor independently with probability `noise_word_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub nodes_per_class: usize,
    /// One word list per class; lists must be pairwise disjoint.
    pub signature_vocab: Vec<Vec<String>>,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    pub noise_word_rate: f64,
    pub seed: u64,
    /// Text lengths are drawn uniformly from this inclusive range.
    #[serde(default = "default_words_range")]
    pub words_per_text: (usize, usize),
}

fn default_words_range() -> (usize, usize) {
    (4, 12)
}

impl SyntheticSpec {
    /// Default vocabulary: `class_count` disjoint lists of `words_per_class`
    /// generated word tokens.
    pub fn with_generated_vocab(
        class_count: usize,
        nodes_per_class: usize,
        words_per_class: usize,
        intra: f64,
        inter: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        let signature_vocab = (0..class_count)
            .map(|c| {
                (0..words_per_class)
                    .map(|w| format!("sig{c}w{w}"))
                    .collect()
            })
            .collect();
        SyntheticSpec {
            class_count,
            nodes_per_class,
            signature_vocab,
            intra_class_edge_prob: intra,
            inter_class_edge_prob: inter,
            noise_word_rate: noise,
            seed,
            words_per_text: default_words_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.nodes_per_class == 0 {
            return Err(Error::Config("class_count and nodes_per_class must be positive".into()));
        }
        if self.signature_vocab.len() != self.class_count {
            return Err(Error::Config(format!(
                "expected {} signature vocabularies, got {}",
                self.class_count,
                self.signature_vocab.len()
            )));
        }
        for p in [
            self.intra_class_edge_prob,
            self.inter_class_edge_prob,
            self.noise_word_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0,1]")));
            }
        }
        let mut seen = BTreeSet::new();
        for vocab in &self.signature_vocab {
            if vocab.is_empty() {
                return Err(Error::Config("empty signature vocabulary".into()));
            }
            for w in vocab {
                if !seen.insert(w.as_str()) {
                    return Err(Error::Config(format!(
                        "signature vocabularies are not disjoint: {w:?} repeats"
                    )));
                }
            }
        }
        if self.words_per_text.0 == 0 || self.words_per_text.0 > self.words_per_text.1 {
            return Err(Error::Config("invalid words_per_text range".into()));
        }
        Ok(())
    }

    pub fn class_of(&self, node: usize) -> usize {
        node / self.nodes_per_class
    }
}

/// Generates a synthetic TAG from `spec`: texts first (node order), then
/// edges (ordered pair scan), all draws from one seeded stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TextGraph> {
    spec.validate()?;
    let n = spec.class_count * spec.nodes_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut texts = Vec::with_capacity(n);
    let mut gold = Vec::with_capacity(n);
    for node in 0..n {
        let class = spec.class_of(node);
        let other_words: Vec<&str> = spec
            .signature_vocab
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != class)
            .flat_map(|(_, v)| v.iter().map(|s| s.as_str()))
            .collect();
        let own = &spec.signature_vocab[class];
        let len = rng.gen_range(spec.words_per_text.0..=spec.words_per_text.1);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let is_noise = !other_words.is_empty() && rng.gen_bool(spec.noise_word_rate);
            if is_noise {
                words.push(other_words[rng.gen_range(0..other_words.len())].to_string());
            } else {
                words.push(own[rng.gen_range(0..own.len())].clone());
            }
        }
        texts.push(words.join(" "));
        gold.push(Some(class));
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if spec.class_of(u) == spec.class_of(v) {
                spec.intra_class_edge_prob
            } else {
                spec.inter_class_edge_prob
            };
            if p > 0.0 && rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let class_names = (0..spec.class_count).map(|c| format!("class-{c}")).collect();
    TextGraph::new(texts, &edges, class_names, gold)
}

/// Neighbor listing for prompt construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTexts {
    /// `(neighbor index, neighbor text)` ordered by descending degree, then
    /// ascending index.
    pub items: Vec<(usize, String)>,
    /// True when the listing was cut at the cap.
    pub truncated: bool,
}

/// Neighbors of `node` ordered by descending degree then ascending index,
/// truncated at `cap` to bound prompt length.
pub fn neighbor_texts(graph: &TextGraph, node: usize, cap: usize) -> NeighborTexts {
    let mut ids: Vec<usize> = graph.neighbors(node).to_vec();
    ids.sort_by_key(|&m| (std::cmp::Reverse(graph.degree(m)), m));
    let truncated = ids.len() > cap;
    ids.truncate(cap);
    let items = ids
        .into_iter()
        .map(|m| (m, graph.texts[m].clone()))
        .collect();
    NeighborTexts { items, truncated }
}

/// Sidecar manifest written next to saved graph files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_count: usize,
    pub edge_count: usize,
    pub checksum: String,
}

fn escape_text(text: &str) -> String {
    let quoted = serde_json::to_string(text).expect("string serialization is infallible");
    quoted[1..quoted.len() - 1].to_string()
}

fn unescape_text(escaped: &str) -> Option<String> {
    serde_json::from_str(&format!("\"{escaped}\"")).ok()
}

/// Loads a graph from node, edge, and class files. Adjacency is
/// symmetrized, duplicate edges collapsed, self-loops dropped.
pub fn load_graph(node_file: &Path, edge_file: &Path, class_file: &Path) -> Result<TextGraph> {
    let class_names: Vec<String> = {
        let f = fs::File::open(class_file).map_err(|e| Error::io(class_file.display().to_string(), e))?;
        BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(class_file.display().to_string(), e))?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect()
    };

    let mut texts = Vec::new();
    let mut gold = Vec::new();
    let mut id_to_index: HashMap<String, usize> = HashMap::new();
    {
        let path = node_file.display().to_string();
        let f = fs::File::open(node_file).map_err(|e| Error::io(path.clone(), e))?;
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.clone(), e))?;
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let mut parts = line.splitn(3, '\t');
            let (id, label, text) = match (parts.next(), parts.next(), parts.next()) {
                (Some(i), Some(l), Some(t)) => (i, l, t),
                _ => {
                    return Err(Error::Parse {
                        path,
                        line: lineno,
                        msg: "expected <id>\\t<label-or-dash>\\t<text>".into(),
                    })
                }
            };
            if id_to_index.contains_key(id) {
                return Err(Error::Parse {
                    path,
                    line: lineno,
                    msg: format!("duplicate node id {id:?}"),
                });
            }
            let label = if label == "-" {
                None
            } else if let Ok(idx) = label.parse::<usize>() {
                if idx >= class_names.len() {
                    return Err(Error::Parse {
                        path,
                        line: lineno,
                        msg: format!("class index {idx} out of range"),
                    });
                }
                Some(idx)
            } else {
                match class_names.iter().position(|c| c == label) {
                    Some(idx) => Some(idx),
                    None => {
                        return Err(Error::Parse {
                            path,
                            line: lineno,
                            msg: format!("unknown class {label:?}"),
                        })
                    }
                }
            };
            let text = unescape_text(text).ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: lineno,
                msg: "invalid text escape".into(),
            })?;
            id_to_index.insert(id.to_string(), texts.len());
            texts.push(text);
            gold.push(label);
        }
    }

    let mut edges = Vec::new();
    {
        let path = edge_file.display().to_string();
        let f = fs::File::open(edge_file).map_err(|e| Error::io(path.clone(), e))?;
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.clone(), e))?;
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let mut parts = line.split('\t');
            let (src, dst) = match (parts.next(), parts.next()) {
                (Some(s), Some(d)) if parts.next().is_none() => (s, d),
                _ => {
                    return Err(Error::Parse {
                        path,
                        line: lineno,
                        msg: "expected <src>\\t<dst>".into(),
                    })
                }
            };
            let lookup = |id: &str| -> Result<usize> {
                id_to_index.get(id).copied().ok_or_else(|| Error::UnknownNode {
                    path: path.clone(),
                    line: lineno,
                    node: id.to_string(),
                })
            };
            edges.push((lookup(src)?, lookup(dst)?));
        }
    }

    TextGraph::new(texts, &edges, class_names, gold)
}

/// Saves a graph as node/edge/class files plus a manifest, under
/// `dir/<stem>.{nodes,edges,classes,manifest.json}`.
pub fn save_graph(graph: &TextGraph, dir: &Path, stem: &str) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(format!("{stem}.{name}"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    };

    let mut nodes = String::new();
    for n in 0..graph.node_count {
        let label = match graph.gold_labels[n] {
            Some(c) => graph.class_names[c].clone(),
            None => "-".to_string(),
        };
        nodes.push_str(&format!("{n}\t{label}\t{}\n", escape_text(&graph.texts[n])));
    }
    write("nodes", nodes)?;

    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write("edges", edges)?;

    let mut classes = String::new();
    for c in &graph.class_names {
        classes.push_str(c);
        classes.push('\n');
    }
    write("classes", classes)?;

    let manifest = Manifest {
        node_count: graph.node_count,
        edge_count: graph.edge_count(),
        checksum: graph.checksum(),
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
