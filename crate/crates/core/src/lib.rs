//! Distilling an LLM's zero-shot knowledge of text-attributed graphs into a
//! small local graph model.
//!
//! The pipeline has two stages. An *interpreter* model is trained on
//! LLM-provided rationales: per-node keywords, key neighbor links, and key
//! messages, supervised by LLM pseudo-labels and soft labels. A *student*
//! model then consumes raw node texts and the unedited graph and is aligned
//! to the frozen interpreter with semantics- and structure-aware losses, so
//! that inference needs no LLM at all.
//!
//! Module map:
//! - [`graph`] — text-attributed graph data model, ingestion, splits,
//!   inductive training views, synthetic generation.
//! - [`rationale`] — prompt construction, LLM clients (live/oracle/cache),
//!   response parsing, replayable cache.
//! - [`encoder`] — text-to-vector encoders and the frozen reference encoder
//!   used for semantic similarity weights.
//! - [`autodiff`] — small reverse-mode tape over `ndarray` used by training.
//! - [`backbone`] — message passing for the three backbone families, the
//!   interpreter variant with pruned structure and replaced first-layer
//!   messages, and the classification head.
//! - [`interpreter`] — interpreter training against pseudo/soft labels.
//! - [`student`] — alignment weights, student losses, student training.
//! - [`experiment`] — end-to-end pipeline, ablations, sweeps, reports.

pub mod autodiff;
pub mod backbone;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod interpreter;
pub mod rationale;
pub mod student;

pub use error::{Error, Result};
