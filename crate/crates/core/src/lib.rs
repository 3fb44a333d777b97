//! Notebook corpus tooling: parsing, curation of nbgrader problems, infilling
//! examples, execution-based evaluation and metrics.

pub mod corpus;
pub mod curation;
pub mod eval;
pub mod executor;
pub mod genprovider;
pub mod infill;
pub mod lexer;
pub mod metrics;
pub mod notebook;

pub use corpus::{dedup_key, markdown_focus_filter, scan_corpus, CorpusStats};
pub use curation::{curate_problems, curation_pipeline, CurationConfig, CurationReport, Problem};
pub use eval::{evaluate_candidate, Candidate, CandidateSet, ExecutionReport};
pub use executor::{Executor, ShimExecutor};
pub use infill::{emit_eval_prompt, emit_infill_examples, serialize_context, InfillConfig, InfillExample};
pub use notebook::{parse_notebook, serialize_notebook, Cell, CellKind, Notebook};

/// Per-problem pass@k in double precision.
pub type PassAtK = metrics::PassAtKResult<f64>;
/// Aggregated pass@k table in double precision.
pub type PassAtKTable = metrics::PassAtKTable<f64>;
/// Pass-rate versus BLEU report in double precision.
pub type CorrelationReport = metrics::CorrelationReport<f64>;
