//! Gift-through-rate (GTR) prediction for live-streaming segments.
//!
//! The crate covers the whole offline/online pipeline:
//!
//! - [`ingest`]: donation and impression logs, segment multimodal features,
//!   planted-structure synthetic data.
//! - [`graph`]: the user-to-author donation graph and the author-to-author
//!   Swing similarity graph.
//! - [`metapath`]: the five typed metapaths and metapath-guided neighbor sets.
//! - [`graphcl`]: contrastive pretraining of the node embedding table.
//! - [`tensor`]: a small reverse-mode differentiable matrix core.
//! - [`mfq`]: multimodal fusion with per-author learnable queries.
//! - [`model`]: the GTR predictor, log-loss training and AUC/UAUC/GAUC.
//! - [`runtime`]: the offline expansion store, the scoring service and the
//!   latency benchmark.
//!
//! The `mmbee` binary wraps these behind subcommands; the `examples/`
//! directory has one runnable program per capability.

pub mod binio;
pub mod cli;
pub mod error;
pub mod graph;
pub mod graphcl;
pub mod ingest;
pub mod metapath;
pub mod mfq;
pub mod model;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
