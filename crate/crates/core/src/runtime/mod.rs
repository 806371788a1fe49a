//! Online side: the precomputed expansion store, the scoring service and
//! the latency benchmark, plus run metadata shared by the CLI.

pub mod bench;
pub mod metadata;
pub mod serve;
pub mod store;

pub use bench::{bench, percentile, request_stream, BenchConfig, LatencyReport, PathLatency};
pub use metadata::RunMetadata;
pub use serve::{router, serve, ErrorBody, ScoreRequest, ScoreResponse, ScoringState};
pub use store::{aggregate, ExpansionStore, MetapathRecord, STORE_MAGIC, STORE_VERSION};
