//! Differentially private counting queries.
//!
//! Queries are conjunctions of per-column label sets over a categorical
//! table. Answers come either from a per-query Laplace mechanism or from a
//! family of disjoint atoms whose counts are perturbed once and then summed,
//! which keeps nested answers ordered and reuses the spent budget.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod evolving;
pub mod grouping;
pub mod harness;
pub mod mechanism;
pub mod metrics;
pub mod query;
pub mod serve;
pub mod sigma;

pub use dataset::{Column, Database, DeltaKind, RowDelta, Schema};
pub use engine::{Engine, EngineConfig, Path, Response, Stats};
pub use error::{Error, Result};
pub use evolving::{epsilon0, epsilon0_approx, EvolvingSession};
pub use grouping::{ClusterPlan, Clusterer};
pub use mechanism::{benchmark_respond, compose, LaplaceSampler, NoisyCount, PrivacyAccountant};
pub use query::{exact_count, ActiveSet, Embedding, LabelSet, Query};
pub use sigma::{Cover, SigmaAlgebra};
