//! Few-shot node anomaly detection on attributed networks.
//!
//! The crate provides graph deviation networks (GDN), a first-order
//! cross-network meta-learner that produces a transferable GDN
//! initialization, the anomaly injection and splitting pipeline used to
//! build benchmarks, ranking metrics, and an experiment runner.
//!
//! Hot loops run on rayon when the `parallel` feature is on (the default);
//! see [`exec::Exec`].

pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod graph;
pub mod inject;
pub mod loss;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
pub use graph::{AttributedGraph, NormalizedAdjacency, PropagatedFeatures};
pub use loss::{LossConfig, ReferenceDistribution};
pub use meta::{MetaConfig, Task};
pub use metrics::MetricsReport;
pub use model::{GdnGradients, GdnParams, ScoreBatch};
