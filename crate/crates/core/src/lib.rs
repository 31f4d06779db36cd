//! Federated training and evaluation of LLM query routers.
//!
//! Two router families are provided, both estimating per-model accuracy and
//! cost for a query embedding and routing by maximizing
//! `accuracy - lambda * cost`:
//!
//! - [`mlp`]: a shared MLP trunk with per-model accuracy/cost heads, trained
//!   across clients with federated averaging ([`fedavg`]).
//! - [`kmeans`]: a nonparametric router built from a two-stage federated
//!   K-means over query embeddings plus count-weighted per-(cluster, model)
//!   statistics.
//!
//! Around them sit synthetic corpus generation ([`ingestion`]), Dirichlet
//! client partitioning ([`partition`]), frontier evaluation ([`eval`]),
//! personalization and pool/federation expansion ([`personalization`]), and
//! file-driven experiment pipelines ([`experiment`]).
//!
//! The `examples/` directory of this crate has one runnable program per
//! capability.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fedavg;
pub mod ingestion;
pub mod kmeans;
pub mod mlp;
pub mod numeric;
pub mod partition;
pub mod personalization;

pub use data::{
    validate_dataset, ClientDataset, DatasetManifest, EvaluationRecord, FullEvaluation,
    ModelPool, ValidationReport, Violation,
};
pub use error::{Error, Result};
pub use eval::{Estimate, Estimator, FrontierCurve, LambdaGrid};
