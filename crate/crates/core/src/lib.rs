//! Reliability evaluation for probabilistic classifiers over frozen
//! embeddings and logits, plus trainable last-layer uncertainty heads.
//!
//! Modules:
//! - [`tensor_store`]: UBT tensor files and dataset manifests.
//! - [`metrics`]: calibration, selective prediction, ranking and
//!   label-uncertainty metrics, and the normalized reliability score.
//! - [`ood`]: per-example uncertainty scores for open-set recognition.
//! - [`heads`]: linear, random-feature GP, heteroscedastic, BatchEnsemble,
//!   MC-dropout and ensemble heads, plus L-BFGS logistic regression.
//! - [`active_learning`]: batch active learning with margin sampling.
//! - [`pipelines`]: end-to-end runs driven by a JSON configuration.

pub mod active_learning;
pub mod heads;
pub mod linalg;
pub mod metrics;
pub mod ood;
pub mod pipelines;
pub mod synthetic;
pub mod tensor_store;
