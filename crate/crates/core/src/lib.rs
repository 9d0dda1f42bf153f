//! Core library for a batch simulator of degree-aware subgraph federated learning.
//!
//! The crate is organised along the data path of one experiment:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over dense `f64` matrices,
//!   plus the Adam optimizer. Everything that trains goes through this tape.
//! - [`graphio`]: the in-memory graph type, a TSV loader/saver for node/edge
//!   tables, a stochastic-block-model generator for fixtures, and class-rate /
//!   degree-headness helpers.
//! - [`partition`]: region-growing graph partitioning, federated scenario
//!   construction (splits, missing-class excision, h-hop expansion sets) and
//!   the contributor-reliability scenario variants.
//! - [`model`]: the GraphSAGE encoder, the dual degree-branch prototypical
//!   classifiers with their learnable synthetic node banks, the merged
//!   objective, and the plain encoder+linear baseline model.
//! - [`promptgen`]: per-class prompt generators — pretraining with feature and
//!   gradient matching, server-side aggregation, prompt synthesis.
//! - [`federation`]: the round loop that ties it together — aggregation,
//!   global synthetic data, local generalization, adaptive feature scaling,
//!   privacy noise on shared class rates, the communication ledger, baselines,
//!   and the four evaluation settings.
//! - [`pca`]: a two-component PCA (power iteration) used for diagnostics
//!   exports.
//! - [`serialize`]: the flat little-endian parameter container used for
//!   checkpoints and generator banks.
//!
//! Determinism is a contract, not an accident: every random draw comes from a
//! named stream derived in [`rng`] from one root seed, so reruns, resumed runs
//! and worker-parallel runs all produce identical results.

pub mod federation;
pub mod graphio;
pub mod model;
pub mod partition;
pub mod promptgen;
pub mod pca;
pub mod rng;
pub mod serialize;
pub mod tensor;
