//! Deterministic desk-scale simulation of personalized federated learning.
//!
//! The crate trains a global model with generalized federated averaging and
//! evaluates five personalization strategies on top of it: local training,
//! fine-tuning, clustering with model selection, nearest-neighbor
//! interpolation, and multi-task learning (a proximal variant and a primal
//! task-relationship variant). Two regimes are supported: cross-device
//! (thousands of small clients, disjoint train/valid/test populations) and
//! cross-silo (tens of large clients, per-example splits, full participation).
//!
//! Every run is a pure function of its configuration and seed: random streams
//! are derived, never shared, so results are bitwise reproducible at any
//! worker count and checkpoints resume exactly.
//!
//! Start from the runnable examples (`cargo run --example ...`) or the thin
//! `pflsim` binary, which drives experiments from a TOML config.

pub mod config;
pub mod data;
pub mod datamodel;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod optim;
pub mod personalize;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
