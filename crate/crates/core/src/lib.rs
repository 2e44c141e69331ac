//! Exact first-order adversarial optimization over the threat model
//! `S = B1(x, eps) ∩ [0,1]^d`.
//!
//! The crate provides the exact projection onto `S` and its cheap
//! approximation, the box-aware steepest ascent step, adaptive l1-APGD
//! (single- and multi-radius), an l1 Square Attack, the SLIDE baseline, an
//! ensemble evaluator and a small adversarial-training loop. Classifiers are
//! plugged in through [`models::LogitsOracle`]; a linear softmax model and a
//! softplus MLP with analytic input gradients are included.

pub mod advtrain;
pub mod apgd;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod io;
pub mod models;
pub mod oracles;
pub mod rng;
pub mod square;

pub use apgd::{AttackResult, Objective};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use geometry::{Projection, ThreatModel};
pub use models::{LogitsOracle, Loss};
