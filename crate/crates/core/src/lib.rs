//! Simulation library for adaptive adversarial attacks on vertical federated
//! learning (VFL) inference.
//!
//! An attacker who controls `C` of the `M` client-to-server channels perturbs
//! the embeddings sent over them. Which channels to corrupt is chosen online by
//! a bandit policy ([`bandit`]), with each corruption pattern one arm
//! ([`combinatorics`]); the perturbations themselves come from a query-limited
//! NES gradient estimator ([`attack`]) run against an in-process split model
//! ([`vfl`], built on [`tinynet`]). [`env`] provides synthetic Gaussian bandit
//! environments for pure-bandit studies and [`experiment`] ties the pieces into
//! seeded, reproducible experiment runs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bandit;
pub mod combinatorics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod report;
pub mod rng;
pub mod tinynet;
pub mod vfl;

pub use error::{Error, Result};
