//! Adversarial training laboratory for small dense networks.
//!
//! Implements PGD-based adversarial training, adversarial weight perturbation,
//! vulnerability-ranked logit-stability regularisation (ISEAT) and its
//! ablations, together with the diagnostics used to study uneven adversarial
//! vulnerability: per-instance vulnerability statistics, margins along the
//! attack direction and loss-landscape grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fmt;
pub mod model;
pub mod nd;
pub mod rng;
pub mod smoothing;
pub mod trainer;
pub mod vulnerability;
pub mod weight_perturb;

pub use error::{Error, Result};
