//! Invariant causal imitation learning from strictly batch expert data.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`autodiff`]), multi-environment data generation ([`envsuite`]), an
//! energy model of expert observations ([`ebm`]), a neural mutual
//! information estimator ([`mine`]), the invariant learner ([`icil`]),
//! behaviour-cloning style baselines ([`baselines`]), and the experiment
//! harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod autodiff;
pub mod baselines;
pub mod ebm;
pub mod envsuite;
pub mod harness;
mod error;
pub mod icil;
pub mod mine;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
pub use policy::{ActMode, Policy};
