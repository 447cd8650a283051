//! Simulation and estimation for many-to-one matching markets without
//! transfers.
//!
//! The crate covers market generation, student-proposing deferred
//! acceptance, admission cutoffs, a kernel average-derivative estimator, a
//! Gibbs sampler with data augmentation, counterfactual admission policies,
//! and model-fit diagnostics.

#![allow(clippy::needless_range_loop)]

pub mod bayes;
pub mod counterfactual;
pub mod dgp;
pub mod error;
pub mod io;
pub mod market;
pub mod modelfit;
pub mod montecarlo;
pub mod rng;
pub mod semiparam;
pub mod stats;

pub use error::{Error, Result};
pub use market::{
    audit_stability, compute_cutoffs, deferred_acceptance, feasible_set, stable_from_cutoffs, AuditReport,
    CollegeOrder, CollegeRecord, Cutoff, Gender, LatentUtilities, Market, Matching, SchoolType, StudentRecord,
};
