//! Finite-sample choice between fine and gross clustering levels for
//! cluster-robust standard errors.
//!
//! The central procedure is the reclustering test in [`recluster`]: with fine
//! clusters nested in gross clusters, fine clusters are randomly regrouped
//! into gross clusters of the observed sizes and the gross-level standard
//! error is recomputed, which yields an exact-size test of whether clustering
//! at the fine level suffices. [`alt_tests`] provides the SV, VMB and WCR
//! competitor tests, and [`dgp`] with [`simulator`] reproduce size and power
//! experiments.

mod error;

pub mod cli_io;
pub mod cluster_model;
pub mod dgp;
pub mod recluster;
pub mod regression;
pub mod rng;
pub mod simulator;
pub mod variance;

pub use cluster_model::{ClusterStructure, Feasibility, GrossMap};
pub use error::{Error, Result};
pub use recluster::{
    crse_test, draw_recluster, exhaustive_test, permutation_test, recluster_test, EnumerationMode,
    PValueRule, ReclusterConfig, Sided, TestMethod, TestResult,
};
pub use regression::{ols_fit, Dataset, RegressionFit};
pub use variance::{sandwich, CrseStatistic, Cv1Convention, EstimateLevel, SandwichEstimate};
