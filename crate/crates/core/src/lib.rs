//! Differentially private inexact ADMM for federated multiclass logistic
//! regression.
//!
//! Agents hold private datasets and solve linearized local subproblems whose
//! objectives are perturbed with Laplace noise calibrated to the L1
//! sensitivity of the local gradient. A server averages the local iterates
//! and updates the dual variables. The crate also ships a Gaussian
//! output-perturbation baseline, dataset and metrics I/O, and oracles
//! (brute-force sensitivity, a centralized solver, an empirical privacy
//! audit) used to validate all of the above.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod dataio;
pub mod error;
pub mod federation;
pub mod mechanisms;
pub mod model;
pub mod rng;
pub mod validation;

pub use admm::{FeasibleBox, RhoSchedule, Schedules, Subproblem};
pub use error::{Error, Result};
pub use federation::{Algorithm, MetricsRecord, RunConfig, RunOutcome};
pub use mechanisms::{MechanismKind, PrivacyConfig, Sensitivity};
pub use model::{AgentData, ParamMatrix, ProblemDims};
pub use rng::{RngStream, StreamId};
