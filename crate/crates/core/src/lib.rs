//! Variable-correction regularized estimation for regression on
//! log-transformed, error-prone count covariates (compositional data).
//!
//! The pipeline: read counts ([`data`]), correct them into a design matrix
//! ([`correction`], with concentration estimates from [`overdispersion`]),
//! fit a Lasso under linear equality constraints ([`solver`]), choose the
//! penalty and select variables ([`selection`]). [`simulator`] and
//! [`diagnostics`] generate synthetic data and probe recovery behaviour.

pub mod correction;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod overdispersion;
pub mod rng;
pub mod selection;
pub mod serde_inf;
pub mod simulator;
pub mod solver;

pub mod cli;

mod linalg;

pub use correction::{CorrectedDesign, CorrectionRecipe, Family};
pub use data::{center_design, load_counts, projector_null_space, ConstraintSpec, CountMatrix, RegressionData};
pub use error::{Error, Result};
pub use overdispersion::{AlphaEstimate, ReplicateGroup};
pub use solver::{kkt_certificate, solve_constrained_lasso, FitResult, SolverConfig};
