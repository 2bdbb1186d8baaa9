//! Closed-form references: the conditional normalizer, optimal scalar
//! networks, and exact minimizers of the contrastive losses on finite worlds.

use thiserror::Error;

pub mod discrete;
pub mod figure2;
mod normalizer;
pub mod quadrature;
pub mod suites;

pub use figure2::{run_alpha_study, AlphaStudy, AlphaStudyConfig, StudyError};
pub use discrete::{discrete_loss_minimizer, exact_loss, lemma1_deviation, second_order_margin, DiscreteWorld, Minimum};
pub use normalizer::{
    alpha_targets, compare_alpha, grid_points, log_z, z_normalizer, AlphaComparison, AlphaTargetGrid,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid discrete world: {0}")]
    InvalidWorld(String),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("no convergence after {steps} steps (gradient norm {grad_norm:e})")]
    NonConvergence { steps: usize, grad_norm: f64 },
}
