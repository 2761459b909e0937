//! Finite-horizon linear-quadratic stochastic game between a local player with
//! perfect state access and a remote player fed over a lossy uplink.
//!
//! The crate solves the coupled backward recursion for the feedback Nash
//! equilibrium, replicates the remote player's state estimator, evaluates
//! policies exactly (second moments) and by Monte Carlo, and cross-checks the
//! equilibrium against an enumeration-based open-loop solver on a scenario tree.

#![allow(non_snake_case)] // control-theoretic matrix names (A, BL, QL, ...)

pub mod estimator;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod openloop;
pub mod riccati;

/// Which player's cost or controls a check refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    Local,
    Remote,
}

impl std::fmt::Display for Player {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Player::Local => write!(f, "local"),
            Player::Remote => write!(f, "remote"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The stage-k quadratic term of one player lost positive definiteness,
    /// so the backward recursion has no solution from that stage on.
    #[error("Riccati infeasible at stage {stage}: {matrix} not positive definite")]
    RiccatiInfeasible { stage: usize, matrix: &'static str },

    #[error("policy shape mismatch: {0}")]
    PolicyShape(String),

    #[error("scenario tree needs a diagonal {0} (two-point branch per coordinate)")]
    NonDiagonalCovariance(&'static str),

    #[error("scenario tree would have {nodes} nodes, cap is {cap}")]
    NodeCapExceeded { nodes: usize, cap: usize },

    #[error("stationarity system singular: rank {rank} of {size}")]
    SingularSystem { rank: usize, size: usize },

    #[error("direction not adapted to the tree: {0}")]
    NotAdapted(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
