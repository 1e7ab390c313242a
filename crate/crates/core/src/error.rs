use thiserror::Error;

use crate::lattice::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("tree needs {needed} nodes but the node budget is {budget}")]
    NodeBudget { needed: String, budget: usize },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("process is defined up to level {have}, level {need} is required")]
    MissingLevel { have: usize, need: usize },

    #[error("{quantity} is path dependent at node {node}; use a non-recombining tree")]
    PathDependent {
        quantity: &'static str,
        node: NodeId,
    },

    #[error("{slot}: {reason} at node {node}")]
    Coefficient {
        slot: &'static str,
        node: NodeId,
        reason: String,
    },

    #[error("model spec for {slot}: {reason}")]
    ModelSpec { slot: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    /// A property that holds by construction was found violated.
    #[error("internal consistency failure: {0}")]
    Consistency(String),

    /// Problem data failed one of the standing conditions.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
