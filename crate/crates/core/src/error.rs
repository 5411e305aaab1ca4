use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the rankpeer library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("node {node} has degree {degree}, above the maximum degree {dbar}")]
    DegreeOverflow { node: usize, degree: usize, dbar: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("coefficient layout: expected beta of length dbar(dbar+1)/2 = {expected} for dbar = {dbar}, got {got}")]
    CoefficientLayout { dbar: usize, expected: usize, got: usize },

    #[error("restriction matrix is rank deficient (rank {rank} < {cols} columns)")]
    RestrictionRank { rank: usize, cols: usize },

    #[error("invalid restriction: {0}")]
    InvalidRestriction(String),

    #[error("peer coefficients are not bounded: beta_bar = {beta_bar} >= 1, the contraction guarantee does not hold")]
    ContractionPrecondition { beta_bar: f64 },

    #[error("fixed point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("brute force enumeration is limited to n <= {max}, got n = {n}")]
    TooLarge { n: usize, max: usize },

    #[error("found {} consistent orderings, expected exactly one", .orderings.len())]
    Multiplicity { orderings: Vec<Vec<usize>> },

    #[error("singular design{}: {detail}", stratum_label(.stratum))]
    SingularDesign { stratum: Option<usize>, detail: String },

    #[error("instrument relevance failure{} (min singular value {min_singular:e}): {detail}", stratum_label(.stratum))]
    Relevance {
        stratum: Option<usize>,
        min_singular: f64,
        detail: String,
    },

    #[error("empty usable sample: {0}")]
    EmptySample(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn stratum_label(stratum: &Option<usize>) -> String {
    match stratum {
        Some(d) => format!(" in stratum d={d}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code: 2 for configuration and validation problems, 1 for
    /// failures during computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSize(_)
            | Error::CoefficientLayout { .. }
            | Error::RestrictionRank { .. }
            | Error::InvalidRestriction(_)
            | Error::InvalidNetwork(_)
            | Error::DimensionMismatch(_)
            | Error::Config(_)
            | Error::Input { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::TooLarge { .. }
            | Error::ContractionPrecondition { .. }
            | Error::DegreeOverflow { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
