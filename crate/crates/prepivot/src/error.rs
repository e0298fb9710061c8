//! Error type shared across the engine.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the randomization-inference engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed inputs: dimension mismatches, bad flags, invalid parameters.
    #[error("validation error: {0}")]
    Validation(String),

    /// Structurally invalid designs: degenerate arms, malformed pairings,
    /// assignments outside the declared space.
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    /// Data-file ingestion failures (missing columns, unparsable cells).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A matrix factorization or regression was singular / not positive
    /// definite where the method requires it.
    #[error("decomposition error: {0}")]
    Singular(String),

    /// Rejection sampling for a balance criterion exhausted its attempt
    /// budget; the empirical acceptance rate observed so far is reported.
    #[error(
        "infeasible balance criterion: {accepted} of {attempts} attempts accepted \
         (rate {rate:.2e}); loosen the criterion or raise the attempt cap"
    )]
    InfeasibleBalance {
        attempts: u64,
        accepted: u64,
        rate: f64,
    },

    /// Exact enumeration was requested for a space larger than the cap.
    #[error(
        "assignment space has {cardinality} elements, above the enumeration cap \
         {cap}; use sampled mode"
    )]
    TooLarge { cardinality: u128, cap: u128 },

    /// The Monte Carlo estimate of the balance-set Gaussian mass was zero, so
    /// the conditional pushforward is undefined at this draw budget.
    #[error(
        "no Gaussian draws satisfied the balance criterion out of {draws}; \
         the conditional measure cannot be estimated — increase --draws-gauss"
    )]
    BalanceMass { draws: usize },

    /// A requested combination of design, estimator, and statistic is outside
    /// what the method supports.
    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
