use thiserror::Error;

use crate::tuning::RelaxationStep;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, grid sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Too many divergent draws at a step size used for a scaling fit.
    #[error("unstable regime at step size {eps}: {n_divergent} of {n} draws diverged")]
    UnstableRegime { eps: f64, n_divergent: usize, n: usize },

    /// A moment estimate is statistically indistinguishable from zero.
    #[error("insufficient signal at step size {eps}: estimate {estimate:e} with standard error {se:e}")]
    InsufficientSignal { eps: f64, estimate: f64, se: f64 },

    #[error("degenerate variance: all within-chain variances are zero")]
    DegenerateVariance,

    /// Divergences persisted at the maximum acceptance target.
    #[error("divergences persist at the maximum target {max_target}")]
    TargetSearchExhausted { max_target: f64, trace: Vec<RelaxationStep> },

    #[error("chain {index}: {source}")]
    Chain {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}
