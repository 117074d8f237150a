use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("unbalanced panel: {0}")]
    Balance(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Unit `unit` switches back to control at `period` (both 1-based).
    #[error("non-absorbing treatment path for unit {unit}: treated before period {period} but control at it")]
    NonAbsorbing { unit: usize, period: usize },

    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("factor column {column} is rank deficient among active factors")]
    DegenerateFactor { column: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("chain failed at sweep {sweep} in step `{step}`: {source}")]
    Chain {
        sweep: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("study aborted: {failures} of {reps} replications failed")]
    StudyAborted { failures: usize, reps: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_step(self, sweep: usize, step: &'static str) -> Error {
        Error::Chain {
            sweep,
            step,
            source: Box::new(self),
        }
    }
}
