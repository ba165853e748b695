use thiserror::Error;

/// Errors produced by the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// The input table is structurally unusable (missing column, duplicate rows, ...).
    #[error("format error: {0}")]
    Format(String),

    /// One or more records carry cell names that do not follow the nomenclature.
    #[error("invalid cell names: {}", .0.join(", "))]
    CellNames(Vec<String>),

    /// A cell was requested that is not present in the tree.
    #[error("unknown cell: {0}")]
    UnknownCell(String),

    /// An argument violated a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numerical operation produced no usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A chain update failed at a given iteration.
    #[error("chain failure at iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// The sampler did not converge within the iteration budget.
    #[error("no convergence within {max_iterations} iterations; final R-hat {rhats:?}")]
    NoConvergence {
        max_iterations: usize,
        rhats: Vec<(String, f64)>,
    },

    /// The tree has no candidate change points.
    #[error("empty candidate set: tree too small for detection")]
    EmptyCandidateSet,

    /// Classifier training failed.
    #[error("training error: {0}")]
    Training(String),

    /// Onset refinement failed.
    #[error("refinement error: {0}")]
    Refinement(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
