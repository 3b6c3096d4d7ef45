use thiserror::Error;

/// Errors raised by ingestion, estimation and testing routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("line {line}: contradictory missingness flag")]
    ContradictoryMissingness { line: usize },

    #[error("treatment {treatment}, subject {subject}: duplicate visit time {time}")]
    DuplicateTime {
        treatment: i64,
        subject: i64,
        time: f64,
    },

    #[error("treatment {treatment}, subject {subject}: first visit is not observed")]
    FirstVisitMissing { treatment: i64, subject: i64 },

    #[error("inconsistent covariate dimension: expected {expected}, found {found}")]
    InconsistentDimension { expected: usize, found: usize },

    #[error("treatment {treatment}, subject {subject}: {found} visits, expected {expected}")]
    RaggedSchedule {
        treatment: i64,
        subject: i64,
        expected: usize,
        found: usize,
    },

    #[error("treatment sample {0} is empty or has fewer than two subjects")]
    EmptySample(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no observed visit within the kernel window at t = {t}")]
    EmptyWindow { t: f64 },

    #[error("zero is not inside the convex hull of the estimating functions")]
    HullViolation,

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("complete separation in the propensity fit")]
    CompleteSeparation,

    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    #[error("profile objective is infinite at the initial and fallback parameters")]
    InfeasibleStart,

    #[error("no common baseline value is feasible at t = {t}")]
    NoFeasibleG { t: f64 },

    #[error("estimated design density vanishes for treatment {0}")]
    DegenerateDensity(usize),

    #[error("sigma_D is not positive definite")]
    SingularSigmaD,

    #[error("{failures} of {reps} replicates failed; aborting")]
    TooManyFailures { failures: usize, reps: usize },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
