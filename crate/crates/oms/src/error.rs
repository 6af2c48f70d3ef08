//! Crate-wide error type.
//!
//! Variants mirror the failure modes of the pipeline: schema mismatches
//! between a sample and the moment function consuming it, configuration
//! mistakes, identification failures at estimation time, and degenerate
//! numerical situations. Recoverable numerical conditions (singular moment
//! covariance, boundary-clipped estimates) are *not* errors — they are
//! reported through diagnostics flags so that Monte Carlo runs keep going.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A sample is missing a variable that the moment or nuisance function
    /// requires (for example a CSV row without a `Z` column).
    #[error("schema error: variable `{variable}` not present in {context}")]
    Schema { variable: String, context: String },

    /// The run configuration is inconsistent or incomplete: unknown scenario
    /// family, missing nuisance slot, absent ground truth, parameter out of
    /// range, and similar.
    #[error("configuration error: {0}")]
    Config(String),

    /// A propensity evaluated outside the open interval (0, 1). Callers are
    /// expected to clamp fitted propensities first; hitting this indicates a
    /// misconfigured oracle nuisance.
    #[error("positivity error: propensity {value} outside (0, 1)")]
    Positivity { value: f64 },

    /// A model shape the implementation deliberately does not cover, such as
    /// a frontdoor score with non-binary treatment or mediator.
    #[error("unsupported model: {0}")]
    Unsupported(String),

    /// A moment coordinate has zero selected records in the log, so the GMM
    /// objective carries no information about it.
    #[error("under-identification: moment `{moment}` has no selected records")]
    UnderIdentified { moment: String },

    /// Every allocation on the simplex evaluated to an infinite variance —
    /// the exploration data cannot rank allocations at all.
    #[error("degenerate variance surface: all allocations are infeasible")]
    DegenerateSurface,

    /// A requested aggregate is undefined, e.g. relative regret against an
    /// oracle baseline with zero mean squared error.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A CSV cell failed to parse as a number. Row numbers are 1-based and
    /// count data rows (the header is row 0).
    #[error("csv error in {path}: row {row}, column `{column}`: {message}")]
    Csv {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return Error::Io(io);
            }
            unreachable!("is_io_error guarantees an Io kind");
        }
        Error::Config(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
