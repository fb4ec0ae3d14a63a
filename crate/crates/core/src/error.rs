use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between configuration and a finished estimate.
///
/// Variants are grouped by how a front-end should react: schema and validation
/// problems are user configuration errors, positivity and common-support
/// problems are properties of the data, and convergence problems come from
/// nuisance-model fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("undefined conditional: evidence {evidence} has probability zero")]
    UndefinedConditional { evidence: String },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("common support violated: {0}")]
    CommonSupport(String),

    #[error("race variable `{0}` is not binary in the cohort")]
    RaceNotBinary(String),

    #[error("response `{response}` is constant within the fitting group{}", group_suffix(.group))]
    DegenerateResponse { response: String, group: Option<String> },

    #[error("model for `{response}` did not converge after ridge fallback (log-likelihood trace: {trace:?})")]
    NonConvergence { response: String, trace: Vec<f64> },

    #[error("model has not been fitted: {0}")]
    Unfitted(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    #[error("bootstrap failed: {failed} of {total} replicates errored (first error: {first})")]
    Bootstrap { failed: usize, total: usize, first: String },

    #[error("infeasible cohort: selection probability {0:.3e} is below 1e-4")]
    InfeasibleCohort(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn group_suffix(group: &Option<String>) -> String {
    match group {
        Some(g) => format!(" `{g}`"),
        None => String::new(),
    }
}

impl Error {
    /// Positivity-type failures: the estimand or its weights are undefined on the data.
    pub fn is_positivity(&self) -> bool {
        matches!(
            self,
            Error::Positivity(_) | Error::CommonSupport(_) | Error::UndefinedConditional { .. }
        )
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Validation(_)
                | Error::RaceNotBinary(_)
                | Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::EmptyCohort(_)
        )
    }

    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::DegenerateResponse { .. } | Error::SingularDesign(_)
        )
    }
}
