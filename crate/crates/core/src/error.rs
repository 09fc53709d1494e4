use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input that should be finite or well-formed was not.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// `trace` holds the finite objective values reached before the failure.
    #[error("objective became non-finite ({value}) at iteration {iteration}")]
    Diverged { iteration: usize, value: f64, trace: Vec<f64> },

    /// A fit inside a regularization chain failed; the offending penalty
    /// strengths are attached.
    #[error("fit failed at lambda = {lambdas:?}: {source}")]
    ChainFit {
        lambdas: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("block {block}: binary block has no {missing_class} cells, stratified holdout impossible")]
    StratificationImpossible { block: usize, missing_class: &'static str },

    #[error("simulation infeasible: rejection sampling exhausted {attempts} attempts")]
    SimulationInfeasible { attempts: usize },

    #[error("dispersion estimation failed: {0}")]
    Estimation(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Numerical failures (divergence, decomposition breakdown) as opposed to
    /// bad input. The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Diverged { .. } | Error::Linalg(_) | Error::InvalidState(_) => true,
            Error::ChainFit { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
