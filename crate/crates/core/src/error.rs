use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix for {context} is not positive definite after {attempts} factorization attempts (last jitter {jitter:e})")]
    Singular {
        context: String,
        attempts: u32,
        jitter: f64,
    },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("quadrature did not converge: estimated error {error:e} exceeds tolerance {tolerance:e}")]
    Quadrature { error: f64, tolerance: f64 },

    #[error("simulation failed at step {step}: {message}")]
    Simulation { step: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("iteration {iteration}, block {block}: {source}")]
    Block {
        iteration: usize,
        block: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} Monte Carlo likelihood evaluations underflowed; increase the sample count")]
    Underflow(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
