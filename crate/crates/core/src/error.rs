use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An analytic assumption (A1)-(A3), the mu gap or a contraction gate failed.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("no contraction: factor {factor:.6} >= 1 ({detail})")]
    NoContraction { factor: f64, detail: String },

    #[error("time window too short: {0}")]
    Window(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last ratio {last_ratio:.4}, residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        last_ratio: f64,
        residual: f64,
    },

    #[error("solver failure in {module} (sample {sample}): {source}")]
    Solver {
        module: &'static str,
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
