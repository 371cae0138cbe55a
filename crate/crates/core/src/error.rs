use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("point ({x}, {y}) lies outside the meshed region")]
    OutOfDomain { x: f64, y: f64 },

    #[error("point {index} lies outside the domain")]
    PointOutOfDomain { index: usize },

    #[error("degenerate triangle {triangle} in FEM assembly")]
    Assembly { triangle: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("chain initialisation failed: {0}")]
    Init(String),

    #[error("chain stuck: block `{block}` rejected {count} consecutive proposals")]
    StuckChain { block: String, count: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("release refused: {metric} = {value:e} exceeds ceiling {ceiling:e}")]
    ReleaseRefused {
        metric: String,
        value: f64,
        ceiling: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Init(_) | Error::StuckChain { .. } | Error::Assembly { .. } => 3,
            Error::ReleaseRefused { .. } => 4,
            _ => 2,
        }
    }
}
