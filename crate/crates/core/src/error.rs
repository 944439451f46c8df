use thiserror::Error;

#[derive(Debug, Error)]
pub enum VasError {
    #[error("cell index {index} out of range for grid of {cells} cells")]
    IndexOutOfRange { index: usize, cells: usize },

    #[error("cell {0} has already been queried")]
    AlreadyExplored(usize),

    #[error("query to cell {cell} costs {cost} but only {remaining} budget remains")]
    InsufficientBudget { cell: usize, cost: f64, remaining: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no allowed cells to choose from")]
    EmptyAllowedSet,

    #[error("requested {requested} picks but only {available} cells are allowed")]
    NotEnoughAllowed { requested: usize, available: usize },

    #[error("probability vector has no mass")]
    DegenerateDistribution,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("episode is terminal: no affordable unexplored cell")]
    Terminal,

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl VasError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        VasError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        VasError::Parse {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            VasError::Io { .. } => 2,
            VasError::Csv(e) if e.is_io_error() => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, VasError>;
