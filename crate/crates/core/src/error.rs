use thiserror::Error;

/// Which of the two data blocks an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    X,
    Y,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::X => f.write_str("X"),
            Block::Y => f.write_str("Y"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero scale estimate in column {column}")]
    ZeroScale { column: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last: Vec<f64>,
    },

    #[error("degenerate deflation in {block} block at component {component}")]
    DegenerateDeflation { block: Block, component: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("all cases received the floor weight in the {0} block")]
    DegenerateWeights(Block),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
