use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("degenerate phase gradient |grad u| = {0:e}")]
    DegenerateGradient(f64),
    #[error("unknown piece: {0}")]
    UnknownPiece(String),
    #[error("angular grid too coarse for octave {j}: a patch holds only {nodes} nodes (need 4)")]
    UnderResolved { j: i32, nodes: usize },
    #[error("empty grid")]
    EmptyGrid,
    #[error("malformed array file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
