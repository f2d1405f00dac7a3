use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("spaces are not nested: {0}")]
    NotNested(String),
    #[error("point outside parametric domain: {0}")]
    OutOfDomain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corner mismatch at {corner}: distance {distance:e}")]
    CornerMismatch { corner: String, distance: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("map is not bijective: {0}")]
    NotBijective(String),
    #[error("constraint infeasible: {0}")]
    Infeasible(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
