//! Error type shared across the estimation pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum JcelError {
    /// Two points that must be distinct coincide (zero propagation distance).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A composite path delay exceeds the cyclic prefix window.
    #[error("path delay {delay_s:.3e} s exceeds cyclic prefix {cp_s:.3e} s (user {user}, waveguide {waveguide}, element {element})")]
    CyclicPrefixViolation {
        delay_s: f64,
        cp_s: f64,
        user: usize,
        waveguide: usize,
        element: usize,
    },

    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bessel-ratio inversion asked for a mean resultant length >= 1.
    #[error("bessel ratio saturation: mean resultant length {0} not invertible")]
    Saturation(f64),

    /// Anchor layout cannot determine a position (singular information matrix).
    #[error("rank-deficient geometry: {0}")]
    RankDeficientGeometry(String),

    /// A linear solve failed (singular or not positive definite).
    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, JcelError>;
