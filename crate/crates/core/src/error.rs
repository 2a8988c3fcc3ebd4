use thiserror::Error;

/// Errors raised by the decoding library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("vocabulary must contain at least 2 tokens, got {0}")]
    VocabularyTooSmall(usize),

    #[error("token {token} is outside the vocabulary of size {size}")]
    InvalidToken { token: u32, size: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("distribution is not normalized: weights sum to {sum}")]
    NotNormalized { sum: f64 },

    #[error("distribution has an invalid entry {value} at index {index}")]
    InvalidWeight { index: usize, value: f64 },

    #[error("index sets differ: {left} vs {right} cells")]
    IndexMismatch { left: usize, right: usize },

    /// Every candidate continuation carries zero probability.
    #[error("joint distribution has no support")]
    DegenerateSupport,

    /// `max(p' - q, 0)` vanished; only reachable through rounding noise.
    #[error("residual distribution vanished")]
    DegenerateResidual,

    #[error("enumeration oracle limited to {cap} cells, requested {cells}")]
    OracleTooLarge { cells: usize, cap: usize },

    #[error("beam set must not be empty")]
    EmptyBeamSet,

    #[error("beams in a set must share one length")]
    RaggedBeamSet,

    #[error("survivor refers to root {root}, forest has {roots} roots")]
    UnknownRoot { root: usize, roots: usize },

    #[error("survivor refers to node {index} of layer {layer}, which does not exist")]
    UnknownNode { layer: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, DecodeError>;
