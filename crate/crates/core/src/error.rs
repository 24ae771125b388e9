//! Crate-wide error type.
//!
//! Every fallible operation returns a typed error instead of a silent NaN or
//! a clamped value. Variants are shared across modules because the failure
//! vocabulary overlaps heavily (boundary policies, dimension mismatches,
//! support violations show up everywhere).

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input vector is empty")]
    EmptyInput,

    #[error("a distribution needs at least 2 entries, got {got}")]
    TooFewEntries { got: usize },

    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },

    #[error("entries sum to {sum}, too far from 1 to renormalize")]
    NotNormalized { sum: f64 },

    #[error("non-finite value in {what}")]
    NonfiniteValue { what: &'static str },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("argmax is tied between indices {first} and {second}; alpha = 0 needs a unique maximum")]
    TiedArgmax { first: usize, second: usize },

    #[error("support violation: p[{index}] > 0 but q[{index}] = 0")]
    SupportViolation { index: usize },

    #[error("query index {query} out of range")]
    UnknownQuery { query: usize },

    #[error("response {response} unknown for query {query}")]
    UnknownResponse { query: usize, response: usize },

    #[error("winner and loser are the same response ({response}) for query {query}")]
    SameResponse { query: usize, response: usize },

    #[error("response {response} repeated within a tuple for query {query}")]
    DuplicateResponse { query: usize, response: usize },

    #[error("marginal not strictly positive on {detail}")]
    ZeroMarginal { detail: String },

    #[error("both responses have probability 0 for query {query}")]
    ZeroMass { query: usize },

    #[error("policy is 0 at query {query}, response {response}, which the loss references")]
    BoundaryPolicy { query: usize, response: usize },

    #[error("alpha must be strictly positive for this loss, got {alpha}")]
    NonpositiveAlpha { alpha: f64 },

    #[error("precondition violated: {detail}")]
    PreconditionViolated { detail: String },

    #[error("non-finite gradient at query {query}, response {response}")]
    NonfiniteGradient { query: usize, response: usize },

    #[error("loss increased for {streak} consecutive iterations (last at iteration {iter}); step size likely too large")]
    DivergenceDetected { iter: usize, streak: usize },

    #[error("flow run from initialization {init} failed: {source}")]
    InitFailed {
        init: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid of {points} points exceeds the cap of {cap}")]
    GridTooLarge { points: u128, cap: u128 },

    #[error("policy entry at query {query}, response {response} is within h of the boundary")]
    BoundaryTooClose { query: usize, response: usize },

    #[error("enumeration of {count} sequences exceeds the cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("invalid sequence: {detail}")]
    InvalidSequence { detail: String },

    #[error("invalid parameter: {detail}")]
    InvalidParameter { detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
