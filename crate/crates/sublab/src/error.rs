//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the lab's operations.
///
/// Variants carry enough context to be rendered into the machine-readable
/// error records the CLI writes on failure.
#[derive(Debug, Error)]
pub enum Error {
    /// A projection target or deflation direction has zero norm.
    #[error("zero vector: {0}")]
    ZeroVector(&'static str),

    /// A subspace basis is numerically rank deficient (Gram matrix has
    /// min eigenvalue < 1e-10 times its max eigenvalue).
    #[error("rank-deficient basis: min/max Gram eigenvalue ratio {ratio:.3e}")]
    RankDeficient { ratio: f64 },

    /// A word in a prompt does not name any vocabulary token.
    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    /// A prompt violates a structural constraint (empty, too long,
    /// more than one attack-token slot).
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    /// An attack-token slot in a prompt has no corresponding embedding.
    #[error("missing extra embedding for slot {0}")]
    MissingExtra(usize),

    /// A diffusion timestep is outside 1..=T.
    #[error("bad timestep {t} (schedule has {t_max} steps)")]
    BadTimestep { t: usize, t_max: usize },

    /// A loss was requested over an empty batch.
    #[error("empty batch")]
    EmptyBatch,

    /// A configuration key has an invalid or inconsistent value.
    #[error("bad config: {key}: {reason}")]
    BadConfig { key: String, reason: String },

    /// A training loop produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    /// Unlearning could not meet its gates within the iteration budget.
    #[error(
        "unlearning failed: target ASR {target_asr:.1}% (ceiling {ceiling:.1}%), \
         safe accuracy {safe_acc:.1}% (floor {floor:.1}%)"
    )]
    UnlearningFailed {
        target_asr: f64,
        ceiling: f64,
        safe_acc: f64,
        floor: f64,
    },

    /// A trained attack embedding collapsed to (numerically) zero.
    #[error("degenerate attack embedding (norm {norm:.3e})")]
    DegenerateAttack { norm: f64 },

    /// A learned basis column is numerically zero.
    #[error("basis rank collapse at column {column}")]
    BasisRankCollapse { column: usize },

    /// Basis columns are not mutually orthogonal within tolerance.
    #[error("basis columns {i} and {j} not orthogonal: relative inner product {value:.3e}")]
    BasisNotOrthogonal { i: usize, j: usize, value: f64 },

    /// Eval-set verification on the base model yielded too few pairs.
    #[error("insufficient verified pairs: yield {yield_percent:.1}% < 50%")]
    InsufficientVerifiedPairs { yield_percent: f64 },

    /// Source and target models disagree on dimensions or vocabulary.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A defense was requested with an unusable blocked-column count.
    #[error("bad block count {requested} (basis has {available} columns)")]
    BadBlockCount { requested: usize, available: usize },

    /// A report required by an export is not present in the run directory.
    #[error("missing report: {0}")]
    MissingReport(String),

    /// A container file is malformed or carries an unexpected kind.
    #[error("container format error: {0}")]
    ContainerFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
