use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiceError>;

/// Errors surfaced by the engine.
///
/// Messages are stable: the CLI and FFI layers forward them verbatim.
#[derive(Debug, Error)]
pub enum DiceError {
    #[error("empty prompt embedding set")]
    EmptyPromptSet,
    #[error("degenerate text token")]
    DegenerateTextToken,
    #[error("non-finite tokens")]
    NonFiniteTokens,
    #[error("image not patch-aligned: {height}x{width} with patch size {patch}")]
    NotPatchAligned {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("not a DTF file")]
    NotDtf,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no reference provided")]
    NoReference,
    #[error("empty map")]
    EmptyMap,
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("degenerate noise field")]
    DegenerateNoise,
    #[error("degenerate adaptation")]
    DegenerateAdaptation,
    #[error("empty pseudo mask")]
    EmptyPseudoMask,
    #[error("degenerate similarity")]
    DegenerateSimilarity,
    #[error("TTA diverged")]
    TtaDiverged,
    #[error("undefined AUROC")]
    UndefinedAuroc,
    #[error("undefined AP")]
    UndefinedAp,
    #[error("undefined F1")]
    UndefinedF1,
    #[error("undefined PRO")]
    UndefinedPro,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("image decode error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DiceError {
    /// Process exit code used by the `dice` binary: 2 for configuration
    /// problems, 3 for everything rooted in the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiceError::Config(_) | DiceError::InvalidArgument(_) => 2,
            _ => 3,
        }
    }
}

impl From<image::ImageError> for DiceError {
    fn from(e: image::ImageError) -> Self {
        DiceError::Image(e.to_string())
    }
}
