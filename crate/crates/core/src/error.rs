use std::path::PathBuf;

use crate::model::UnitKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Layer/kind pair whose minimum-retention requirement contributes to an
/// infeasible budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BindingLayer {
    pub layer: usize,
    pub kind: UnitKind,
    pub min_keep: usize,
    pub min_cost: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbeddingDim { expected: usize, got: usize },

    #[error("expected {expected} vision embeddings, got {got}")]
    VisionCount { expected: usize, got: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unit {0} is out of range for this model")]
    UnitOutOfRange(String),

    #[error("keep-set would empty layer {layer} ({kind:?})")]
    EmptyLayer { layer: usize, kind: UnitKind },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: {0}")]
    ShapeMismatch(String),

    #[error("corpus line {line}: {message}")]
    CorpusLine { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no sample has pivot positions")]
    NoPivots,

    #[error("importance tables cover different unit sets")]
    UnitUniverseMismatch,

    #[error("a modality has zero positions at the profiled sublayers")]
    MissingModality,

    #[error("minimum retention needs {required} parameters but the budget is {budget}")]
    Infeasible {
        required: u64,
        budget: u64,
        binding: Vec<BindingLayer>,
    },

    #[error("no finite KL positions remain after filtering")]
    NoValidPositions,

    #[error("schema version {found} does not match expected {expected}")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::EmbeddingDim { .. } => "embedding_dim",
            Error::VisionCount { .. } => "vision_count",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptyMask => "empty_mask",
            Error::NonFinite(_) => "non_finite",
            Error::UnitOutOfRange(_) => "unit_out_of_range",
            Error::EmptyLayer { .. } => "empty_layer",
            Error::BadMagic => "bad_magic",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::CorpusLine { .. } => "corpus_line",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoPivots => "no_pivots",
            Error::UnitUniverseMismatch => "unit_universe_mismatch",
            Error::MissingModality => "missing_modality",
            Error::Infeasible { .. } => "infeasible",
            Error::NoValidPositions => "no_valid_positions",
            Error::SchemaVersion { .. } => "schema_version",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
