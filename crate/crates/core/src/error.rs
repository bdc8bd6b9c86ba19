use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss was not recorded on an active tape")]
    NoTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("every loss term is disabled")]
    AllTermsDisabled,
    #[error("bad distribution spec: {0}")]
    BadDistributionSpec(String),
    #[error("conditional p(z_x | z_syn) unavailable: {0}")]
    ConditionalUnavailable(String),
    #[error("non-positive value {value} at index {index}")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("class {class} has {available} examples, {required} required")]
    InsufficientClassExamples {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u32, supported: u32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used for diagnostics and result records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::DomainError(_) => "DomainError",
            Error::InvalidAxis { .. } => "InvalidAxis",
            Error::NotScalar(_) => "NotScalar",
            Error::NoTape => "NoTape",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::EmptyBatch => "EmptyBatch",
            Error::AllTermsDisabled => "AllTermsDisabled",
            Error::BadDistributionSpec(_) => "BadDistributionSpec",
            Error::ConditionalUnavailable(_) => "ConditionalUnavailable",
            Error::NonPositiveValue { .. } => "NonPositiveValue",
            Error::EmptyGrid => "EmptyGrid",
            Error::InsufficientClassExamples { .. } => "InsufficientClassExamples",
            Error::UnknownClass(_) => "UnknownClass",
            Error::BadMagic { .. } => "BadMagic",
            Error::CountMismatch(_) => "CountMismatch",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::BadShape(_) => "BadShape",
            Error::VersionUnsupported { .. } => "VersionUnsupported",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
