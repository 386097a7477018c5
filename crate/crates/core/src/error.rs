use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("need at least {needed} uncensored patients to build {needed} intervals, found {found}")]
    TooFewEvents { needed: usize, found: usize },

    #[error("patient {patient}: survival time must be positive, got {time}")]
    NonPositiveTime { patient: String, time: f64 },

    #[error("bin edges are not strictly ascending: {0:?}")]
    DegenerateBins(Vec<f64>),

    #[error("missing rates ({pathology}%, {genomics}%) exceed 100% in total")]
    MissingRates { pathology: f64, genomics: f64 },

    #[error("cannot split {n} patients into {k} folds")]
    FoldCount { n: usize, k: usize },

    #[error("patient {patient}: {path}: {reason}")]
    Feature {
        patient: String,
        path: PathBuf,
        reason: String,
    },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("class id {class_id} outside 1..={n_classes}")]
    ClassId { class_id: usize, n_classes: usize },

    #[error("interval {interval} outside 1..={n_intervals}")]
    Interval { interval: usize, n_intervals: usize },

    #[error("sequence length {len} exceeds encoder limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no comparable pairs for the concordance index")]
    NoComparablePairs,

    #[error("no patient has the {0} modality available")]
    NoSamples(&'static str),

    #[error("patient has no modality available")]
    NoModality,

    #[error("the {0} modality is present for this patient; it is not a distillation target")]
    ModalityPresent(&'static str),

    #[error("empty bag")]
    EmptyBag,

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("unexpected parameter {0}")]
    UnknownParam(String),

    #[error("DSPR magic mismatch")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    CheckpointVersion { found: u16, supported: u16 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("{0}")]
    Untrained(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::TooFewEvents { .. } => "too_few_events",
            Error::NonPositiveTime { .. } => "non_positive_time",
            Error::DegenerateBins(_) => "degenerate_bins",
            Error::MissingRates { .. } => "missing_rates",
            Error::FoldCount { .. } => "fold_count",
            Error::Feature { .. } => "feature_file",
            Error::Manifest { .. } => "manifest",
            Error::ClassId { .. } => "class_id",
            Error::Interval { .. } => "interval",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::NoComparablePairs => "no_comparable_pairs",
            Error::NoSamples(_) => "no_samples",
            Error::NoModality => "no_modality",
            Error::ModalityPresent(_) => "modality_present",
            Error::EmptyBag => "empty_bag",
            Error::MissingParam(_) => "missing_param",
            Error::UnknownParam(_) => "unknown_param",
            Error::CheckpointMagic => "checkpoint_magic",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointCorrupt(_) => "checkpoint_corrupt",
            Error::Untrained(_) => "untrained",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
