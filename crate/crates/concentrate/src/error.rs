//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation required a scalar tensor but got something else.
    #[error("{op} requires a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    /// A segment to normalize has (near-)zero L2 norm.
    #[error("degenerate input: segment {start}..{end} has L2 norm {norm:e} <= {eps:e}")]
    DegenerateSegment {
        start: usize,
        end: usize,
        norm: f64,
        eps: f64,
    },

    /// A configuration or argument violated a documented invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// A label id was not found in the taxonomy.
    #[error("unknown label id {0}")]
    UnknownLabel(u32),

    /// A label has no vertical root among its ancestors.
    #[error("label {0} lies above all vertical roots; no vertical owns it")]
    NoVertical(u32),

    /// Soft-target routing found no teacher for a vertical.
    #[error("no teacher available for vertical {0}")]
    MissingTeacher(u32),

    /// The training set has samples without soft targets.
    #[error("missing soft targets for {count} samples (first ids: {first:?})")]
    MissingTargets { count: usize, first: Vec<u64> },

    /// A vertical (or split) contains no usable samples.
    #[error("no data: {0}")]
    NoData(String),

    /// Average precision is undefined without a positive sample.
    #[error("average precision undefined: no positive samples")]
    UndefinedAp,

    /// Checkpoint file is malformed, truncated, or from another version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A line-delimited record file failed to parse.
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI; each error family gets a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 3,
            Error::Io(_) => 4,
            Error::Parse { .. } | Error::Checkpoint(_) => 5,
            Error::UnknownLabel(_) | Error::NoVertical(_) => 6,
            Error::MissingTeacher(_) | Error::MissingTargets { .. } | Error::NoData(_) => 7,
            Error::UndefinedAp => 7,
            _ => 8,
        }
    }

    /// Short machine-parsable kind tag, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NotScalar { .. } => "contract",
            Error::DegenerateSegment { .. } => "degenerate-input",
            Error::Validation(_) => "validation",
            Error::UnknownLabel(_) => "lookup",
            Error::NoVertical(_) => "no-vertical",
            Error::MissingTeacher(_) => "routing",
            Error::MissingTargets { .. } => "missing-targets",
            Error::NoData(_) => "no-data",
            Error::UndefinedAp => "undefined-ap",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}
