use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not match what the operation requires.
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        actual: String,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("function is not deterministic: two evaluations on identical inputs differ")]
    NonDeterministic,

    #[error(
        "no sign change of the mean activation on bracket [{lo}, {hi}] (mean {mean_lo} .. {mean_hi})"
    )]
    NoRoot {
        lo: f64,
        hi: f64,
        mean_lo: f64,
        mean_hi: f64,
    },

    #[error("bisection stalled at c = {c} with |mean| = {residual} (tolerance {tol})")]
    NotConverged { c: f64, residual: f64, tol: f64 },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error(
        "dataset file {} not found; download the CIFAR-100 binary version from \
         https://www.cs.toronto.edu/~kriz/cifar.html and point the data directory at the extracted folder",
        path.display()
    )]
    MissingData { path: PathBuf },

    #[error("{}: expected {expected} bytes ({records} records of {record_len}), found {actual}", path.display())]
    DataLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
        records: u64,
        record_len: u64,
    },

    #[error("class {class} has only {available} samples, {requested} requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
