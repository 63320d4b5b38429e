use std::io;

use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row count mismatch: header declares {declared}, file holds {found}")]
    RowCount { declared: usize, found: usize },

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("label {label} at point {point} out of range (num_classes = {num_classes})")]
    LabelOutOfRange {
        point: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NotFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
