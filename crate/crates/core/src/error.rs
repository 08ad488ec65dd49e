//! Error type shared by every pipeline stage.

use std::io;

use thiserror::Error;

/// Errors raised by the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not a .tpxs event stream (bad magic or version)")]
    BadMagic,
    #[error("truncated file: header declares {declared} records, payload holds {available}")]
    TruncatedFile { declared: u64, available: u64 },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("input events are not sorted by time of arrival (first violation at index {index})")]
    UnsortedInput { index: usize },
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("histogram has no counts")]
    EmptyHistogram,
    #[error("peak does not fall below half maximum before the histogram edge")]
    NoHalfCrossing,
    #[error("image has no positive pixels")]
    EmptyImage,
    #[error("image geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("cluster refers to event {index} but ground truth only labels {labels} events")]
    LabelMismatch { index: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid export scale {0}")]
    Scale(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
