//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; variants carry enough context
//! (unit names, expected vs. actual shapes, file paths) to debug a failing
//! run from the message alone.

use std::fmt;

/// Unified error for tensor math, adaptation runs, and artifact I/O.
#[derive(Debug)]
pub enum Error {
    /// A tensor had the wrong shape for the operation.
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    /// A batch was too small to compute batch statistics.
    BatchTooSmall { context: String, n: usize },
    /// Gradients were read before any backward pass populated them.
    MissingGrads { unit: String },
    /// A loss, gradient, or parameter became NaN or infinite.
    NonFinite { context: String },
    /// An argument violated a documented precondition.
    InvalidArg { context: String },
    /// A class had no examples where at least one was required.
    ClassMissing { class: usize },
    /// A dataset or stream was empty.
    Empty { context: String },
    /// A one-shot stream was iterated a second time.
    StreamConsumed,
    /// A penalty vector or checkpoint did not match the model layout.
    LayoutMismatch { context: String },
    /// Underlying file I/O failed.
    Io { path: String, source: std::io::Error },
    /// An artifact file was malformed.
    Format { path: String, detail: String },
    /// An artifact's recorded hash did not match its content or its
    /// declared upstream artifact.
    HashMismatch { path: String, detail: String },
    /// A run configuration was inconsistent or contained unknown keys.
    Config { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                expected,
                actual,
            } => write!(f, "{context}: expected shape {expected}, got {actual}"),
            Error::BatchTooSmall { context, n } => {
                write!(f, "{context}: batch of {n} is too small for batch statistics")
            }
            Error::MissingGrads { unit } => {
                write!(f, "unit {unit}: gradients read before a backward pass")
            }
            Error::NonFinite { context } => write!(f, "{context}: non-finite value"),
            Error::InvalidArg { context } => write!(f, "invalid argument: {context}"),
            Error::ClassMissing { class } => {
                write!(f, "class {class} has no examples")
            }
            Error::Empty { context } => write!(f, "{context} is empty"),
            Error::StreamConsumed => {
                write!(f, "target stream already consumed; streams are single-pass")
            }
            Error::LayoutMismatch { context } => write!(f, "layout mismatch: {context}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::Format { path, detail } => write!(f, "{path}: malformed artifact: {detail}"),
            Error::HashMismatch { path, detail } => write!(f, "{path}: hash mismatch: {detail}"),
            Error::Config { detail } => write!(f, "configuration error: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Shorthand for a shape error with formatted expected/actual strings.
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Shorthand for an invalid-argument error.
    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidArg {
            context: context.into(),
        }
    }

    /// Shorthand for an I/O error tagged with its path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
