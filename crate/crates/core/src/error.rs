use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use crate::rules::RuleKind;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    NegativeEntry {
        op: &'static str,
        index: usize,
        value: f64,
    },
    MissingGate {
        rule: RuleKind,
        field: &'static str,
    },
    UnexpectedGate {
        rule: RuleKind,
        field: &'static str,
    },
    GateArity {
        rule: RuleKind,
        field: &'static str,
        expected: &'static str,
    },
    GateOutOfRange {
        field: &'static str,
        index: usize,
        value: f64,
    },
    NonFinite {
        op: &'static str,
    },
    ChunkwiseUnsupported(RuleKind),
    InvalidArgument(String),
    TokenOutOfRange {
        id: usize,
        vocab: usize,
    },
    /// Error raised while processing timestep `t` of a sequence.
    AtStep {
        t: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(t: usize, err: Error) -> Error {
        Error::AtStep {
            t,
            source: Box::new(err),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }

    /// Strips any [`Error::AtStep`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { op, expected, found } => {
                write!(f, "{op}: dimension mismatch (expected {expected}, found {found})")
            }
            Error::NegativeEntry { op, index, value } => {
                write!(f, "{op}: negative entry {value} at index {index}")
            }
            Error::MissingGate { rule, field } => {
                write!(f, "rule {rule} requires gate `{field}`")
            }
            Error::UnexpectedGate { rule, field } => {
                write!(f, "rule {rule} does not take gate `{field}`")
            }
            Error::GateArity { rule, field, expected } => write!(f, "rule {rule}: gate `{field}` must be {expected}"),
            Error::GateOutOfRange { field, index, value } => {
                write!(f, "gate `{field}`[{index}] = {value} outside [0, 1]")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::ChunkwiseUnsupported(rule) => {
                write!(f, "chunkwise unsupported for rule {rule}")
            }
            Error::InvalidArgument(msg) => f.write_str(msg),
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab}")
            }
            Error::AtStep { t, source } => write!(f, "at timestep {t}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
