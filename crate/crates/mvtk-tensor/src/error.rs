use std::fmt;

use crate::shape::Shape;

/// Structured tensor-engine errors. Shape errors name the offending dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    GroupMismatch {
        op: &'static str,
        channels: usize,
        groups: usize,
        which: &'static str,
    },
    PatchDivisibility {
        h: usize,
        w: usize,
        ph: usize,
        pw: usize,
    },
    NonScalarLoss {
        shape: Shape,
    },
    Config(String),
    Io(String),
    Format(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::GroupMismatch {
                op,
                channels,
                groups,
                which,
            } => write!(
                f,
                "{op}: groups={groups} does not divide {which} channels={channels}"
            ),
            TensorError::PatchDivisibility { h, w, ph, pw } => write!(
                f,
                "spatial dims {h}x{w} not divisible by patch {ph}x{pw}"
            ),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape}")
            }
            TensorError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            TensorError::Io(msg) => write!(f, "io error: {msg}"),
            TensorError::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
