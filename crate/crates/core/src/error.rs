use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the tensor engine and the network modules built on it.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes that cannot be combined by the requested operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, actual: usize },
    InvalidAxis { axis: usize, rank: usize },
    /// `backward` was called on a tensor holding more than one element.
    NonScalarLoss { shape: Vec<usize> },
    /// Two forward evaluations of the same function disagreed.
    NonDeterministic,
    InvalidConfig(String),
    /// A loss evaluated to NaN or infinity during training.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        heatmap: f64,
        pull: f64,
        push: f64,
    },
    /// OKS is undefined when the ground truth has no labeled keypoint.
    UndefinedOks,
    UnknownParameter(String),
    /// A progress callback reported a failure of its own.
    Callback(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig(detail.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::DataLength { expected, actual } => write!(
                f,
                "tensor data has {actual} elements but shape requires {expected}"
            ),
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} is out of range for a rank-{rank} tensor")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::NonDeterministic => {
                write!(f, "function returned different values for identical inputs")
            }
            Error::InvalidConfig(detail) => write!(f, "invalid configuration: {detail}"),
            Error::NonFiniteLoss {
                epoch,
                batch,
                heatmap,
                pull,
                push,
            } => write!(
                f,
                "non-finite loss at epoch {epoch}, batch {batch} (heatmap={heatmap}, pull={pull}, push={push})"
            ),
            Error::UndefinedOks => write!(f, "OKS undefined: ground truth has no labeled keypoints"),
            Error::UnknownParameter(name) => write!(f, "unknown parameter `{name}`"),
            Error::Callback(detail) => write!(f, "{detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
