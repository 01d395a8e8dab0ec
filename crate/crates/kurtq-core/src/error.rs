//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor kernels, the tape, the quantizer, and the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Tensor construction with data length != product of dimensions.
    BadShape { expected: usize, got: usize },
    /// An argument is outside its documented domain.
    BadParam { what: &'static str, value: f64 },
    /// A statistic was requested on a tensor that cannot support it.
    Degenerate { what: &'static str, numel: usize },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { numel: usize },
    /// Token id outside the vocabulary.
    TokenOutOfRange { token: usize, vocab: usize },
    /// A named parameter tensor is missing from the model.
    MissingParam { name: String },
    /// INT8 evaluation requested without calibrated activation scales.
    MissingCalibration { site: String },
    /// The training loss became non-finite.
    Divergence {
        step: usize,
        task_loss: f32,
        kure_loss: f32,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::BadShape { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::BadParam { what, value } => write!(f, "invalid {what}: {value}"),
            Error::Degenerate { what, numel } => {
                write!(f, "{what} undefined for tensor with {numel} element(s)")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} out of range for vocab {vocab}")
            }
            Error::MissingParam { name } => write!(f, "missing parameter tensor '{name}'"),
            Error::MissingCalibration { site } => {
                write!(f, "no calibrated activation scale for site '{site}'")
            }
            Error::Divergence {
                step,
                task_loss,
                kure_loss,
            } => write!(
                f,
                "non-finite loss at step {step} (task {task_loss}, kurtosis {kure_loss})"
            ),
        }
    }
}

impl core::error::Error for Error {}
