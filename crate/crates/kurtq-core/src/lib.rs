//! Quantization-aware training with a kurtosis weight regularizer, at desk scale.
//!
//! The crate provides the numeric core of the toolkit and is `no_std`
//! (`alloc` required): dense FP32 tensors and kernels, a reverse-mode
//! autodiff tape, symmetric uniform FP32→INT8 quantization with
//! straight-through fake-quantize, kurtosis statistics and the selective
//! kurtosis regularizer, a toy transformer encoder with QAT
//! instrumentation, and the fine-tune → QAT → quantize → evaluate
//! pipeline. File formats, CSV/JSON export, and the command-line driver
//! live in the companion `kurtq-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod kure;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
