//! Modality-balanced post-training quantization, without the standard library.
//!
//! The crate holds every algorithm of the toolkit: dense tensors, uniform
//! integer quantization, channel-wise equalization search under
//! gradient-weighted objectives, a toy vision-language transformer with
//! hand-written backward pass, sub-byte weight packing with a fused
//! dequantize-GEMV, and the pipeline that ties them together. File formats,
//! timing and the command line live in the `mbq` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod calib;
mod error;
pub mod pack;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod toyvlm;

pub use error::{Error, Result};
pub use tensor::{Matrix, ModalBatch, Modality, Rng};
