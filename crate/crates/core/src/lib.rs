//! Bit-exact FP8 emulation and a post-training quantization toolkit for
//! scaled FP8 matrix multiplication.
//!
//! The crate emulates three 8-bit floating-point variants in software and
//! builds the full inference quantization stack on top of them:
//!
//! - [`codec`]: encode/decode between `f64` and FP8 codes, with
//!   round-to-nearest-even and deterministic stochastic rounding
//! - [`tensor`]: row-major matrices, elementwise scaling and the FP8 x FP8
//!   product with `f32` accumulation
//! - [`calib`]: streaming maxabs statistics over calibration batches
//! - [`scaling`]: unit, maxabs, error-minimizing and smoothing scale
//!   strategies, with power-of-two and hardware-set scale constraints
//! - [`qlinear`]: the deployable quantized linear layer (offline weight
//!   quantization, online activation quantization, scaled GEMM, descaling)
//! - [`recipe`]: calibrate, quantize under candidate configs, measure
//!   degradation against a threshold and select a winner
//! - [`model`]: directory formats for models, datasets and quantized output

pub mod calib;
pub mod codec;
pub mod error;
pub mod model;
pub mod qlinear;
pub mod recipe;
pub mod scaling;
pub mod tensor;

pub use codec::{decode, encode, round_trip, Fp8Format, OverflowPolicy, RoundingMode};
pub use error::{Error, Result};
pub use tensor::{DType, ScaleAxis, ScaleVector, Tensor};
