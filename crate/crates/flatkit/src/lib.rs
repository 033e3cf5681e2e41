//! flatkit: learnable Kronecker-factored affine transforms for low-bit
//! post-training quantization, plus the baselines they are measured
//! against, on synthetic desk-scale transformers.
//!
//! The crate is organized around the quantization pipeline:
//!
//! - [`linalg`]: dense `f64` matrices, Cayley-parameterized orthogonal
//!   factors, SVD-form invertible matrices, Hadamard construction, and
//!   Kronecker application.
//! - [`quant`]: symmetric/asymmetric integer fake-quantization, learnable
//!   clipping thresholds, and GPTQ with Hessian error compensation.
//! - [`transforms`]: the pre-quantization transformation zoo and the
//!   decomposition-size selection.
//! - [`model`]: a tiny LLaMA-like transformer with all six transform
//!   insertion points, runnable in full precision or fake-quantized.
//! - [`calibrate`]: block-wise gradient calibration of the transforms on a
//!   reverse-mode tape, with straight-through rounding, AdamW, and cosine
//!   learning-rate decay.
//! - [`analysis`]: flatness metrics, quantization-error landscapes, and
//!   the FLOPs/memory/kernel-case overhead accounting.
//! - [`container`], [`store`], and [`config`]: the portable tensor
//!   container, the model/data/transform serialization on top of it, and
//!   the JSON run configuration used by the CLI.
//! - [`gen`]: deterministic synthesis of models and calibration data with
//!   planted outlier channels and pivot tokens.
//!
//! All computation is in `f64` with fixed accumulation orders; every
//! random quantity flows from explicit seeds, so a fixed seed reproduces
//! every trace bit for bit.

pub mod analysis;
pub mod calibrate;
pub mod config;
pub mod container;
pub mod error;
pub mod gen;
pub mod linalg;
pub mod model;
pub mod quant;
pub mod store;
pub mod transforms;

pub use error::{Error, Result};
