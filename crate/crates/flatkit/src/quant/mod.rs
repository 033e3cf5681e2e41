//! Integer fake-quantization.
//!
//! Simulates low-bit integer grids in `f64`: quantize-then-dequantize with
//! the same codes, scales, and clamping an integer kernel would use, so the
//! rounding error is real while the arithmetic stays floating point.
//!
//! Conventions, fixed so reimplementations are bit-comparable:
//! - Rounding is round-half-away-from-zero (`f64::round`).
//! - Symmetric codes live in the signed range `[-2^(b-1), 2^(b-1)-1]` with
//!   step `s = clip * max|x| / (2^(b-1) - 1)`; the unsigned-grid notation
//!   some descriptions use is mapped onto this signed range.
//! - Asymmetric codes live in `[0, 2^b - 1]` with step
//!   `s = clip * (max - min) / (2^b - 1)` and the clipped minimum kept as a
//!   real-valued offset, so constant groups reconstruct exactly.
//! - All-zero (or constant, for asymmetric) slices use a sentinel scale of 1
//!   and code 0: no division by zero, output unchanged.

mod gptq;

pub use gptq::{gptq_quantize, proxy_loss, rtn_quantize, GptqOutput};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Symmetric grids are centered on zero; asymmetric grids span `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

/// Which slices of a tensor share one quantization scale.
///
/// `PerChannel` and `PerToken` both quantize along rows in this library's
/// layouts (weights are `out x in` with one output channel per row;
/// activations are `tokens x features` with one token per row); keeping the
/// two names preserves which tensor role a spec is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerChannel,
    PerToken,
    PerGroup(usize),
}

/// Bit-width, symmetry, granularity, and static clip for one tensor role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    /// Fraction of the max-magnitude (or min/max range) kept before
    /// clamping; in `(0, 1]`.
    pub clip_ratio: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, scheme: Scheme, granularity: Granularity, clip_ratio: f64) -> Result<Self> {
        let spec = Self { bits, scheme, granularity, clip_ratio };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(Error::InvalidArg(format!("bit-width {} below 2", self.bits)));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "clip ratio {} outside (0, 1]",
                self.clip_ratio
            )));
        }
        if let Granularity::PerGroup(g) = self.granularity {
            if g == 0 {
                return Err(Error::InvalidArg("group size zero".into()));
            }
        }
        Ok(())
    }

    /// Per-channel symmetric weights at `bits` (the weight-side default).
    pub fn weight_sym(bits: u32) -> Self {
        Self { bits, scheme: Scheme::Symmetric, granularity: Granularity::PerChannel, clip_ratio: 1.0 }
    }

    /// Per-token symmetric activations at `bits`.
    pub fn act_sym(bits: u32) -> Self {
        Self { bits, scheme: Scheme::Symmetric, granularity: Granularity::PerToken, clip_ratio: 1.0 }
    }

    /// Group-wise asymmetric KV cache at `bits` with head-dimension groups.
    pub fn kv_asym(bits: u32, group: usize) -> Self {
        Self { bits, scheme: Scheme::Asymmetric, granularity: Granularity::PerGroup(group), clip_ratio: 1.0 }
    }

    pub fn qmax_sym(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }

    pub fn code_min_sym(&self) -> f64 {
        -((1u64 << (self.bits - 1)) as f64)
    }

    pub fn qmax_asym(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }
}

/// Learnable clipping thresholds for one linear layer, stored as
/// pre-sigmoid logits so the effective thresholds stay inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParam {
    pub theta_w: f64,
    pub theta_a: f64,
}

impl ClipParam {
    pub fn new(theta_w: f64, theta_a: f64) -> Self {
        Self { theta_w, theta_a }
    }

    pub fn weight_threshold(&self) -> f64 {
        clip_threshold(self.theta_w)
    }

    pub fn activation_threshold(&self) -> f64 {
        clip_threshold(self.theta_a)
    }
}

/// Effective clip threshold `sigmoid(theta)`, monotone in `theta` and
/// confined to `(0, 1)`.
pub fn clip_threshold(theta: f64) -> f64 {
    1.0 / (1.0 + (-theta).exp())
}

/// Inverse of [`clip_threshold`]; handy for initializing logits at a target
/// threshold.
pub fn clip_logit(threshold: f64) -> f64 {
    (threshold / (1.0 - threshold)).ln()
}

/// Integer codes plus the scales (and, for asymmetric grids, offsets)
/// needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i64>,
    pub rows: usize,
    pub cols: usize,
    /// One scale per channel/token/group, in slice order.
    pub scales: Vec<f64>,
    /// Integer zero points, asymmetric grids only.
    pub zero_points: Option<Vec<i64>>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let slices = slice_layout(self.rows, self.cols, &self.spec);
        for (slice_idx, (row, start, len)) in slices.iter().enumerate() {
            let s = self.scales[slice_idx];
            let zp = self.zero_points.as_ref().map_or(0, |z| z[slice_idx]);
            for j in 0..*len {
                let code = self.codes[row * self.cols + start + j];
                out.set(*row, start + j, s * (code - zp) as f64);
            }
        }
        out
    }
}

/// (row, start column, length) of each quantization slice, in scale order.
fn slice_layout(rows: usize, cols: usize, spec: &QuantSpec) -> Vec<(usize, usize, usize)> {
    match spec.granularity {
        Granularity::PerChannel | Granularity::PerToken => {
            (0..rows).map(|r| (r, 0, cols)).collect()
        }
        Granularity::PerGroup(g) => {
            let mut v = Vec::with_capacity(rows * cols.div_ceil(g));
            for r in 0..rows {
                let mut start = 0;
                while start < cols {
                    v.push((r, start, g.min(cols - start)));
                    start += g;
                }
            }
            v
        }
    }
}

fn check_group_divides(cols: usize, spec: &QuantSpec) -> Result<()> {
    if let Granularity::PerGroup(g) = spec.granularity {
        if cols % g != 0 {
            return Err(Error::Dim(format!(
                "group size {g} does not divide the quantized width {cols}"
            )));
        }
    }
    Ok(())
}

/// Fake-quantize one slice symmetrically in place. Returns the scale used.
fn fake_quant_slice_sym(x: &mut [f64], bits: u32, clip: f64) -> f64 {
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let code_min = -((1u64 << (bits - 1)) as f64);
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        // Sentinel scale 1; codes are all zero and the output is unchanged.
        for v in x.iter_mut() {
            *v = 0.0;
        }
        return 1.0;
    }
    let s = (clip * m) / qmax;
    for v in x.iter_mut() {
        let code = (*v / s).round().clamp(code_min, qmax);
        *v = s * code;
    }
    s
}

/// Fake-quantize one slice asymmetrically in place (min-offset form).
/// Returns `(scale, offset)`.
fn fake_quant_slice_asym(x: &mut [f64], bits: u32, clip: f64) -> (f64, f64) {
    let qmax = ((1u64 << bits) - 1) as f64;
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        // Constant group: sentinel scale 1, code 0, offset carries the value.
        let beta = clip * lo;
        for v in x.iter_mut() {
            *v = beta;
        }
        return (1.0, beta);
    }
    let beta = clip * lo;
    let s = clip * (hi - lo) / qmax;
    for v in x.iter_mut() {
        let code = ((*v - beta) / s).round().clamp(0.0, qmax);
        *v = s * code + beta;
    }
    (s, beta)
}

/// Quantize-then-dequantize `x` on the grid described by `spec`, with an
/// explicit clip factor overriding `spec.clip_ratio`.
///
/// Scales are recomputed from the data per slice; all-zero slices come back
/// as zeros.
pub fn fake_quant(x: &Matrix, spec: &QuantSpec, clip: f64) -> Result<Matrix> {
    spec.validate()?;
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::InvalidArg(format!("clip {clip} outside (0, 1]")));
    }
    check_group_divides(x.cols(), spec)?;
    let mut out = x.clone();
    let slices = slice_layout(x.rows(), x.cols(), spec);
    for (row, start, len) in slices {
        let slice = &mut out.row_mut(row)[start..start + len];
        match spec.scheme {
            Scheme::Symmetric => {
                fake_quant_slice_sym(slice, spec.bits, clip);
            }
            Scheme::Asymmetric => {
                fake_quant_slice_asym(slice, spec.bits, clip);
            }
        }
    }
    Ok(out)
}

/// Group-wise asymmetric fake quantization of one head's cache tensor
/// (`seq x head_dim`); the group size must divide the head dimension.
pub fn quant_kv(head_tensor: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    if spec.scheme != Scheme::Asymmetric {
        return Err(Error::InvalidArg("kv quantization is asymmetric".into()));
    }
    match spec.granularity {
        Granularity::PerGroup(_) => fake_quant(head_tensor, spec, spec.clip_ratio),
        _ => Err(Error::InvalidArg("kv quantization is group-wise".into())),
    }
}

/// Quantize to explicit integer codes (the storage form). Symmetric slices
/// carry a scale each; asymmetric slices also carry an integer zero point,
/// with dequantization `s * (code - zp)`.
pub fn quantize(x: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    check_group_divides(x.cols(), spec)?;
    let clip = spec.clip_ratio;
    let slices = slice_layout(x.rows(), x.cols(), spec);
    let mut codes = vec![0i64; x.rows() * x.cols()];
    let mut scales = Vec::with_capacity(slices.len());
    let mut zps = Vec::new();
    for (row, start, len) in &slices {
        let vals = &x.row(*row)[*start..start + len];
        match spec.scheme {
            Scheme::Symmetric => {
                let qmax = spec.qmax_sym();
                let m = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let s = if m == 0.0 { 1.0 } else { clip * m / qmax };
                for (j, &v) in vals.iter().enumerate() {
                    let c = (v / s).round().clamp(spec.code_min_sym(), qmax);
                    codes[row * x.cols() + start + j] = c as i64;
                }
                scales.push(s);
            }
            Scheme::Asymmetric => {
                let qmax = spec.qmax_asym();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (s, zp) = if hi == lo {
                    (1.0, (-(clip * lo)).round().clamp(-qmax, qmax) as i64)
                } else {
                    let s = clip * (hi - lo) / qmax;
                    (s, (-(clip * lo) / s).round().clamp(0.0, qmax) as i64)
                };
                for (j, &v) in vals.iter().enumerate() {
                    let c = ((v / s).round() + zp as f64).clamp(0.0, qmax);
                    codes[row * x.cols() + start + j] = c as i64;
                }
                scales.push(s);
                zps.push(zp);
            }
        }
    }
    Ok(QuantizedTensor {
        codes,
        rows: x.rows(),
        cols: x.cols(),
        scales,
        zero_points: if zps.is_empty() { None } else { Some(zps) },
        spec: *spec,
    })
}
