//! Column-sequential weight quantization with error compensation.
//!
//! Quantizes a weight matrix one column at a time against the calibration
//! second-moment `H = 2 X^T X + lambda I`, pushing each column's rounding
//! error into the not-yet-quantized columns through the upper Cholesky
//! factor of `H^{-1}`. Per-row scales are frozen from the original weights,
//! so the result is directly comparable with plain round-to-nearest on the
//! same grid.

use super::{QuantSpec, QuantizedTensor, Scheme};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Columns processed per compensation block.
const BLOCK_COLS: usize = 8;
/// Fraction of the mean Hessian diagonal used as the initial damping.
const DAMP_FRACTION: f64 = 0.01;
/// Cholesky retries, doubling the damping each time.
const MAX_DAMP_RETRIES: usize = 4;

/// Result of a GPTQ run: the storage-form tensor plus the dequantized
/// weight matrix it corresponds to.
#[derive(Debug, Clone)]
pub struct GptqOutput {
    pub tensor: QuantizedTensor,
    pub dequantized: Matrix,
}

/// Round-to-nearest on per-row scales derived from `w` itself; the
/// baseline GPTQ is measured against.
pub fn rtn_quantize(w: &Matrix, spec: &QuantSpec) -> Result<GptqOutput> {
    let scales = row_scales(w, spec);
    let mut codes = vec![0i64; w.rows() * w.cols()];
    let mut deq = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let code = quantize_scalar(w.get(r, c), scales[r], spec);
            codes[r * w.cols() + c] = code as i64;
            deq.set(r, c, scales[r] * code);
        }
    }
    Ok(GptqOutput {
        tensor: QuantizedTensor {
            codes,
            rows: w.rows(),
            cols: w.cols(),
            scales,
            zero_points: None,
            spec: *spec,
        },
        dequantized: deq,
    })
}

/// GPTQ: quantize `w` (rows = output channels) against calibration
/// activations `x_calib` (`samples x in_features`).
///
/// The proxy loss `||X w^T - X w_hat^T||_F^2` of the result is, in practice,
/// at or below the RTN loss on the same scales; with a diagonal Hessian the
/// two coincide exactly because no compensation flows between columns.
pub fn gptq_quantize(w: &Matrix, x_calib: &Matrix, spec: &QuantSpec) -> Result<GptqOutput> {
    if spec.scheme == Scheme::Asymmetric {
        return Err(Error::InvalidArg(
            "gptq here quantizes weights on symmetric per-channel grids".into(),
        ));
    }
    if x_calib.cols() != w.cols() {
        return Err(Error::Dim(format!(
            "calibration width {} vs weight width {}",
            x_calib.cols(),
            w.cols()
        )));
    }
    let n = w.cols();
    let h_raw = x_calib.transpose().matmul(x_calib)?.scale(2.0);
    let mean_diag = (0..n).map(|i| h_raw.get(i, i)).sum::<f64>() / n as f64;
    let mut damp = DAMP_FRACTION * mean_diag;
    if damp <= 0.0 {
        damp = DAMP_FRACTION;
    }

    // H^{-1} through Cholesky, doubling the damping until it succeeds.
    let mut attempt = 0;
    let hinv = loop {
        let mut h = h_raw.clone();
        for i in 0..n {
            let v = h.get(i, i);
            h.set(i, i, v + damp);
        }
        match h.cholesky_lower() {
            Ok(_) => break h.inverse()?,
            Err(_) if attempt < MAX_DAMP_RETRIES => {
                attempt += 1;
                damp *= 2.0;
            }
            Err(e) => {
                return Err(Error::Numerical(format!(
                    "hessian not positive definite after {MAX_DAMP_RETRIES} damping retries: {e}"
                )))
            }
        }
    };
    // Upper-triangular U with H^{-1} = U^T U.
    let u = hinv.cholesky_lower()?.transpose();

    let scales = row_scales(w, spec);
    let mut work = w.clone();
    let mut deq = Matrix::zeros(w.rows(), w.cols());
    let mut codes = vec![0i64; w.rows() * w.cols()];

    let mut block_start = 0;
    while block_start < n {
        let block_end = (block_start + BLOCK_COLS).min(n);
        // Per-row error terms for the columns of this block.
        let mut err = Matrix::zeros(w.rows(), block_end - block_start);
        for col in block_start..block_end {
            let d = u.get(col, col);
            for r in 0..w.rows() {
                let v = work.get(r, col);
                let code = quantize_scalar(v, scales[r], spec);
                let q = scales[r] * code;
                codes[r * n + col] = code as i64;
                deq.set(r, col, q);
                let e = (v - q) / d;
                err.set(r, col - block_start, e);
                // Compensate the rest of the block immediately.
                for later in (col + 1)..block_end {
                    let upd = e * u.get(col, later);
                    let cur = work.get(r, later);
                    work.set(r, later, cur - upd);
                }
            }
        }
        // Push the accumulated block errors into all later columns.
        for r in 0..w.rows() {
            for later in block_end..n {
                let mut upd = 0.0;
                for (bi, col) in (block_start..block_end).enumerate() {
                    upd += err.get(r, bi) * u.get(col, later);
                }
                let cur = work.get(r, later);
                work.set(r, later, cur - upd);
            }
        }
        block_start = block_end;
    }

    Ok(GptqOutput {
        tensor: QuantizedTensor {
            codes,
            rows: w.rows(),
            cols: w.cols(),
            scales,
            zero_points: None,
            spec: *spec,
        },
        dequantized: deq,
    })
}

/// Proxy loss `||X w^T - X w_hat^T||_F^2` both quantizers are judged by.
pub fn proxy_loss(w: &Matrix, w_hat: &Matrix, x_calib: &Matrix) -> Result<f64> {
    let a = x_calib.matmul(&w.transpose())?;
    let b = x_calib.matmul(&w_hat.transpose())?;
    Ok(a.sub(&b)?.fro_norm().powi(2))
}

fn row_scales(w: &Matrix, spec: &QuantSpec) -> Vec<f64> {
    let qmax = spec.qmax_sym();
    (0..w.rows())
        .map(|r| {
            let m = w.row(r).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                1.0
            } else {
                spec.clip_ratio * m / qmax
            }
        })
        .collect()
}

fn quantize_scalar(v: f64, scale: f64, spec: &QuantSpec) -> f64 {
    (v / scale).round().clamp(spec.code_min_sym(), spec.qmax_sym())
}
