//! Hadamard construction and Kronecker-product application.
//!
//! `kron_apply` is the efficient route for multiplying by `P1 (x) P2`
//! without materializing the big matrix: each row is reshaped to
//! `n1 x n2` (row-major, `n1` outer) and replaced by `P1^T * V * P2`.
//! `kron_matrix` materializes the explicit Kronecker matrix and exists for
//! tests and small-scale cross-checks.

use super::Matrix;
use crate::error::{Error, Result};

/// Orthonormal Hadamard matrix of size `n` (Sylvester construction scaled
/// by `1/sqrt(n)` so that `H^T H = I` holds in the matrix itself rather
/// than in a separate scale). `n` must be a power of two.
pub fn hadamard(n: usize) -> Result<Matrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArg(format!(
            "hadamard size must be a power of two, got {n}"
        )));
    }
    let mut h = vec![1.0f64];
    let mut size = 1;
    while size < n {
        let next = size * 2;
        let mut out = vec![0.0f64; next * next];
        for r in 0..size {
            for c in 0..size {
                let v = h[r * size + c];
                out[r * next + c] = v;
                out[r * next + size + c] = v;
                out[(size + r) * next + c] = v;
                out[(size + r) * next + size + c] = -v;
            }
        }
        h = out;
        size = next;
    }
    let norm = 1.0 / (n as f64).sqrt();
    Matrix::from_vec(n, n, h.into_iter().map(|v| v * norm).collect())
}

/// Apply `P1 (x) P2` to every row of `x`: row `v` reshaped to `V` of shape
/// `n1 x n2` becomes `vec(P1^T V P2)`, which equals `v * (P1 (x) P2)`.
pub fn kron_apply(x: &Matrix, p1: &Matrix, p2: &Matrix) -> Result<Matrix> {
    if !p1.is_square() || !p2.is_square() {
        return Err(Error::Dim("kronecker factors must be square".into()));
    }
    let (n1, n2) = (p1.rows(), p2.rows());
    if x.cols() != n1 * n2 {
        return Err(Error::Dim(format!(
            "kron_apply: {} columns cannot split as {n1}x{n2}",
            x.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut tmp = vec![0.0f64; n1 * n2];
    for r in 0..x.rows() {
        let v = x.row(r);
        // tmp = P1^T V  (tmp[i2 major layout kept as n1 x n2 row-major)
        for t in tmp.iter_mut() {
            *t = 0.0;
        }
        for k in 0..n1 {
            let vk = &v[k * n2..(k + 1) * n2];
            for i in 0..n1 {
                let w = p1.get(k, i); // (P1^T)[i,k] = P1[k,i]
                if w == 0.0 {
                    continue;
                }
                let trow = &mut tmp[i * n2..(i + 1) * n2];
                for (t, &vv) in trow.iter_mut().zip(vk.iter()) {
                    *t += w * vv;
                }
            }
        }
        // out_row = tmp * P2
        let out_row = out.row_mut(r);
        for i in 0..n1 {
            let trow = &tmp[i * n2..(i + 1) * n2];
            let orow = &mut out_row[i * n2..(i + 1) * n2];
            for (k, &t) in trow.iter().enumerate() {
                if t == 0.0 {
                    continue;
                }
                let prow = p2.row(k);
                for (o, &p) in orow.iter_mut().zip(prow.iter()) {
                    *o += t * p;
                }
            }
        }
    }
    Ok(out)
}

/// Materialize the explicit `n1*n2 x n1*n2` Kronecker matrix
/// `(P1 (x) P2)[(i1,i2),(j1,j2)] = P1[i1,j1] * P2[i2,j2]`.
pub fn kron_matrix(p1: &Matrix, p2: &Matrix) -> Matrix {
    let (n1, n2) = (p1.rows(), p2.rows());
    let n = n1 * n2;
    let mut k = Matrix::zeros(n, n);
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for j1 in 0..n1 {
                for j2 in 0..n2 {
                    k.set(i1 * n2 + i2, j1 * n2 + j2, p1.get(i1, j1) * p2.get(i2, j2));
                }
            }
        }
    }
    k
}

/// Absorb the inverse Kronecker transform into a weight matrix `w` (rows =
/// output channels): returns `w * (P1^{-T} (x) P2^{-T})` so that for any
/// activation `x`,
/// `kron_apply(x, p1, p2) * kron_inverse_weights(w, p1, p2)^T = x * w^T`.
pub fn kron_inverse_weights(w: &Matrix, p1: &Matrix, p2: &Matrix) -> Result<Matrix> {
    let p1_inv_t = p1.inverse()?.transpose();
    let p2_inv_t = p2.inverse()?.transpose();
    kron_apply(w, &p1_inv_t, &p2_inv_t)
}

/// As [`kron_inverse_weights`] but with the inverses already in hand (the
/// SVD-form realization provides them in closed form).
pub fn kron_inverse_weights_with(w: &Matrix, p1_inv: &Matrix, p2_inv: &Matrix) -> Result<Matrix> {
    kron_apply(w, &p1_inv.transpose(), &p2_inv.transpose())
}
