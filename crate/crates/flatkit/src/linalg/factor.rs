//! Structured invertible matrices: Cayley-parameterized orthogonal factors
//! and the `U * diag(exp(sigma)) * V^T` form whose inverse is available in
//! closed form. Every learned transform in the library is realized through
//! this module, so invertibility holds by construction rather than by luck.

use super::Matrix;
use crate::error::{Error, Result};

/// Strict upper triangle of a skew-symmetric matrix `A = -A^T`.
///
/// `upper` stores rows of the strict upper triangle in row-major order:
/// `(0,1), (0,2), ..., (0,n-1), (1,2), ...` — `n*(n-1)/2` entries for
/// dimension `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewParam {
    dim: usize,
    upper: Vec<f64>,
}

impl SkewParam {
    pub fn new(dim: usize, upper: Vec<f64>) -> Result<Self> {
        let want = dim * dim.saturating_sub(1) / 2;
        if upper.len() != want {
            return Err(Error::Dim(format!(
                "skew parameter for dim {dim} needs {want} entries, got {}",
                upper.len()
            )));
        }
        if upper.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg("skew entries must be finite".into()));
        }
        Ok(Self { dim, upper })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; dim * dim.saturating_sub(1) / 2] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn upper_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    /// Materialize the full skew-symmetric matrix.
    pub fn embed(&self) -> Matrix {
        let n = self.dim;
        let mut a = Matrix::zeros(n, n);
        let mut idx = 0;
        for r in 0..n {
            for c in (r + 1)..n {
                let v = self.upper[idx];
                a.set(r, c, v);
                a.set(c, r, -v);
                idx += 1;
            }
        }
        a
    }
}

/// Cayley transform `Q = (I - A)(I + A)^{-1}` of the skew-symmetric matrix
/// behind `p`. Always orthogonal; `I + A` is invertible for every
/// skew-symmetric `A` over the reals, so this is total.
pub fn cayley(p: &SkewParam) -> Matrix {
    let n = p.dim();
    let a = p.embed();
    let i = Matrix::identity(n);
    let i_minus = i.sub(&a).expect("same shape");
    let i_plus = i.add(&a).expect("same shape");
    // (I - A)(I + A)^{-1} solved as X (I + A) = (I - A)  <=>
    // (I + A)^T X^T = (I - A)^T.
    let xt = i_plus
        .transpose()
        .solve(&i_minus.transpose())
        .expect("I + A is invertible for skew-symmetric A");
    xt.transpose()
}

/// Invertible-by-construction matrix `P = U * diag(exp(log_sigma)) * V^T`
/// with `U`, `V` Cayley-parameterized orthogonal factors.
///
/// `exp(log_sigma) > 0` for any finite parameter, so `P` is always
/// invertible and `P^{-1} = V * diag(exp(-log_sigma)) * U^T` needs no
/// general inversion routine.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdInvertible {
    u_param: SkewParam,
    v_param: SkewParam,
    log_sigma: Vec<f64>,
}

impl SvdInvertible {
    pub fn new(u_param: SkewParam, v_param: SkewParam, log_sigma: Vec<f64>) -> Result<Self> {
        if u_param.dim() != v_param.dim() || u_param.dim() != log_sigma.len() {
            return Err(Error::Dim(format!(
                "factor dims disagree: U {}, V {}, sigma {}",
                u_param.dim(),
                v_param.dim(),
                log_sigma.len()
            )));
        }
        if log_sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg("log_sigma must be finite".into()));
        }
        Ok(Self { u_param, v_param, log_sigma })
    }

    /// Identity transform of dimension `n` (zero parameters).
    pub fn identity(n: usize) -> Self {
        Self {
            u_param: SkewParam::zeros(n),
            v_param: SkewParam::zeros(n),
            log_sigma: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_sigma.len()
    }

    pub fn u_param(&self) -> &SkewParam {
        &self.u_param
    }

    pub fn v_param(&self) -> &SkewParam {
        &self.v_param
    }

    pub fn log_sigma(&self) -> &[f64] {
        &self.log_sigma
    }
}

/// Realize `(P, P^{-1})` from the SVD-form parameters.
pub fn realize(p: &SvdInvertible) -> (Matrix, Matrix) {
    let u = cayley(&p.u_param);
    let v = cayley(&p.v_param);
    let sigma: Vec<f64> = p.log_sigma.iter().map(|s| s.exp()).collect();
    let sigma_inv: Vec<f64> = p.log_sigma.iter().map(|s| (-s).exp()).collect();
    let mat = u
        .col_scale(&sigma)
        .expect("sigma length matches dim")
        .matmul(&v.transpose())
        .expect("square factors");
    let inv = v
        .col_scale(&sigma_inv)
        .expect("sigma length matches dim")
        .matmul(&u.transpose())
        .expect("square factors");
    (mat, inv)
}
