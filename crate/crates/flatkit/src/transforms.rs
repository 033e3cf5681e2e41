//! Pre-quantization transformations: per-channel scaling, Hadamard
//! rotation, and learnable Kronecker-factored affine transforms, together
//! with decomposition-size selection and offline weight merging.
//!
//! Every variant obeys the same contract: for activations `x` and weights
//! `w` (rows = output channels),
//! `forward(x) * absorb(w)^T == x * w^T` up to floating-point error, as long
//! as quantization stays off. That equivalence is the property all
//! block-level rewrites in [`crate::model`] rely on.

use crate::error::{Error, Result};
use crate::linalg::{
    hadamard, kron_apply, kron_inverse_weights_with, realize, Matrix, SvdInvertible,
};
use serde::{Deserialize, Serialize};

/// Configuration for statistics-driven per-channel scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    /// Migration strength between activations and weights, in `[0, 1]`.
    pub alpha: f64,
    /// Floor applied to the scaling factors.
    pub epsilon: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { alpha: 0.5, epsilon: 1e-8 }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArg(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArg("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel scaling factors `c_j = max|X_j|^alpha / max|W_j|^(1-alpha)`,
/// floored at `cfg.epsilon`. Activations are divided by `c`, weights
/// multiplied, so the product is unchanged while outlier magnitude migrates
/// between the two sides.
pub fn smooth_scale(x_absmax: &[f64], w_absmax: &[f64], cfg: &ScalingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x_absmax.len() != w_absmax.len() {
        return Err(Error::Dim(format!(
            "absmax vectors disagree: {} vs {}",
            x_absmax.len(),
            w_absmax.len()
        )));
    }
    if x_absmax.iter().chain(w_absmax.iter()).any(|&v| v < 0.0) {
        return Err(Error::InvalidArg("absmax entries must be non-negative".into()));
    }
    Ok(x_absmax
        .iter()
        .zip(w_absmax.iter())
        .map(|(&x, &w)| (x.powf(cfg.alpha) / w.powf(1.0 - cfg.alpha)).max(cfg.epsilon))
        .collect())
}

/// A factor pair `(n1, n2)` with `n1 * n2 = n` and `n1 <= n2`.
///
/// Selection minimizes `n1 + n2` over pairs whose first factor is a power
/// of two (the alignment the fused transform kernels tile by). Widths with
/// no useful power-of-two factor degenerate to `(1, n)`, i.e. a full-size
/// matrix; [`DecompositionChoice::is_degenerate`] flags that case and the
/// library logs a warning instead of failing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionChoice {
    pub n1: usize,
    pub n2: usize,
}

impl DecompositionChoice {
    pub fn n(&self) -> usize {
        self.n1 * self.n2
    }

    /// True when the split buys nothing (full-size matrix).
    pub fn is_degenerate(&self) -> bool {
        self.n1 == 1
    }
}

/// Pick the decomposition for width `n`: the minimal-sum factor pair
/// `(n1, n2)`, `n1 <= n2`, with `n1` constrained to powers of two.
///
/// Equivalently: `n1` is the largest power of two dividing `n` that does
/// not exceed `sqrt(n)`. Primes (and odd widths generally) fall back to
/// `(1, n)` with a warning.
pub fn choose_decomposition(n: usize) -> DecompositionChoice {
    assert!(n >= 1, "width must be at least 1");
    // Largest power of two dividing n.
    let pow2_in_n = 1usize << n.trailing_zeros();
    let isqrt = int_sqrt(n);
    // Largest power of two <= sqrt(n).
    let pow2_cap = if isqrt == 0 { 1 } else { 1usize << isqrt.ilog2() };
    let n1 = pow2_in_n.min(pow2_cap);
    let choice = DecompositionChoice { n1, n2: n / n1 };
    if choice.is_degenerate() && n > 1 {
        log::warn!(
            "width {n} admits no power-of-two split below sqrt; \
             falling back to a full {n}x{n} transform"
        );
    }
    choice
}

fn int_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while r * r > n {
        r -= 1;
    }
    r
}

/// Memory and FLOP saving factors of a Kronecker split relative to the
/// full `n x n` matrix: `mem = n^2 / (n1^2 + n2^2)` (at most `n/2`, equality
/// only for a square split) and `flops = n / (n1 + n2)`.
pub fn kron_saving(n1: usize, n2: usize) -> (f64, f64) {
    let n = (n1 * n2) as f64;
    let mem = n * n / ((n1 * n1 + n2 * n2) as f64);
    let flops = n / ((n1 + n2) as f64);
    (mem, flops)
}

/// Divide the output channels (rows) of a preceding weight by `c`, so that
/// the following layer can multiply by `diag(c)` with no function change.
pub fn merge_scaling(preceding_w: &Matrix, c: &[f64]) -> Result<Matrix> {
    if c.len() != preceding_w.rows() {
        return Err(Error::Dim(format!(
            "scaling vector of {} on {} output channels",
            c.len(),
            preceding_w.rows()
        )));
    }
    if c.contains(&0.0) {
        return Err(Error::InvalidArg("scaling vector has zero entries".into()));
    }
    let inv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    preceding_w.row_scale(&inv)
}

/// One pre-quantization transform, realized and ready to apply.
#[derive(Debug, Clone)]
pub enum Transform {
    Identity,
    /// Per-channel scaling vector `c` (activations divided, weights
    /// multiplied).
    Scaling(Vec<f64>),
    /// Orthonormal Hadamard of the full width.
    Hadamard { h: Matrix },
    /// Kronecker pair with realized factors and closed-form inverses.
    Kronecker { p1: Matrix, p1_inv: Matrix, p2: Matrix, p2_inv: Matrix },
    /// Full-size invertible matrix.
    Full { p: Matrix, p_inv: Matrix },
}

/// The learned Kronecker transform `P = P1 (x) P2` in parameter form.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerTransform {
    pub p1: SvdInvertible,
    pub p2: SvdInvertible,
}

impl KroneckerTransform {
    pub fn new(p1: SvdInvertible, p2: SvdInvertible) -> Result<Self> {
        if p1.dim() > p2.dim() {
            return Err(Error::InvalidArg(format!(
                "kronecker factors must satisfy n1 <= n2, got ({}, {})",
                p1.dim(),
                p2.dim()
            )));
        }
        Ok(Self { p1, p2 })
    }

    pub fn identity(choice: DecompositionChoice) -> Self {
        Self {
            p1: SvdInvertible::identity(choice.n1),
            p2: SvdInvertible::identity(choice.n2),
        }
    }

    pub fn width(&self) -> usize {
        self.p1.dim() * self.p2.dim()
    }

    pub fn realize(&self) -> Transform {
        let (p1, p1_inv) = realize(&self.p1);
        let (p2, p2_inv) = realize(&self.p2);
        Transform::Kronecker { p1, p1_inv, p2, p2_inv }
    }
}

/// A full-size (non-decomposed) learned transform, used where the width is
/// already small (per-head transforms).
#[derive(Debug, Clone, PartialEq)]
pub struct FullTransform {
    pub p: SvdInvertible,
}

impl FullTransform {
    pub fn identity(n: usize) -> Self {
        Self { p: SvdInvertible::identity(n) }
    }

    pub fn realize(&self) -> Transform {
        let (p, p_inv) = realize(&self.p);
        Transform::Full { p, p_inv }
    }
}

impl Transform {
    pub fn hadamard(width: usize) -> Result<Self> {
        Ok(Self::Hadamard { h: hadamard(width)? })
    }

    pub fn width(&self) -> Option<usize> {
        match self {
            Transform::Identity => None,
            Transform::Scaling(c) => Some(c.len()),
            Transform::Hadamard { h } => Some(h.rows()),
            Transform::Kronecker { p1, p2, .. } => Some(p1.rows() * p2.rows()),
            Transform::Full { p, .. } => Some(p.rows()),
        }
    }

    fn check_width(&self, cols: usize, what: &str) -> Result<()> {
        if let Some(w) = self.width() {
            if w != cols {
                return Err(Error::Dim(format!(
                    "{what} of width {cols} incompatible with transform width {w}"
                )));
            }
        }
        Ok(())
    }

    /// Online activation side: `x -> x * P` (or `x * diag(c)^{-1}` for
    /// scaling).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x.cols(), "activation")?;
        match self {
            Transform::Identity => Ok(x.clone()),
            Transform::Scaling(c) => {
                let inv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
                x.col_scale(&inv)
            }
            Transform::Hadamard { h } => x.matmul(h),
            Transform::Kronecker { p1, p2, .. } => kron_apply(x, p1, p2),
            Transform::Full { p, .. } => x.matmul(p),
        }
    }

    /// Offline weight side: absorb the inverse so the layer output is
    /// preserved: `w -> w'` with `forward(x) * w'^T = x * w^T`.
    pub fn absorb_into_weight(&self, w: &Matrix) -> Result<Matrix> {
        self.check_width(w.cols(), "weight")?;
        match self {
            Transform::Identity => Ok(w.clone()),
            Transform::Scaling(c) => w.col_scale(c),
            Transform::Hadamard { h } => w.matmul(h),
            Transform::Kronecker { p1_inv, p2_inv, .. } => {
                kron_inverse_weights_with(w, p1_inv, p2_inv)
            }
            Transform::Full { p_inv, .. } => w.matmul(&p_inv.transpose()),
        }
    }
}

/// Exhaustive factor enumeration of `n` as ordered pairs `(n1, n2)`,
/// `n1 <= n2`. Shared by the saving-bound checks and the decomposition
/// oracle in tests.
pub fn factor_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            pairs.push((d, n / d));
        }
        d += 1;
    }
    pairs
}
