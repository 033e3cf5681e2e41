//! Diagnostics and overhead accounting: channel-magnitude flatness, the
//! per-(layer, token) quantization-error landscape, online-transform
//! FLOPs/memory formulas, and the fused-kernel case selector.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward_hidden_states, ModelConfig, QuantMode, RealizedTransforms, TinyModel};
use serde::{Deserialize, Serialize};

/// Which direction of a matrix counts as the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Columns,
}

/// Per-channel Frobenius norms along the chosen axis.
pub fn channel_magnitudes(t: &Matrix, axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Rows => (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        Axis::Columns => {
            let mut acc = vec![0.0f64; t.cols()];
            for r in 0..t.rows() {
                for (j, &v) in t.row(r).iter().enumerate() {
                    acc[j] += v * v;
                }
            }
            acc.into_iter().map(f64::sqrt).collect()
        }
    }
}

/// As [`channel_magnitudes`], sorted descending (the envelope view).
pub fn channel_magnitudes_sorted(t: &Matrix, axis: Axis) -> Vec<f64> {
    let mut m = channel_magnitudes(t, axis);
    m.sort_by(|a, b| b.partial_cmp(a).expect("norms are finite"));
    m
}

/// Distance of a magnitude vector from the perfectly flat vector with the
/// same l2 norm: `|| |d| - (||d||/sqrt(N)) * 1 ||_2`. Zero (to rounding)
/// iff all magnitudes are equal. Entries enter by absolute value — the
/// metric compares magnitude envelopes, which also makes it
/// scale-equivariant under sign flips.
pub fn flatness(d: &[f64]) -> f64 {
    assert!(!d.is_empty(), "flatness needs at least one channel");
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = norm / (d.len() as f64).sqrt();
    d.iter().map(|v| (v.abs() - target).powi(2)).sum::<f64>().sqrt()
}

/// Flatness summary of one tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub tensor: String,
    pub channels: usize,
    pub magnitudes: Vec<f64>,
    pub flatness: f64,
}

impl FlatnessReport {
    pub fn for_tensor(name: &str, t: &Matrix, axis: Axis) -> Self {
        let magnitudes = channel_magnitudes(t, axis);
        let flatness = flatness(&magnitudes);
        Self { tensor: name.to_string(), channels: magnitudes.len(), magnitudes, flatness }
    }
}

/// Mean squared quantization error indexed by (layer, token position).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseLandscape {
    /// `grid[layer][token]`, averaged over evaluation samples.
    pub grid: Vec<Vec<f64>>,
}

impl MseLandscape {
    pub fn layers(&self) -> usize {
        self.grid.len()
    }

    pub fn tokens(&self) -> usize {
        self.grid.first().map_or(0, |r| r.len())
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().flat_map(|r| r.iter()).sum()
    }
}

/// Per-(layer, token) MSE between full-precision and quantized hidden
/// states, averaged over `inputs`.
pub fn mse_landscape(
    model: &TinyModel,
    inputs: &[Matrix],
    mode: &QuantMode,
    transforms: &[RealizedTransforms],
) -> Result<MseLandscape> {
    if inputs.is_empty() {
        return Err(Error::InvalidArg("landscape needs at least one input".into()));
    }
    let layers = model.blocks.len();
    let tokens = inputs[0].rows();
    let mut grid = vec![vec![0.0f64; tokens]; layers];
    for x in inputs {
        if x.rows() != tokens {
            return Err(Error::Dim("landscape inputs must share the sequence length".into()));
        }
        let reference = forward_hidden_states(model, x, None, &QuantMode::off())?;
        let quantized = forward_hidden_states(model, x, Some(transforms), mode)?;
        for l in 0..layers {
            let (a, b) = (&quantized[l], &reference[l]);
            for t in 0..tokens {
                let se: f64 = a
                    .row(t)
                    .iter()
                    .zip(b.row(t).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                grid[l][t] += se / a.cols() as f64;
            }
        }
    }
    let n = inputs.len() as f64;
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(MseLandscape { grid })
}

// ---------------------------------------------------------------------------
// Overhead accounting
// ---------------------------------------------------------------------------

/// Closed-form FLOPs of the online transforms in one block, assuming
/// perfect-square decompositions of both widths:
/// `8*b*s*h_d*sqrt(h_d) + 2*b*s*h_d*a + 4*b*s*h_d^2/a + 4*b*s*h_i*sqrt(h_i)`.
///
/// The four terms are: the two decomposed hidden-width transforms
/// (attention input and FFN input), the across-head output-projection
/// factor, the per-head key/value cache transforms, and the decomposed
/// intermediate-width transform. For widths without a square split the
/// exact count from [`online_transform_flops_exact`] is the honest number;
/// this formula is what the headline ratios are quoted from.
pub fn online_transform_flops(cfg: &ModelConfig, batch: usize, seq: usize) -> f64 {
    let b = batch as f64;
    let s = seq as f64;
    let hd = cfg.hidden as f64;
    let hi = cfg.intermediate as f64;
    let a = cfg.heads as f64;
    8.0 * b * s * hd * hd.sqrt()
        + 2.0 * b * s * hd * a
        + 4.0 * b * s * hd * hd / a
        + 4.0 * b * s * hi * hi.sqrt()
}

/// Exact online-transform FLOPs with the actual decompositions
/// (`2 * rows * cols` per factor multiplication): the attention-input and
/// FFN-input pairs, the across-head factor, the key rotation and value
/// transform of the caches, and the down-projection input pair.
pub fn online_transform_flops_exact(cfg: &ModelConfig, batch: usize, seq: usize) -> u64 {
    let (a1, a2) = cfg.hidden_split();
    let (d1, d2) = cfg.intermediate_split();
    let bs = (batch * seq) as u64;
    let hd = cfg.hidden as u64;
    let hi = cfg.intermediate as u64;
    let heads = cfg.heads as u64;
    let head_dim = (cfg.hidden / cfg.heads) as u64;
    let pair = |w: u64, n1: usize, n2: usize| 2 * w * (n1 as u64 + n2 as u64);
    let per_token = pair(hd, a1, a2)            // attention input
        + pair(hd, a1, a2)                       // ffn input
        + 2 * hd * heads                         // across-head o factor
        + 2 * heads * head_dim * head_dim * 2    // key rotation + value transform
        + pair(hi, d1, d2); // down-projection input
    bs * per_token
}

/// Reference full-precision GEMM FLOPs of one block at the given batch and
/// sequence length: the four attention projections, the two FFN input
/// projections, and the two attention score/value products. This is the
/// denominator the headline online-transform ratio is quoted against.
pub fn fp_block_flops(cfg: &ModelConfig, batch: usize, seq: usize) -> f64 {
    let b = batch as f64;
    let s = seq as f64;
    let hd = cfg.hidden as f64;
    let hi = cfg.intermediate as f64;
    2.0 * b * s * (4.0 * hd * hd + 2.0 * hd * hi) + 4.0 * b * s * s * hd
}

/// `online_transform_flops / fp_block_flops`, the headline overhead ratio.
pub fn online_flops_ratio(cfg: &ModelConfig, batch: usize, seq: usize) -> f64 {
    online_transform_flops(cfg, batch, seq) / fp_block_flops(cfg, batch, seq)
}

/// Extra inference memory of the stored transforms, in bytes, from the
/// half-precision parameter-count formula
/// `2 * (4*h_d + 2*h_i + a^2 + (h_d/a)^2)` per block.
pub fn transform_memory_bytes(cfg: &ModelConfig, layers: usize) -> u64 {
    let hd = cfg.hidden as u64;
    let hi = cfg.intermediate as u64;
    let a = cfg.heads as u64;
    let head_dim = (cfg.hidden / cfg.heads) as u64;
    2 * (4 * hd + 2 * hi + a * a + head_dim * head_dim) * layers as u64
}

// ---------------------------------------------------------------------------
// Kernel-design case selection
// ---------------------------------------------------------------------------

/// Which fused-kernel layout fits in shared memory for a given
/// decomposition, with the tile sizes that make it fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelCase {
    /// Both factors and all intermediates resident: needs
    /// `(n1^2 + 2*n1*n2)*2 < m` and `(n2^2 + 2*n1*n2)*2 < m`.
    Default,
    /// First factor tiled along its non-reduction dimension with tile
    /// `t_n1`: needs `(t_n1*n1 + n1*n2 + t_n1*n2)*2 < m` and
    /// `(n2^2 + 2*t_n1*n2)*2 < m`.
    Corner1 { t_n1: usize },
    /// Both reduction dimensions tiled (`b_n1`, `b_n2`): needs
    /// `(n1*b_n1 + b_n1*n2 + n1*n2)*2 < m` and
    /// `(n1*b_n2 + b_n2*n2 + n1*n2)*2 < m`.
    Corner2 { b_n1: usize, b_n2: usize },
}

/// A selected case together with the SRAM budget it was selected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSelection {
    pub case: KernelCase,
    pub sram_bytes: usize,
}

/// Candidate tile sizes offered to the corner cases.
#[derive(Debug, Clone)]
pub struct TileOptions {
    /// Tried from largest to smallest; the first feasible size wins.
    pub candidates: Vec<usize>,
}

impl Default for TileOptions {
    fn default() -> Self {
        // Powers of two down to 1.
        Self { candidates: (0..=13).rev().map(|k| 1usize << k).collect() }
    }
}

pub fn default_case_fits(n1: usize, n2: usize, m: usize) -> bool {
    (n1 * n1 + 2 * n1 * n2) * 2 < m && (n2 * n2 + 2 * n1 * n2) * 2 < m
}

pub fn corner1_fits(t_n1: usize, n1: usize, n2: usize, m: usize) -> bool {
    (t_n1 * n1 + n1 * n2 + t_n1 * n2) * 2 < m && (n2 * n2 + 2 * t_n1 * n2) * 2 < m
}

pub fn corner2_fits(b_n1: usize, b_n2: usize, n1: usize, n2: usize, m: usize) -> bool {
    (n1 * b_n1 + b_n1 * n2 + n1 * n2) * 2 < m && (n1 * b_n2 + b_n2 * n2 + n1 * n2) * 2 < m
}

/// Pick the first kernel case whose shared-memory inequalities are
/// satisfiable with the given tile options, preferring the resident
/// layout, then single-factor tiling, then double tiling.
pub fn select_kernel_case(
    n1: usize,
    n2: usize,
    sram_bytes: usize,
    tiles: &TileOptions,
) -> Result<KernelSelection> {
    if sram_bytes == 0 {
        return Err(Error::InvalidArg("sram budget must be positive".into()));
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidArg("factor sizes must be positive".into()));
    }
    if default_case_fits(n1, n2, sram_bytes) {
        return Ok(KernelSelection { case: KernelCase::Default, sram_bytes });
    }
    for &t in tiles.candidates.iter().filter(|&&t| t >= 1 && t <= n1) {
        if corner1_fits(t, n1, n2, sram_bytes) {
            return Ok(KernelSelection { case: KernelCase::Corner1 { t_n1: t }, sram_bytes });
        }
    }
    let b1 = tiles
        .candidates
        .iter()
        .copied()
        .filter(|&b| b >= 1 && b <= n1)
        .find(|&b| (n1 * b + b * n2 + n1 * n2) * 2 < sram_bytes);
    let b2 = tiles
        .candidates
        .iter()
        .copied()
        .filter(|&b| b >= 1 && b <= n2)
        .find(|&b| (n1 * b + b * n2 + n1 * n2) * 2 < sram_bytes);
    if let (Some(b_n1), Some(b_n2)) = (b1, b2) {
        return Ok(KernelSelection { case: KernelCase::Corner2 { b_n1, b_n2 }, sram_bytes });
    }
    Err(Error::Numerical(format!(
        "no kernel case fits ({n1}, {n2}) into {sram_bytes} bytes of shared memory"
    )))
}

/// Re-check that a selection satisfies its own inequalities (used by the
/// acceptance suite as a post-hoc verification).
pub fn selection_satisfies(sel: &KernelSelection, n1: usize, n2: usize) -> bool {
    match sel.case {
        KernelCase::Default => default_case_fits(n1, n2, sel.sram_bytes),
        KernelCase::Corner1 { t_n1 } => corner1_fits(t_n1, n1, n2, sel.sram_bytes),
        KernelCase::Corner2 { b_n1, b_n2 } => corner2_fits(b_n1, b_n2, n1, n2, sel.sram_bytes),
    }
}
