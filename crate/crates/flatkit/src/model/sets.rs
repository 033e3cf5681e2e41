//! Per-block transform bundles: the learned parameter set and its realized
//! (matrix) form, plus the baseline variants used for comparison.
//!
//! The output-projection transform is fused with the value transform:
//! `P_o = P_o1 (x) P_v`, where `P_o1` mixes across heads and the per-head
//! factor is the same `P_v` that transforms the value cache. The forward
//! pass applies `P_v` once on the values (before caching) and only the
//! across-head `P_o1` after attention, so the fusion costs nothing extra
//! online while the o-projection weight absorbs the full product.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{cayley, hadamard, realize, Matrix, SkewParam, SvdInvertible};
use crate::quant::{clip_logit, ClipParam};
use crate::transforms::{FullTransform, KroneckerTransform};

/// The seven quantized linear layers of a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSlot {
    Q = 0,
    K = 1,
    V = 2,
    O = 3,
    Gate = 4,
    Up = 5,
    Down = 6,
}

pub const NUM_LINEARS: usize = 7;

/// Clipping logits: one weight/activation pair per linear layer, plus one
/// per KV cache tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockClips {
    pub linears: [ClipParam; NUM_LINEARS],
    pub k_cache: f64,
    pub v_cache: f64,
}

impl BlockClips {
    /// No clipping: logits far in the saturated region, thresholds ~1.
    pub fn disabled() -> Self {
        const OPEN: f64 = 40.0;
        Self { linears: [ClipParam::new(OPEN, OPEN); NUM_LINEARS], k_cache: OPEN, v_cache: OPEN }
    }

    /// Learnable-clipping initialization: every threshold starts at 0.9.
    pub fn init_learnable() -> Self {
        let l = clip_logit(0.9);
        Self { linears: [ClipParam::new(l, l); NUM_LINEARS], k_cache: l, v_cache: l }
    }
}

/// The learned per-block bundle: six transforms, four scaling vectors
/// (stored as log-scales so positivity survives gradient steps), and the
/// clipping logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTransformSet {
    /// Attention-input transform (width `hidden`), decomposed.
    pub p_a: KroneckerTransform,
    /// Across-head factor of the fused output-projection transform
    /// (`heads x heads`); the per-head factor is `p_v`.
    pub p_o1: SvdInvertible,
    /// Key-cache rotation (per head), Cayley-parameterized so it is
    /// orthogonal by construction and score-preserving.
    pub p_h: SkewParam,
    /// Value-cache transform (per head), invertible.
    pub p_v: FullTransform,
    /// FFN-input transform (width `hidden`), decomposed.
    pub p_ug: KroneckerTransform,
    /// Down-projection input transform (width `intermediate`), decomposed.
    pub p_d: KroneckerTransform,
    /// Log-scales of the per-channel scaling vectors (`c = exp(gamma)`).
    pub gamma_a: Vec<f64>,
    pub gamma_o: Vec<f64>,
    pub gamma_ug: Vec<f64>,
    pub gamma_d: Vec<f64>,
    pub clips: BlockClips,
}

impl BlockTransformSet {
    /// Identity transforms, unit scales, clipping off.
    pub fn identity(cfg: &ModelConfig) -> Self {
        let (a1, a2) = cfg.hidden_split();
        let (d1, d2) = cfg.intermediate_split();
        Self {
            p_a: KroneckerTransform {
                p1: SvdInvertible::identity(a1),
                p2: SvdInvertible::identity(a2),
            },
            p_o1: SvdInvertible::identity(cfg.heads),
            p_h: SkewParam::zeros(cfg.head_dim()),
            p_v: FullTransform::identity(cfg.head_dim()),
            p_ug: KroneckerTransform {
                p1: SvdInvertible::identity(a1),
                p2: SvdInvertible::identity(a2),
            },
            p_d: KroneckerTransform {
                p1: SvdInvertible::identity(d1),
                p2: SvdInvertible::identity(d2),
            },
            gamma_a: vec![0.0; cfg.hidden],
            gamma_o: vec![0.0; cfg.hidden],
            gamma_ug: vec![0.0; cfg.hidden],
            gamma_d: vec![0.0; cfg.intermediate],
            clips: BlockClips::disabled(),
        }
    }

    /// The fused output-projection transform `P_o = P_o1 (x) P_v`.
    pub fn p_o(&self) -> KroneckerTransform {
        KroneckerTransform { p1: self.p_o1.clone(), p2: self.p_v.p.clone() }
    }
}

/// Matrices ready for the forward pass. Identity stands in wherever a
/// variant has nothing to do, so one code path serves every variant.
#[derive(Debug, Clone)]
pub struct RealizedTransforms {
    /// Per-channel scaling vectors (all ones when scaling is off).
    pub c_a: Vec<f64>,
    pub c_o: Vec<f64>,
    pub c_ug: Vec<f64>,
    pub c_d: Vec<f64>,
    /// Attention-input Kronecker pair and closed-form inverses.
    pub attn_p1: Matrix,
    pub attn_p1_inv: Matrix,
    pub attn_p2: Matrix,
    pub attn_p2_inv: Matrix,
    /// Across-head factor of the fused o-projection transform.
    pub o_mix: Matrix,
    pub o_mix_inv: Matrix,
    /// Per-head value transform.
    pub v_head: Matrix,
    pub v_head_inv: Matrix,
    /// Per-head key rotation (orthogonal; inverse is the transpose).
    pub k_head: Matrix,
    /// FFN-input Kronecker pair.
    pub ffn_p1: Matrix,
    pub ffn_p1_inv: Matrix,
    pub ffn_p2: Matrix,
    pub ffn_p2_inv: Matrix,
    /// Down-projection input Kronecker pair.
    pub down_p1: Matrix,
    pub down_p1_inv: Matrix,
    pub down_p2: Matrix,
    pub down_p2_inv: Matrix,
    /// Effective clip thresholds in `(0, 1]`: per-linear weight and
    /// activation thresholds plus the two cache thresholds.
    pub clip_w: [f64; NUM_LINEARS],
    pub clip_a: [f64; NUM_LINEARS],
    pub clip_k: f64,
    pub clip_v: f64,
}

impl RealizedTransforms {
    pub fn identity(cfg: &ModelConfig) -> Self {
        let (a1, a2) = cfg.hidden_split();
        let (d1, d2) = cfg.intermediate_split();
        let id = Matrix::identity;
        Self {
            c_a: vec![1.0; cfg.hidden],
            c_o: vec![1.0; cfg.hidden],
            c_ug: vec![1.0; cfg.hidden],
            c_d: vec![1.0; cfg.intermediate],
            attn_p1: id(a1),
            attn_p1_inv: id(a1),
            attn_p2: id(a2),
            attn_p2_inv: id(a2),
            o_mix: id(cfg.heads),
            o_mix_inv: id(cfg.heads),
            v_head: id(cfg.head_dim()),
            v_head_inv: id(cfg.head_dim()),
            k_head: id(cfg.head_dim()),
            ffn_p1: id(a1),
            ffn_p1_inv: id(a1),
            ffn_p2: id(a2),
            ffn_p2_inv: id(a2),
            down_p1: id(d1),
            down_p1_inv: id(d1),
            down_p2: id(d2),
            down_p2_inv: id(d2),
            clip_w: [1.0; NUM_LINEARS],
            clip_a: [1.0; NUM_LINEARS],
            clip_k: 1.0,
            clip_v: 1.0,
        }
    }

    /// Statistics-driven per-channel scaling only (the SmoothQuant-style
    /// baseline); transforms stay identity.
    pub fn scaling(cfg: &ModelConfig, c_a: Vec<f64>, c_o: Vec<f64>, c_ug: Vec<f64>, c_d: Vec<f64>) -> Result<Self> {
        if c_a.len() != cfg.hidden
            || c_o.len() != cfg.hidden
            || c_ug.len() != cfg.hidden
            || c_d.len() != cfg.intermediate
        {
            return Err(Error::Dim("scaling vector widths do not match the model".into()));
        }
        Ok(Self { c_a, c_o, c_ug, c_d, ..Self::identity(cfg) })
    }

    /// Hadamard rotations at every insertion point. The o-projection site
    /// uses `H_heads (x) H_head_dim`, which is itself the full-width
    /// Hadamard, so the fusion structure carries over unchanged.
    pub fn hadamard_all(cfg: &ModelConfig) -> Result<Self> {
        let (a1, a2) = cfg.hidden_split();
        let (d1, d2) = cfg.intermediate_split();
        let pair = |n1: usize, n2: usize| -> Result<(Matrix, Matrix, Matrix, Matrix)> {
            let h1 = hadamard(n1)?;
            let h2 = hadamard(n2)?;
            let h1t = h1.transpose();
            let h2t = h2.transpose();
            Ok((h1, h1t, h2, h2t))
        };
        let (attn_p1, attn_p1_inv, attn_p2, attn_p2_inv) = pair(a1, a2)?;
        let (ffn_p1, ffn_p1_inv, ffn_p2, ffn_p2_inv) = pair(a1, a2)?;
        let (down_p1, down_p1_inv, down_p2, down_p2_inv) = pair(d1, d2)?;
        let h_heads = hadamard(cfg.heads)?;
        let h_head_dim = hadamard(cfg.head_dim())?;
        Ok(Self {
            o_mix_inv: h_heads.transpose(),
            o_mix: h_heads,
            v_head_inv: h_head_dim.transpose(),
            v_head: h_head_dim.clone(),
            k_head: h_head_dim,
            attn_p1,
            attn_p1_inv,
            attn_p2,
            attn_p2_inv,
            ffn_p1,
            ffn_p1_inv,
            ffn_p2,
            ffn_p2_inv,
            down_p1,
            down_p1_inv,
            down_p2,
            down_p2_inv,
            ..Self::identity(cfg)
        })
    }

    /// Realize a learned parameter set into matrices.
    pub fn from_set(set: &BlockTransformSet, cfg: &ModelConfig) -> Result<Self> {
        if set.p_a.width() != cfg.hidden
            || set.p_ug.width() != cfg.hidden
            || set.p_d.width() != cfg.intermediate
            || set.p_o1.dim() != cfg.heads
            || set.p_v.p.dim() != cfg.head_dim()
            || set.p_h.dim() != cfg.head_dim()
        {
            return Err(Error::Dim("transform set widths do not match the model".into()));
        }
        let (attn_p1, attn_p1_inv) = realize(&set.p_a.p1);
        let (attn_p2, attn_p2_inv) = realize(&set.p_a.p2);
        let (o_mix, o_mix_inv) = realize(&set.p_o1);
        let (v_head, v_head_inv) = realize(&set.p_v.p);
        let k_head = cayley(&set.p_h);
        let (ffn_p1, ffn_p1_inv) = realize(&set.p_ug.p1);
        let (ffn_p2, ffn_p2_inv) = realize(&set.p_ug.p2);
        let (down_p1, down_p1_inv) = realize(&set.p_d.p1);
        let (down_p2, down_p2_inv) = realize(&set.p_d.p2);
        let mut clip_w = [1.0; NUM_LINEARS];
        let mut clip_a = [1.0; NUM_LINEARS];
        for (i, c) in set.clips.linears.iter().enumerate() {
            clip_w[i] = c.weight_threshold();
            clip_a[i] = c.activation_threshold();
        }
        Ok(Self {
            c_a: set.gamma_a.iter().map(|g| g.exp()).collect(),
            c_o: set.gamma_o.iter().map(|g| g.exp()).collect(),
            c_ug: set.gamma_ug.iter().map(|g| g.exp()).collect(),
            c_d: set.gamma_d.iter().map(|g| g.exp()).collect(),
            attn_p1,
            attn_p1_inv,
            attn_p2,
            attn_p2_inv,
            o_mix,
            o_mix_inv,
            v_head,
            v_head_inv,
            k_head,
            ffn_p1,
            ffn_p1_inv,
            ffn_p2,
            ffn_p2_inv,
            down_p1,
            down_p1_inv,
            down_p2,
            down_p2_inv,
            clip_w,
            clip_a,
            clip_k: crate::quant::clip_threshold(set.clips.k_cache),
            clip_v: crate::quant::clip_threshold(set.clips.v_cache),
        })
    }
}

/// Baseline and learned transform families selectable at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformVariant {
    Identity,
    Scaling,
    Hadamard,
    Flat,
}

impl std::str::FromStr for TransformVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "scaling" => Ok(Self::Scaling),
            "hadamard" => Ok(Self::Hadamard),
            "flat" => Ok(Self::Flat),
            other => Err(Error::Config(format!(
                "unknown transform variant '{other}' (expected identity|scaling|hadamard|flat)"
            ))),
        }
    }
}

/// Build per-block realized transforms for a variant.
///
/// `Scaling` derives its vectors from calibration statistics (per-site
/// activation/weight column magnitudes); `Flat` realizes the provided
/// learned sets; the other variants need neither.
pub fn realize_variant(
    variant: TransformVariant,
    model: &super::TinyModel,
    calib: &[Matrix],
    sets: Option<&[BlockTransformSet]>,
) -> Result<Vec<RealizedTransforms>> {
    let cfg = &model.config;
    match variant {
        TransformVariant::Identity => {
            Ok((0..cfg.layers).map(|_| RealizedTransforms::identity(cfg)).collect())
        }
        TransformVariant::Hadamard => {
            (0..cfg.layers).map(|_| RealizedTransforms::hadamard_all(cfg)).collect()
        }
        TransformVariant::Flat => {
            let sets = sets.ok_or_else(|| {
                Error::InvalidArg("flat variant requires calibrated transform sets".into())
            })?;
            if sets.len() != cfg.layers {
                return Err(Error::Dim(format!(
                    "{} transform sets for {} layers",
                    sets.len(),
                    cfg.layers
                )));
            }
            sets.iter().map(|s| RealizedTransforms::from_set(s, cfg)).collect()
        }
        TransformVariant::Scaling => scaling_from_stats(model, calib),
    }
}

/// SmoothQuant-style scaling vectors from per-site absolute-maximum
/// statistics of the full-precision forward pass.
fn scaling_from_stats(
    model: &super::TinyModel,
    calib: &[Matrix],
) -> Result<Vec<RealizedTransforms>> {
    use crate::transforms::{smooth_scale, ScalingConfig};

    if calib.is_empty() {
        return Err(Error::InvalidArg("scaling variant needs calibration samples".into()));
    }
    let cfg = &model.config;
    let scfg = ScalingConfig::default();
    let identity: Vec<RealizedTransforms> =
        (0..cfg.layers).map(|_| RealizedTransforms::identity(cfg)).collect();

    // Track the per-site input column maxima across all samples and blocks.
    let mut out = Vec::with_capacity(cfg.layers);
    let mut stats: Vec<super::forward::SiteAbsmax> = (0..cfg.layers)
        .map(|_| super::forward::SiteAbsmax::new(cfg))
        .collect();
    for sample in calib {
        super::forward::accumulate_site_absmax(model, sample, &identity, &mut stats)?;
    }
    for (block, st) in model.blocks.iter().zip(stats.iter()) {
        let w_qkv = col_absmax_many(&[&block.wq, &block.wk, &block.wv]);
        let w_o = col_absmax_many(&[&block.wo]);
        let w_gu = col_absmax_many(&[&block.w_gate, &block.w_up]);
        let w_d = col_absmax_many(&[&block.w_down]);
        let c_a = smooth_scale(&st.attn_in, &w_qkv, &scfg)?;
        let c_o = smooth_scale(&st.o_in, &w_o, &scfg)?;
        let c_ug = smooth_scale(&st.ffn_in, &w_gu, &scfg)?;
        let c_d = smooth_scale(&st.down_in, &w_d, &scfg)?;
        out.push(RealizedTransforms::scaling(cfg, c_a, c_o, c_ug, c_d)?);
    }
    Ok(out)
}

/// Column-wise absolute maxima across several weight matrices sharing an
/// input (q/k/v share the attention input; gate/up share the FFN input).
fn col_absmax_many(ws: &[&Matrix]) -> Vec<f64> {
    let cols = ws[0].cols();
    let mut m = vec![0.0f64; cols];
    for w in ws {
        for r in 0..w.rows() {
            for (j, &v) in w.row(r).iter().enumerate() {
                m[j] = m[j].max(v.abs());
            }
        }
    }
    m
}
