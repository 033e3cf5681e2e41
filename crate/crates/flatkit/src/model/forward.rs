//! Block forward pass, full precision or fake-quantized.
//!
//! The transformed path rewrites every linear layer as
//! `quant(x * diag(c)^{-1} * P) * quant(P^{-1} * diag(c) * W^T)` with the
//! weight side absorbed offline; with quantization disabled the rewrite is
//! exact, which the equivalence tests pin down. Scaling vectors are merged
//! into the preceding RMSNorm weight (attention/FFN inputs), the value
//! projection (o-projection input), and the up projection (down-projection
//! input), mirroring how the merges avoid any online cost.

use super::sets::{LinearSlot, RealizedTransforms};
use super::{BlockWeights, ModelConfig, QuantMode, TinyModel};
use crate::error::{Error, Result};
use crate::linalg::{kron_apply, Matrix};
use crate::quant::{fake_quant, Granularity, QuantSpec, Scheme};

/// RMSNorm epsilon, fixed for the whole library.
pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalization without the learned weight.
fn rmsnorm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Interleaved-pair rotary embedding applied in place to one head's rows.
/// Pair `i` of position `t` rotates by `t * base^(-2i/head_dim)`.
fn rope_in_place(x: &mut Matrix, base: f64) {
    let hd = x.cols();
    let half = hd / 2;
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for i in 0..half {
            let theta = (t as f64) * base.powf(-2.0 * i as f64 / hd as f64);
            let (s, c) = theta.sin_cos();
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Causal row-wise softmax: row `i` attends to columns `0..=i`.
fn softmax_causal(scores: &Matrix) -> Matrix {
    let n = scores.rows();
    let mut out = Matrix::zeros(n, scores.cols());
    for i in 0..n {
        let active = i + 1;
        let row = scores.row(i);
        let m = row[..active].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..active {
            z += (row[j] - m).exp();
        }
        let orow = out.row_mut(i);
        for j in 0..active {
            orow[j] = (row[j] - m).exp() / z;
        }
    }
    out
}

fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v = *v / (1.0 + (-*v).exp());
    }
    out
}

fn act_spec_with(spec: &QuantSpec) -> QuantSpec {
    QuantSpec { granularity: Granularity::PerToken, scheme: Scheme::Symmetric, ..*spec }
}

fn weight_spec_with(spec: &QuantSpec) -> QuantSpec {
    QuantSpec { granularity: Granularity::PerChannel, scheme: Scheme::Symmetric, ..*spec }
}

/// A block with transforms absorbed and weights (optionally) already
/// fake-quantized; reusable across forward calls.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
    norm_attn: Vec<f64>,
    norm_ffn: Vec<f64>,
    t: RealizedTransforms,
    mode: QuantMode,
    heads: usize,
    rope_base: f64,
}

/// Absorb the transforms of `t` into the block weights and apply weight
/// fake-quantization if the mode asks for it.
pub fn prepare_block(
    w: &BlockWeights,
    cfg: &ModelConfig,
    t: &RealizedTransforms,
    mode: &QuantMode,
) -> Result<PreparedBlock> {
    let absorb_pair = |m: &Matrix, p1_inv: &Matrix, p2_inv: &Matrix| -> Result<Matrix> {
        kron_apply(m, &p1_inv.transpose(), &p2_inv.transpose())
    };
    let inv = |c: &[f64]| -> Vec<f64> { c.iter().map(|v| 1.0 / v).collect() };

    // Attention-input side: W <- W diag(c_a) P_a^{-T}.
    let wq = absorb_pair(&w.wq.col_scale(&t.c_a)?, &t.attn_p1_inv, &t.attn_p2_inv)?;
    let wk = absorb_pair(&w.wk.col_scale(&t.c_a)?, &t.attn_p1_inv, &t.attn_p2_inv)?;
    // Value projection additionally absorbs the o-input scaling on its
    // output channels: W_v <- diag(c_o)^{-1} W_v diag(c_a) P_a^{-T}.
    let wv = absorb_pair(&w.wv.col_scale(&t.c_a)?, &t.attn_p1_inv, &t.attn_p2_inv)?
        .row_scale(&inv(&t.c_o))?;
    // Output projection absorbs the fused P_o = P_o1 (x) P_v.
    let wo = absorb_pair(&w.wo.col_scale(&t.c_o)?, &t.o_mix_inv, &t.v_head_inv)?;
    // FFN side.
    let w_gate = absorb_pair(&w.w_gate.col_scale(&t.c_ug)?, &t.ffn_p1_inv, &t.ffn_p2_inv)?;
    let w_up = absorb_pair(&w.w_up.col_scale(&t.c_ug)?, &t.ffn_p1_inv, &t.ffn_p2_inv)?
        .row_scale(&inv(&t.c_d))?;
    let w_down = absorb_pair(&w.w_down.col_scale(&t.c_d)?, &t.down_p1_inv, &t.down_p2_inv)?;

    // Scaling vectors of the two norm-fed sites merge into the norm weights.
    let norm_attn: Vec<f64> = w.norm_attn.iter().zip(t.c_a.iter()).map(|(g, c)| g / c).collect();
    let norm_ffn: Vec<f64> = w.norm_ffn.iter().zip(t.c_ug.iter()).map(|(g, c)| g / c).collect();

    let maybe_quant_w = |m: Matrix, slot: LinearSlot| -> Result<Matrix> {
        match &mode.weights {
            Some(spec) => fake_quant(&m, &weight_spec_with(spec), t.clip_w[slot as usize]),
            None => Ok(m),
        }
    };

    Ok(PreparedBlock {
        wq: maybe_quant_w(wq, LinearSlot::Q)?,
        wk: maybe_quant_w(wk, LinearSlot::K)?,
        wv: maybe_quant_w(wv, LinearSlot::V)?,
        wo: maybe_quant_w(wo, LinearSlot::O)?,
        w_gate: maybe_quant_w(w_gate, LinearSlot::Gate)?,
        w_up: maybe_quant_w(w_up, LinearSlot::Up)?,
        w_down: maybe_quant_w(w_down, LinearSlot::Down)?,
        norm_attn,
        norm_ffn,
        t: t.clone(),
        mode: *mode,
        heads: cfg.heads,
        rope_base: cfg.rope_base,
    })
}

impl PreparedBlock {
    /// The absorbed weight matrices in slot order (q, k, v, o, gate, up,
    /// down) — already fake-quantized if the mode quantizes weights.
    pub fn absorbed_weights(&self) -> [&Matrix; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
    }

    fn quant_act(&self, x: &Matrix, slot: LinearSlot) -> Result<Matrix> {
        match &self.mode.activations {
            Some(spec) => fake_quant(x, &act_spec_with(spec), self.t.clip_a[slot as usize]),
            None => Ok(x.clone()),
        }
    }

    fn quant_cache(&self, x: &Matrix, clip: f64) -> Result<Matrix> {
        match &self.mode.kv {
            Some(spec) => fake_quant(x, spec, clip),
            None => Ok(x.clone()),
        }
    }

    /// One block forward over a single sequence (`seq x hidden`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let hd = x.cols() / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();

        // Attention.
        let za = rmsnorm_rows(x).col_scale(&self.norm_attn)?;
        let za = kron_apply(&za, &self.t.attn_p1, &self.t.attn_p2)?;
        let q = self.quant_act(&za, LinearSlot::Q)?.matmul(&self.wq.transpose())?;
        let k = self.quant_act(&za, LinearSlot::K)?.matmul(&self.wk.transpose())?;
        let v = self.quant_act(&za, LinearSlot::V)?.matmul(&self.wv.transpose())?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = q.col_slice(h * hd, hd)?;
            let mut kh = k.col_slice(h * hd, hd)?;
            rope_in_place(&mut qh, self.rope_base);
            rope_in_place(&mut kh, self.rope_base);
            // Joint rotation by the key-cache transform preserves scores.
            let qh = qh.matmul(&self.t.k_head)?;
            let kh = kh.matmul(&self.t.k_head)?;
            let kh = self.quant_cache(&kh, self.t.clip_k)?;

            let vh = v.col_slice(h * hd, hd)?.matmul(&self.t.v_head)?;
            let vh = self.quant_cache(&vh, self.t.clip_v)?;

            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let probs = softmax_causal(&scores);
            head_outputs.push(probs.matmul(&vh)?);
        }
        let o = Matrix::concat_cols(&head_outputs)?;
        // Values already carry P_v, so only the across-head factor runs here.
        let o = kron_apply(&o, &self.t.o_mix, &Matrix::identity(hd))?;
        let attn = self.quant_act(&o, LinearSlot::O)?.matmul(&self.wo.transpose())?;
        let h1 = x.add(&attn)?;

        // Feed-forward.
        let zf = rmsnorm_rows(&h1).col_scale(&self.norm_ffn)?;
        let zf = kron_apply(&zf, &self.t.ffn_p1, &self.t.ffn_p2)?;
        let gate = silu(&self.quant_act(&zf, LinearSlot::Gate)?.matmul(&self.w_gate.transpose())?);
        let up = self.quant_act(&zf, LinearSlot::Up)?.matmul(&self.w_up.transpose())?;
        let d_in = gate.mul_elem(&up)?;
        let zd = kron_apply(&d_in, &self.t.down_p1, &self.t.down_p2)?;
        let ffn = self.quant_act(&zd, LinearSlot::Down)?.matmul(&self.w_down.transpose())?;
        h1.add(&ffn)
    }
}

/// One-shot block forward: `transforms = None` runs the vanilla block.
pub fn block_forward(
    x: &Matrix,
    w: &BlockWeights,
    cfg: &ModelConfig,
    transforms: Option<&RealizedTransforms>,
    mode: &QuantMode,
) -> Result<Matrix> {
    if x.cols() != cfg.hidden {
        return Err(Error::Dim(format!(
            "input width {} vs hidden {}",
            x.cols(),
            cfg.hidden
        )));
    }
    if transforms.is_none() && !mode.is_off() {
        // Quantized runs always go through a transform bundle; the identity
        // bundle is the explicit way to ask for "no transform".
        return Err(Error::InvalidArg(
            "quantized forward requires a transform bundle (use the identity bundle)".into(),
        ));
    }
    let identity;
    let t = match transforms {
        Some(t) => t,
        None => {
            identity = RealizedTransforms::identity(cfg);
            &identity
        }
    };
    prepare_block(w, cfg, t, mode)?.forward(x)
}

/// Forward through the whole stack, returning the hidden state after each
/// block (the per-layer view the error landscape is built from).
pub fn forward_hidden_states(
    model: &TinyModel,
    x: &Matrix,
    transforms: Option<&[RealizedTransforms]>,
    mode: &QuantMode,
) -> Result<Vec<Matrix>> {
    if let Some(sets) = transforms {
        if sets.len() != model.blocks.len() {
            return Err(Error::Dim(format!(
                "{} transform bundles for {} blocks",
                sets.len(),
                model.blocks.len()
            )));
        }
    }
    let mut h = x.clone();
    let mut out = Vec::with_capacity(model.blocks.len());
    for (i, block) in model.blocks.iter().enumerate() {
        let t = transforms.map(|s| &s[i]);
        h = block_forward(&h, block, &model.config, t, mode)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// The four transformed linear-input tensors of a block (attention input,
/// o-projection input, FFN input, down-projection input), computed in full
/// precision with the transforms applied. This is the view the flatness
/// traces are measured on.
pub fn site_activations(
    w: &BlockWeights,
    cfg: &ModelConfig,
    t: &RealizedTransforms,
    x: &Matrix,
) -> Result<[Matrix; 4]> {
    let pb = prepare_block(w, cfg, t, &QuantMode::off())?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let za = rmsnorm_rows(x).col_scale(&pb.norm_attn)?;
    let za = kron_apply(&za, &t.attn_p1, &t.attn_p2)?;
    let q = za.matmul(&pb.wq.transpose())?;
    let k = za.matmul(&pb.wk.transpose())?;
    let v = za.matmul(&pb.wv.transpose())?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let mut qh = q.col_slice(h * hd, hd)?;
        let mut kh = k.col_slice(h * hd, hd)?;
        rope_in_place(&mut qh, cfg.rope_base);
        rope_in_place(&mut kh, cfg.rope_base);
        let qh = qh.matmul(&t.k_head)?;
        let kh = kh.matmul(&t.k_head)?;
        let vh = v.col_slice(h * hd, hd)?.matmul(&t.v_head)?;
        let probs = softmax_causal(&qh.matmul(&kh.transpose())?.scale(scale));
        heads.push(probs.matmul(&vh)?);
    }
    let o = Matrix::concat_cols(&heads)?;
    let o = kron_apply(&o, &t.o_mix, &Matrix::identity(hd))?;
    let attn = o.matmul(&pb.wo.transpose())?;
    let h1 = x.add(&attn)?;

    let zf = rmsnorm_rows(&h1).col_scale(&pb.norm_ffn)?;
    let zf = kron_apply(&zf, &t.ffn_p1, &t.ffn_p2)?;
    let gate = silu(&zf.matmul(&pb.w_gate.transpose())?);
    let up = zf.matmul(&pb.w_up.transpose())?;
    let d_in = gate.mul_elem(&up)?;
    let zd = kron_apply(&d_in, &t.down_p1, &t.down_p2)?;
    Ok([za, o, zf, zd])
}

/// Transform per-head key and value caches: keys rotate by the orthogonal
/// `p_h`, values by the invertible `p_v` (whose inverse the output
/// projection absorbs). Rejects a non-orthogonal `p_h`, since only a joint
/// orthogonal rotation of queries and keys preserves attention scores.
pub fn attach_kv_transforms(
    k_heads: &[Matrix],
    v_heads: &[Matrix],
    p_h: &Matrix,
    p_v: &Matrix,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let residual = p_h.transpose().matmul(p_h)?.identity_residual();
    if residual > 1e-10 {
        return Err(Error::InvalidArg(format!(
            "key transform is not orthogonal (||Q^T Q - I|| = {residual:.3e})"
        )));
    }
    let ks = k_heads.iter().map(|k| k.matmul(p_h)).collect::<Result<Vec<_>>>()?;
    let vs = v_heads.iter().map(|v| v.matmul(p_v)).collect::<Result<Vec<_>>>()?;
    Ok((ks, vs))
}

/// Scale selected channels by `magnitude_ratio` and, optionally, the first
/// token row by `pivot_ratio` — the synthetic stand-in for outlier
/// channels and outsized initial tokens.
///
/// Note that in this pre-norm architecture the error concentration at
/// initial tokens comes from the channel outliers combined with causal
/// attention (position 0 aggregates exactly one value vector, so its
/// attention-path error never averages out); RMSNorm cancels a uniform
/// row scale, so `pivot_ratio` changes magnitudes but is not what makes
/// token 0 hard to quantize.
pub fn plant_outliers(
    x: &Matrix,
    channels: &[usize],
    magnitude_ratio: f64,
    pivot_ratio: Option<f64>,
) -> Result<Matrix> {
    if let Some(&bad) = channels.iter().find(|&&c| c >= x.cols()) {
        return Err(Error::InvalidArg(format!(
            "outlier channel {bad} out of range for width {}",
            x.cols()
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for &c in channels {
            row[c] *= magnitude_ratio;
        }
    }
    if let Some(p) = pivot_ratio {
        if out.rows() > 0 {
            for v in out.row_mut(0) {
                *v *= p;
            }
        }
    }
    Ok(out)
}

/// Per-site input-column absolute maxima, accumulated across samples.
#[derive(Debug, Clone)]
pub(super) struct SiteAbsmax {
    pub attn_in: Vec<f64>,
    pub o_in: Vec<f64>,
    pub ffn_in: Vec<f64>,
    pub down_in: Vec<f64>,
}

impl SiteAbsmax {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            attn_in: vec![0.0; cfg.hidden],
            o_in: vec![0.0; cfg.hidden],
            ffn_in: vec![0.0; cfg.hidden],
            down_in: vec![0.0; cfg.intermediate],
        }
    }
}

fn absmax_into(acc: &mut [f64], m: &Matrix) {
    for r in 0..m.rows() {
        for (j, &v) in m.row(r).iter().enumerate() {
            acc[j] = acc[j].max(v.abs());
        }
    }
}

/// Full-precision forward of one sample that records the (untransformed)
/// linear-layer inputs at each site, feeding the scaling baseline.
pub(super) fn accumulate_site_absmax(
    model: &TinyModel,
    x: &Matrix,
    identity: &[RealizedTransforms],
    stats: &mut [SiteAbsmax],
) -> Result<()> {
    let cfg = &model.config;
    let mode = QuantMode::off();
    let mut h = x.clone();
    for (i, block) in model.blocks.iter().enumerate() {
        let pb = prepare_block(block, cfg, &identity[i], &mode)?;
        // Recompute the intermediate tensors the sites see.
        let za = rmsnorm_rows(&h).col_scale(&pb.norm_attn)?;
        absmax_into(&mut stats[i].attn_in, &za);

        let q = za.matmul(&pb.wq.transpose())?;
        let k = za.matmul(&pb.wk.transpose())?;
        let v = za.matmul(&pb.wv.transpose())?;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let mut qh = q.col_slice(hh * hd, hd)?;
            let mut kh = k.col_slice(hh * hd, hd)?;
            rope_in_place(&mut qh, cfg.rope_base);
            rope_in_place(&mut kh, cfg.rope_base);
            let vh = v.col_slice(hh * hd, hd)?;
            let probs = softmax_causal(&qh.matmul(&kh.transpose())?.scale(scale));
            head_outputs.push(probs.matmul(&vh)?);
        }
        let o = Matrix::concat_cols(&head_outputs)?;
        absmax_into(&mut stats[i].o_in, &o);
        let attn = o.matmul(&pb.wo.transpose())?;
        let h1 = h.add(&attn)?;

        let zf = rmsnorm_rows(&h1).col_scale(&pb.norm_ffn)?;
        absmax_into(&mut stats[i].ffn_in, &zf);
        let gate = silu(&zf.matmul(&pb.w_gate.transpose())?);
        let up = zf.matmul(&pb.w_up.transpose())?;
        let d_in = gate.mul_elem(&up)?;
        absmax_into(&mut stats[i].down_in, &d_in);
        let ffn = d_in.matmul(&pb.w_down.transpose())?;
        h = h1.add(&ffn)?;
    }
    Ok(())
}
