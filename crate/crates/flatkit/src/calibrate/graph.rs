//! Builds the quantized block forward as a tape graph, with the learnable
//! parameters bound as leaves.
//!
//! The graph mirrors `model::forward` op for op (the consistency tests pin
//! the two paths together bit-for-bit on shared inputs), but every
//! transform matrix is realized on the tape from its parameters so
//! gradients reach the Cayley factors, log-singular-values, log-scales,
//! and clip logits.

use super::tape::{NodeId, QuantKind, Round, Tape};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{BlockTransformSet, BlockWeights, LinearSlot, ModelConfig, QuantMode};
use crate::quant::ClipParam;
use crate::transforms::{FullTransform, KroneckerTransform};
use crate::linalg::{SkewParam, SvdInvertible};

/// What a parameter vector means when mapping gradients and optimizer
/// updates back onto the transform set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Skew,
    LogSigma,
    Gamma,
    ClipLogit,
}

/// One flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub kind: ParamKind,
    pub values: Vec<f64>,
}

/// The trainable subset of a [`BlockTransformSet`], flattened in a fixed
/// order. Which pieces are present depends on the ablation switches and on
/// which tensor families the quantization mode enables.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub defs: Vec<ParamDef>,
    pub lt: bool,
    pub ps: bool,
    pub lct: bool,
}

impl ParamSet {
    /// Flatten `set` according to the switches. With learnable clipping
    /// enabled, only clip logits whose tensor family is actually quantized
    /// under `mode` become parameters (the others would be unreachable
    /// from the loss).
    pub fn from_set(
        set: &BlockTransformSet,
        mode: &QuantMode,
        lt: bool,
        ps: bool,
        lct: bool,
    ) -> Self {
        let mut defs = Vec::new();
        if lt {
            let mut svd = |name: &str, p: &SvdInvertible| {
                defs.push(ParamDef {
                    name: format!("{name}.u_skew"),
                    kind: ParamKind::Skew,
                    values: p.u_param().upper().to_vec(),
                });
                defs.push(ParamDef {
                    name: format!("{name}.v_skew"),
                    kind: ParamKind::Skew,
                    values: p.v_param().upper().to_vec(),
                });
                defs.push(ParamDef {
                    name: format!("{name}.log_sigma"),
                    kind: ParamKind::LogSigma,
                    values: p.log_sigma().to_vec(),
                });
            };
            svd("p_a.p1", &set.p_a.p1);
            svd("p_a.p2", &set.p_a.p2);
            svd("p_o1", &set.p_o1);
            svd("p_v", &set.p_v.p);
            svd("p_ug.p1", &set.p_ug.p1);
            svd("p_ug.p2", &set.p_ug.p2);
            svd("p_d.p1", &set.p_d.p1);
            svd("p_d.p2", &set.p_d.p2);
            defs.push(ParamDef {
                name: "p_h.skew".into(),
                kind: ParamKind::Skew,
                values: set.p_h.upper().to_vec(),
            });
        }
        if ps {
            for (name, v) in [
                ("gamma_a", &set.gamma_a),
                ("gamma_o", &set.gamma_o),
                ("gamma_ug", &set.gamma_ug),
                ("gamma_d", &set.gamma_d),
            ] {
                defs.push(ParamDef { name: name.into(), kind: ParamKind::Gamma, values: v.clone() });
            }
        }
        if lct {
            const SLOTS: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];
            if mode.weights.is_some() {
                for (i, slot) in SLOTS.iter().enumerate() {
                    defs.push(ParamDef {
                        name: format!("clip_w.{slot}"),
                        kind: ParamKind::ClipLogit,
                        values: vec![set.clips.linears[i].theta_w],
                    });
                }
            }
            if mode.activations.is_some() {
                for (i, slot) in SLOTS.iter().enumerate() {
                    defs.push(ParamDef {
                        name: format!("clip_a.{slot}"),
                        kind: ParamKind::ClipLogit,
                        values: vec![set.clips.linears[i].theta_a],
                    });
                }
            }
            if mode.kv.is_some() {
                defs.push(ParamDef {
                    name: "clip_k".into(),
                    kind: ParamKind::ClipLogit,
                    values: vec![set.clips.k_cache],
                });
                defs.push(ParamDef {
                    name: "clip_v".into(),
                    kind: ParamKind::ClipLogit,
                    values: vec![set.clips.v_cache],
                });
            }
        }
        Self { defs, lt, ps, lct }
    }

    fn find(&self, name: &str) -> Option<&ParamDef> {
        self.defs.iter().find(|d| d.name == name)
    }

    /// Reassemble a [`BlockTransformSet`] from the current values.
    /// Disabled pieces come back as identity / unit / no-clipping.
    pub fn to_set(&self, cfg: &ModelConfig) -> BlockTransformSet {
        let mut set = BlockTransformSet::identity(cfg);
        if self.lt {
            let svd = |name: &str, n: usize| -> SvdInvertible {
                let u = self.find(&format!("{name}.u_skew")).expect("registered").values.clone();
                let v = self.find(&format!("{name}.v_skew")).expect("registered").values.clone();
                let s = self.find(&format!("{name}.log_sigma")).expect("registered").values.clone();
                SvdInvertible::new(
                    SkewParam::new(n, u).expect("shape"),
                    SkewParam::new(n, v).expect("shape"),
                    s,
                )
                .expect("shape")
            };
            let (a1, a2) = cfg.hidden_split();
            let (d1, d2) = cfg.intermediate_split();
            set.p_a = KroneckerTransform { p1: svd("p_a.p1", a1), p2: svd("p_a.p2", a2) };
            set.p_o1 = svd("p_o1", cfg.heads);
            set.p_v = FullTransform { p: svd("p_v", cfg.head_dim()) };
            set.p_ug = KroneckerTransform { p1: svd("p_ug.p1", a1), p2: svd("p_ug.p2", a2) };
            set.p_d = KroneckerTransform { p1: svd("p_d.p1", d1), p2: svd("p_d.p2", d2) };
            set.p_h = SkewParam::new(
                cfg.head_dim(),
                self.find("p_h.skew").expect("registered").values.clone(),
            )
            .expect("shape");
        }
        if self.ps {
            set.gamma_a = self.find("gamma_a").expect("registered").values.clone();
            set.gamma_o = self.find("gamma_o").expect("registered").values.clone();
            set.gamma_ug = self.find("gamma_ug").expect("registered").values.clone();
            set.gamma_d = self.find("gamma_d").expect("registered").values.clone();
        }
        if self.lct {
            const SLOTS: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];
            for (i, slot) in SLOTS.iter().enumerate() {
                let w = self
                    .find(&format!("clip_w.{slot}"))
                    .map_or(40.0, |d| d.values[0]);
                let a = self
                    .find(&format!("clip_a.{slot}"))
                    .map_or(40.0, |d| d.values[0]);
                set.clips.linears[i] = ClipParam::new(w, a);
            }
            set.clips.k_cache = self.find("clip_k").map_or(40.0, |d| d.values[0]);
            set.clips.v_cache = self.find("clip_v").map_or(40.0, |d| d.values[0]);
        }
        set
    }
}

/// Leaf node ids of the bound parameters, in definition order.
pub struct BoundParams(pub Vec<NodeId>);

/// Node handles for the realized transforms inside one graph.
struct TransformNodes {
    c_a: NodeId,
    c_o: NodeId,
    c_ug: NodeId,
    c_d: NodeId,
    attn_p1: NodeId,
    attn_p1_inv: NodeId,
    attn_p2: NodeId,
    attn_p2_inv: NodeId,
    o_mix: NodeId,
    o_mix_inv: NodeId,
    v_head: NodeId,
    v_head_inv: NodeId,
    k_head: NodeId,
    ffn_p1: NodeId,
    ffn_p1_inv: NodeId,
    ffn_p2: NodeId,
    ffn_p2_inv: NodeId,
    down_p1: NodeId,
    down_p1_inv: NodeId,
    down_p2: NodeId,
    down_p2_inv: NodeId,
    clip_w: [NodeId; 7],
    clip_a: [NodeId; 7],
    clip_k: NodeId,
    clip_v: NodeId,
}

/// Bind every parameter as a leaf and realize the transform matrices on
/// the tape. Returns the bound leaf ids (for gradient extraction) and the
/// realized handles.
fn realize_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamSet,
) -> Result<(BoundParams, TransformNodes)> {
    let mut bound = Vec::with_capacity(params.defs.len());
    let mut leaf_of = std::collections::HashMap::new();
    for def in &params.defs {
        let id = tape.leaf_vec(&def.values);
        bound.push(id);
        leaf_of.insert(def.name.clone(), id);
    }
    let (a1, a2) = cfg.hidden_split();
    let (d1, d2) = cfg.intermediate_split();

    let cayley = |tape: &mut Tape, upper: NodeId, n: usize| -> Result<NodeId> {
        let a = tape.skew_embed(upper, n);
        let i = tape.leaf(Matrix::identity(n));
        let im = tape.sub(i, a);
        let ip = tape.add(i, a);
        let inv = tape.inverse(ip)?;
        Ok(tape.matmul(im, inv))
    };

    let svd_pair = |tape: &mut Tape, name: &str, n: usize| -> Result<(NodeId, NodeId)> {
        if !params.lt {
            let i = tape.leaf(Matrix::identity(n));
            return Ok((i, i));
        }
        let u = leaf_of[&format!("{name}.u_skew")];
        let v = leaf_of[&format!("{name}.v_skew")];
        let sig = leaf_of[&format!("{name}.log_sigma")];
        let qu = cayley(tape, u, n)?;
        let qv = cayley(tape, v, n)?;
        let s = tape.exp(sig);
        let s_inv = tape.recip(s);
        let us = tape.col_scale(qu, s);
        let qvt = tape.transpose(qv);
        let p = tape.matmul(us, qvt);
        let vs = tape.col_scale(qv, s_inv);
        let qut = tape.transpose(qu);
        let p_inv = tape.matmul(vs, qut);
        Ok((p, p_inv))
    };

    let (attn_p1, attn_p1_inv) = svd_pair(tape, "p_a.p1", a1)?;
    let (attn_p2, attn_p2_inv) = svd_pair(tape, "p_a.p2", a2)?;
    let (o_mix, o_mix_inv) = svd_pair(tape, "p_o1", cfg.heads)?;
    let (v_head, v_head_inv) = svd_pair(tape, "p_v", cfg.head_dim())?;
    let (ffn_p1, ffn_p1_inv) = svd_pair(tape, "p_ug.p1", a1)?;
    let (ffn_p2, ffn_p2_inv) = svd_pair(tape, "p_ug.p2", a2)?;
    let (down_p1, down_p1_inv) = svd_pair(tape, "p_d.p1", d1)?;
    let (down_p2, down_p2_inv) = svd_pair(tape, "p_d.p2", d2)?;
    let k_head = if params.lt {
        cayley(tape, leaf_of["p_h.skew"], cfg.head_dim())?
    } else {
        tape.leaf(Matrix::identity(cfg.head_dim()))
    };

    let gamma_vec = |tape: &mut Tape, name: &str, n: usize| -> NodeId {
        if params.ps {
            let g = leaf_of[name];
            tape.exp(g)
        } else {
            tape.leaf_vec(&vec![1.0; n])
        }
    };
    let c_a = gamma_vec(tape, "gamma_a", cfg.hidden);
    let c_o = gamma_vec(tape, "gamma_o", cfg.hidden);
    let c_ug = gamma_vec(tape, "gamma_ug", cfg.hidden);
    let c_d = gamma_vec(tape, "gamma_d", cfg.intermediate);

    let clip_node = |tape: &mut Tape, name: &str| -> NodeId {
        match leaf_of.get(name) {
            Some(&theta) if params.lct => tape.sigmoid(theta),
            _ => tape.leaf(Matrix::from_vec(1, 1, vec![1.0]).expect("scalar")),
        }
    };
    const SLOTS: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];
    let mut clip_w = [tape.leaf(Matrix::from_vec(1, 1, vec![1.0]).expect("scalar")); 7];
    let mut clip_a = clip_w;
    for (i, slot) in SLOTS.iter().enumerate() {
        clip_w[i] = clip_node(tape, &format!("clip_w.{slot}"));
        clip_a[i] = clip_node(tape, &format!("clip_a.{slot}"));
    }
    let clip_k = clip_node(tape, "clip_k");
    let clip_v = clip_node(tape, "clip_v");

    Ok((
        BoundParams(bound),
        TransformNodes {
            c_a,
            c_o,
            c_ug,
            c_d,
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
            clip_k,
            clip_v,
        },
    ))
}

/// Build the full quantized block graph; returns the bound parameter
/// leaves, the block output node, and the scalar loss node against
/// `teacher_out`.
#[allow(clippy::too_many_arguments)]
pub fn build_block_graph(
    tape: &mut Tape,
    weights: &BlockWeights,
    cfg: &ModelConfig,
    params: &ParamSet,
    mode: &QuantMode,
    student_in: &Matrix,
    teacher_out: Option<&Matrix>,
    round: Round,
) -> Result<(BoundParams, NodeId, Option<NodeId>)> {
    let (bound, t) = realize_on_tape(tape, cfg, params)?;
    let hd = cfg.head_dim();

    // Absorbed weights.
    let absorb = |tape: &mut Tape, w: NodeId, p1_inv: NodeId, p2_inv: NodeId| -> NodeId {
        let p1t = tape.transpose(p1_inv);
        let p2t = tape.transpose(p2_inv);
        tape.kron_apply(w, p1t, p2t)
    };
    let row_unscale = |tape: &mut Tape, w: NodeId, c: NodeId| -> NodeId {
        // diag(1/c) * W implemented as (W^T diag(1/c))^T.
        let c_inv = tape.recip(c);
        let wt = tape.transpose(w);
        let scaled = tape.col_scale(wt, c_inv);
        tape.transpose(scaled)
    };
    let maybe_quant_w = |tape: &mut Tape, w: NodeId, slot: LinearSlot| -> NodeId {
        match &mode.weights {
            Some(spec) => {
                tape.quant(w, t.clip_w[slot as usize], spec.bits, QuantKind::SymPerRow, round)
            }
            None => w,
        }
    };

    let wq0 = tape.leaf(weights.wq.clone());
    let wk0 = tape.leaf(weights.wk.clone());
    let wv0 = tape.leaf(weights.wv.clone());
    let wo0 = tape.leaf(weights.wo.clone());
    let wg0 = tape.leaf(weights.w_gate.clone());
    let wu0 = tape.leaf(weights.w_up.clone());
    let wd0 = tape.leaf(weights.w_down.clone());

    let wq_c = tape.col_scale(wq0, t.c_a);
    let wq_t = absorb(tape, wq_c, t.attn_p1_inv, t.attn_p2_inv);
    let wq_q = maybe_quant_w(tape, wq_t, LinearSlot::Q);

    let wk_c = tape.col_scale(wk0, t.c_a);
    let wk_t = absorb(tape, wk_c, t.attn_p1_inv, t.attn_p2_inv);
    let wk_q = maybe_quant_w(tape, wk_t, LinearSlot::K);

    let wv_c = tape.col_scale(wv0, t.c_a);
    let wv_t = absorb(tape, wv_c, t.attn_p1_inv, t.attn_p2_inv);
    let wv_t = row_unscale(tape, wv_t, t.c_o);
    let wv_q = maybe_quant_w(tape, wv_t, LinearSlot::V);

    let wo_c = tape.col_scale(wo0, t.c_o);
    let wo_t = absorb(tape, wo_c, t.o_mix_inv, t.v_head_inv);
    let wo_q = maybe_quant_w(tape, wo_t, LinearSlot::O);

    let wg_c = tape.col_scale(wg0, t.c_ug);
    let wg_t = absorb(tape, wg_c, t.ffn_p1_inv, t.ffn_p2_inv);
    let wg_q = maybe_quant_w(tape, wg_t, LinearSlot::Gate);

    let wu_c = tape.col_scale(wu0, t.c_ug);
    let wu_t = absorb(tape, wu_c, t.ffn_p1_inv, t.ffn_p2_inv);
    let wu_t = row_unscale(tape, wu_t, t.c_d);
    let wu_q = maybe_quant_w(tape, wu_t, LinearSlot::Up);

    let wd_c = tape.col_scale(wd0, t.c_d);
    let wd_t = absorb(tape, wd_c, t.down_p1_inv, t.down_p2_inv);
    let wd_q = maybe_quant_w(tape, wd_t, LinearSlot::Down);

    let maybe_quant_a = |tape: &mut Tape, x: NodeId, slot: LinearSlot| -> NodeId {
        match &mode.activations {
            Some(spec) => {
                tape.quant(x, t.clip_a[slot as usize], spec.bits, QuantKind::SymPerRow, round)
            }
            None => x,
        }
    };
    let maybe_quant_kv = |tape: &mut Tape, x: NodeId, clip: NodeId| -> NodeId {
        match &mode.kv {
            Some(spec) => tape.quant(x, clip, spec.bits, QuantKind::AsymPerRow, round),
            None => x,
        }
    };

    // Effective norm weights with scaling merged.
    let norm_attn0 = tape.leaf_vec(&weights.norm_attn);
    let norm_ffn0 = tape.leaf_vec(&weights.norm_ffn);
    let c_a_inv = tape.recip(t.c_a);
    let c_ug_inv = tape.recip(t.c_ug);
    let norm_attn_eff = tape.mul_elem(norm_attn0, c_a_inv);
    let norm_ffn_eff = tape.mul_elem(norm_ffn0, c_ug_inv);

    // Attention.
    let x = tape.leaf(student_in.clone());
    let xn = tape.rmsnorm(x);
    let za = tape.col_scale(xn, norm_attn_eff);
    let za = tape.kron_apply(za, t.attn_p1, t.attn_p2);

    let q_in = maybe_quant_a(tape, za, LinearSlot::Q);
    let wq_qt = tape.transpose(wq_q);
    let q = tape.matmul(q_in, wq_qt);
    let k_in = maybe_quant_a(tape, za, LinearSlot::K);
    let wk_qt = tape.transpose(wk_q);
    let k = tape.matmul(k_in, wk_qt);
    let v_in = maybe_quant_a(tape, za, LinearSlot::V);
    let wv_qt = tape.transpose(wv_q);
    let v = tape.matmul(v_in, wv_qt);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.col_slice(q, h * hd, hd);
        let kh = tape.col_slice(k, h * hd, hd);
        let qh = tape.rope(qh);
        let kh = tape.rope(kh);
        let qh = tape.matmul(qh, t.k_head);
        let kh = tape.matmul(kh, t.k_head);
        let kh = maybe_quant_kv(tape, kh, t.clip_k);

        let vh = tape.col_slice(v, h * hd, hd);
        let vh = tape.matmul(vh, t.v_head);
        let vh = maybe_quant_kv(tape, vh, t.clip_v);

        let kht = tape.transpose(kh);
        let scores = tape.matmul(qh, kht);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_causal(scores);
        heads.push(tape.matmul(probs, vh));
    }
    let o = tape.col_concat(&heads);
    let i_hd = tape.leaf(Matrix::identity(hd));
    let o = tape.kron_apply(o, t.o_mix, i_hd);
    let o_in = maybe_quant_a(tape, o, LinearSlot::O);
    let wo_qt = tape.transpose(wo_q);
    let attn = tape.matmul(o_in, wo_qt);
    let h1 = tape.add(x, attn);

    // Feed-forward.
    let h1n = tape.rmsnorm(h1);
    let zf = tape.col_scale(h1n, norm_ffn_eff);
    let zf = tape.kron_apply(zf, t.ffn_p1, t.ffn_p2);
    let g_in = maybe_quant_a(tape, zf, LinearSlot::Gate);
    let wg_qt = tape.transpose(wg_q);
    let g_lin = tape.matmul(g_in, wg_qt);
    let gate = tape.silu(g_lin);
    let u_in = maybe_quant_a(tape, zf, LinearSlot::Up);
    let wu_qt = tape.transpose(wu_q);
    let up = tape.matmul(u_in, wu_qt);
    let d_in = tape.mul_elem(gate, up);
    let zd = tape.kron_apply(d_in, t.down_p1, t.down_p2);
    let d_q = maybe_quant_a(tape, zd, LinearSlot::Down);
    let wd_qt = tape.transpose(wd_q);
    let ffn = tape.matmul(d_q, wd_qt);
    let out = tape.add(h1, ffn);

    let loss = match teacher_out {
        Some(target) => {
            let target = tape.leaf(target.clone());
            let diff = tape.sub(out, target);
            Some(tape.frob_sq(diff))
        }
        None => None,
    };
    Ok((bound, out, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen;
    use crate::model::{block_forward, QuantMode, RealizedTransforms};

    /// The tape forward and the plain forward must agree to rounding noise
    /// on the same inputs, transforms, and mode.
    #[test]
    fn tape_forward_matches_model_forward() {
        let cfg = ModelConfig::default();
        let model = gen::random_model(&cfg, 31);
        let data = gen::synth_calibration_data(
            &cfg,
            &gen::GenConfig { samples: 1, seq_len: 12, ..Default::default() },
            32,
        )
        .unwrap();
        let set = gen::random_transform_set(&cfg, 33);

        for mode in [
            QuantMode::off(),
            QuantMode::w4(),
            QuantMode::kv4(cfg.head_dim()),
            QuantMode::w4a4kv4(cfg.head_dim()),
        ] {
            let params = ParamSet::from_set(&set, &mode, true, true, true);
            let mut tape = Tape::new(cfg.rope_base);
            let (_, out, _) = build_block_graph(
                &mut tape,
                &model.blocks[0],
                &cfg,
                &params,
                &mode,
                &data[0],
                None,
                Round::Ste,
            )
            .unwrap();

            // Plain path: realize the same set, with clip thresholds from
            // the same logits.
            let t = RealizedTransforms::from_set(&set, &cfg).unwrap();
            let want = block_forward(&data[0], &model.blocks[0], &cfg, Some(&t), &mode).unwrap();
            let got = tape.value(out);
            let err = got.max_abs_diff(&want);
            assert!(err < 1e-9, "mode {mode:?}: tape vs model forward differ by {err}");
        }
    }

    #[test]
    fn param_set_round_trips_through_to_set() {
        let cfg = ModelConfig::default();
        let set = gen::random_transform_set(&cfg, 35);
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let params = ParamSet::from_set(&set, &mode, true, true, true);
        let back = params.to_set(&cfg);
        assert_eq!(back.p_a, set.p_a);
        assert_eq!(back.p_o1, set.p_o1);
        assert_eq!(back.p_h, set.p_h);
        assert_eq!(back.p_v, set.p_v);
        assert_eq!(back.gamma_d, set.gamma_d);
        assert_eq!(back.clips, set.clips);
    }

    #[test]
    fn detached_parameters_are_reported_not_zeroed() {
        // A registered parameter the graph never consumes must surface as
        // an explicit error from the gradient path.
        let cfg = ModelConfig::default();
        let model = crate::gen::random_model(&cfg, 37);
        let data = crate::gen::synth_calibration_data(
            &cfg,
            &crate::gen::GenConfig { samples: 1, seq_len: 4, ..Default::default() },
            38,
        )
        .unwrap();
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let set = crate::gen::init_transform_set(&cfg, 39);
        let mut params = ParamSet::from_set(&set, &mode, true, true, true);
        params.defs.push(super::ParamDef {
            name: "orphan".into(),
            kind: super::ParamKind::Gamma,
            values: vec![0.0; 4],
        });
        let teacher = crate::model::block_forward(
            &data[0],
            &model.blocks[0],
            &cfg,
            None,
            &QuantMode::off(),
        )
        .unwrap();
        let mut tape = Tape::new(cfg.rope_base);
        let (bound, _, loss) = build_block_graph(
            &mut tape,
            &model.blocks[0],
            &cfg,
            &params,
            &mode,
            &data[0],
            Some(&teacher),
            Round::Ste,
        )
        .unwrap();
        let grads = tape.backward(loss.unwrap()).unwrap();
        let orphan_id = bound.0[params.defs.len() - 1];
        assert!(grads.get(orphan_id).is_none(), "orphan leaf should have no gradient");
        // The calibration loop surfaces this as Error::Detached.
        let named: Vec<&str> = params
            .defs
            .iter()
            .zip(bound.0.iter())
            .filter(|(_, id)| grads.get(**id).is_none())
            .map(|(d, _)| d.name.as_str())
            .collect();
        assert_eq!(named, vec!["orphan"]);
    }

    #[test]
    fn ablation_switches_shrink_the_param_set() {
        let cfg = ModelConfig::default();
        let set = gen::random_transform_set(&cfg, 36);
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let full = ParamSet::from_set(&set, &mode, true, true, true).defs.len();
        let no_clip = ParamSet::from_set(&set, &mode, true, true, false).defs.len();
        let lt_only = ParamSet::from_set(&set, &mode, true, false, false).defs.len();
        let none = ParamSet::from_set(&set, &mode, false, false, false).defs.len();
        assert!(full > no_clip && no_clip > lt_only && lt_only > none);
        assert_eq!(none, 0);

        // Weight-only mode registers no activation or cache clips.
        let w_only = ParamSet::from_set(&set, &QuantMode::w4(), true, true, true);
        assert!(w_only.defs.iter().any(|d| d.name.starts_with("clip_w")));
        assert!(!w_only.defs.iter().any(|d| d.name.starts_with("clip_a")));
        assert!(!w_only.defs.iter().any(|d| d.name == "clip_k"));
    }
}
