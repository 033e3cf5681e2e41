//! Block-wise gradient calibration of the transform parameters.
//!
//! For each transformer block in order, minimizes the squared Frobenius
//! distance between the full-precision block output and the quantized,
//! transformed block output over the calibration data, training
//! `{P, c, alpha_w, alpha_a}` with AdamW under a cosine-to-zero learning
//! rate schedule. Rounding gradients use the straight-through rule; the
//! smooth surrogate in [`tape`] exists for gradient verification.
//!
//! Determinism: with a fixed seed, batching order, accumulation order, and
//! every parameter update are identical across runs; batch members may be
//! evaluated in parallel because their results are reduced in index order.
//!
//! The tape runs entirely in `f64`. Mixed-precision training (half-width
//! tensors with a closed-form inverse keeping `P * P^{-1}` tight enough to
//! tolerate it) is a known cost optimization at larger scales, but at desk
//! scale it buys nothing, so reduced precision is deliberately not a code
//! path here.

pub mod graph;
pub mod tape;

pub use graph::{ParamDef, ParamKind, ParamSet};
pub use tape::{Gradients, NodeId, QuantKind, Round, Tape};

use crate::error::{Error, Result};
use crate::gen::{derive_rng, init_transform_set};
use crate::linalg::Matrix;
use crate::model::{
    block_forward, forward_hidden_states, site_activations, BlockTransformSet, BlockWeights,
    ModelConfig, QuantMode, RealizedTransforms, TinyModel,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Calibration hyperparameters. The learning-rate schedule is cosine decay
/// to zero over all steps; `lt`/`ps`/`lct` are the ablation switches for
/// the learnable transforms, per-channel scaling, and learnable clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub epochs: usize,
    pub lr_transforms: f64,
    pub lr_clip: f64,
    pub batch: usize,
    /// How many calibration sequences the generator synthesizes.
    pub samples: usize,
    pub seed: u64,
    pub lt: bool,
    pub ps: bool,
    pub lct: bool,
    /// Feed each block's student path with the quantized outputs of the
    /// already-calibrated prefix instead of the shared full-precision
    /// hidden states.
    pub propagate_quantized_inputs: bool,
    /// Symmetric clamp on the log-singular-values after each step, keeping
    /// realized transforms well-conditioned.
    pub log_sigma_clamp: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr_transforms: 5e-3,
            lr_clip: 5e-2,
            batch: 4,
            samples: 32,
            seed: 0,
            lt: true,
            ps: true,
            lct: true,
            propagate_quantized_inputs: false,
            log_sigma_clamp: 3.0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_transforms <= 0.0 || self.lr_clip <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if self.log_sigma_clamp <= 0.0 {
            return Err(Error::Config("log_sigma clamp must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the calibration trace: epoch-mean loss and the block's
/// flatness sum (transformed linear inputs) at the end of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block: usize,
    pub epoch: usize,
    pub loss: f64,
    pub flatness: f64,
}

/// Result of calibrating one block.
#[derive(Debug, Clone)]
pub struct BlockCalibration {
    pub set: BlockTransformSet,
    pub trace: Vec<TraceRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Result of calibrating a whole model.
#[derive(Debug, Clone)]
pub struct ModelCalibration {
    pub sets: Vec<BlockTransformSet>,
    pub trace: Vec<TraceRow>,
    /// Per block: mean squared difference between the student input and
    /// the teacher input (zero unless quantized propagation is on).
    pub student_input_mse: Vec<f64>,
}

/// Squared Frobenius norm of the output difference (the per-sample
/// training objective).
pub fn block_loss(teacher_out: &Matrix, student_out: &Matrix) -> Result<f64> {
    let d = student_out.sub(teacher_out)?;
    Ok(d.fro_norm().powi(2))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ParamSet) -> Self {
        let shapes: Vec<usize> = params.defs.iter().map(|d| d.values.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One AdamW step (weight decay zero: the block objective is the whole
    /// loss). `lr_factor` is the cosine-schedule multiplier.
    fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], cfg: &CalibConfig, lr_factor: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, def) in params.defs.iter_mut().enumerate() {
            let lr = match def.kind {
                ParamKind::ClipLogit => cfg.lr_clip,
                _ => cfg.lr_transforms,
            } * lr_factor;
            for (j, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                def.values[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
            if def.kind == ParamKind::LogSigma {
                for v in def.values.iter_mut() {
                    *v = v.clamp(-cfg.log_sigma_clamp, cfg.log_sigma_clamp);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Block calibration
// ---------------------------------------------------------------------------

/// Evaluate the training loss of one sample through the tape graph.
fn sample_loss(
    weights: &BlockWeights,
    cfg: &ModelConfig,
    params: &ParamSet,
    mode: &QuantMode,
    student_in: &Matrix,
    teacher_out: &Matrix,
) -> Result<f64> {
    let mut tape = Tape::new(cfg.rope_base);
    let (_, _, loss) = graph::build_block_graph(
        &mut tape,
        weights,
        cfg,
        params,
        mode,
        student_in,
        Some(teacher_out),
        Round::Ste,
    )?;
    Ok(tape.value(loss.expect("teacher given")).get(0, 0))
}

/// Forward + backward of one sample; returns (loss, per-parameter grads).
fn sample_grads(
    weights: &BlockWeights,
    cfg: &ModelConfig,
    params: &ParamSet,
    mode: &QuantMode,
    student_in: &Matrix,
    teacher_out: &Matrix,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new(cfg.rope_base);
    let (bound, _, loss) = graph::build_block_graph(
        &mut tape,
        weights,
        cfg,
        params,
        mode,
        student_in,
        Some(teacher_out),
        Round::Ste,
    )?;
    let loss = loss.expect("teacher given");
    let loss_value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(bound.0.len());
    for (def, id) in params.defs.iter().zip(bound.0.iter()) {
        match grads.get(*id) {
            Some(g) => out.push(g.as_slice().to_vec()),
            None => {
                return Err(Error::Detached(vec![def.name.clone()]));
            }
        }
    }
    Ok((loss_value, out))
}

fn mean_loss(
    weights: &BlockWeights,
    cfg: &ModelConfig,
    params: &ParamSet,
    mode: &QuantMode,
    student_in: &[Matrix],
    teacher_out: &[Matrix],
) -> Result<f64> {
    let losses: Vec<Result<f64>> = student_in
        .par_iter()
        .zip(teacher_out.par_iter())
        .map(|(x, t)| sample_loss(weights, cfg, params, mode, x, t))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / student_in.len() as f64)
}

/// Flatness sum of the four transformed linear-input sites on a probe
/// sample, with the current parameters.
fn block_flatness(
    weights: &BlockWeights,
    cfg: &ModelConfig,
    set: &BlockTransformSet,
    probe: &Matrix,
) -> Result<f64> {
    let t = RealizedTransforms::from_set(set, cfg)?;
    let sites = site_activations(weights, cfg, &t, probe)?;
    Ok(sites
        .iter()
        .map(|s| {
            crate::analysis::flatness(&crate::analysis::channel_magnitudes(
                s,
                crate::analysis::Axis::Columns,
            ))
        })
        .sum())
}

/// Calibrate one block against explicit teacher/student input streams.
///
/// `data_teacher[i]` feeds the frozen full-precision block; the student
/// path sees `data_student[i]`. The public entry points pass the same
/// tensors for both unless quantized propagation is requested.
#[allow(clippy::too_many_arguments)]
fn calibrate_block_inner(
    weights: &BlockWeights,
    model_cfg: &ModelConfig,
    data_teacher: &[Matrix],
    data_student: &[Matrix],
    mode: &QuantMode,
    cfg: &CalibConfig,
    block_index: usize,
) -> Result<BlockCalibration> {
    cfg.validate()?;
    if data_teacher.is_empty() || data_teacher.len() != data_student.len() {
        return Err(Error::InvalidArg("calibration needs matching non-empty data".into()));
    }

    // Frozen teacher outputs.
    let teacher_out: Vec<Matrix> = data_teacher
        .par_iter()
        .map(|x| block_forward(x, weights, model_cfg, None, &QuantMode::off()))
        .collect::<Result<Vec<_>>>()?;

    let init = init_transform_set(model_cfg, cfg.seed ^ (block_index as u64).wrapping_mul(0x9e37));
    let mut params = ParamSet::from_set(&init, mode, cfg.lt, cfg.ps, cfg.lct);

    let initial_loss = mean_loss(weights, model_cfg, &params, mode, data_student, &teacher_out)?;
    let mut trace = Vec::with_capacity(cfg.epochs);

    if cfg.epochs == 0 || params.defs.is_empty() {
        // Nothing to train: hand back the initialization (and its loss).
        let set = params.to_set(model_cfg);
        return Ok(BlockCalibration {
            trace,
            initial_loss,
            final_loss: initial_loss,
            set,
        });
    }

    let steps_per_epoch = data_student.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(&params);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data_student.len()).collect();
        let mut rng = derive_rng(cfg.seed, 0xe90c_0000 | epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = chunk
                .par_iter()
                .map(|&i| {
                    sample_grads(weights, model_cfg, &params, mode, &data_student[i], &teacher_out[i])
                })
                .collect();
            // Reduce in index order for determinism.
            let mut grad_sum: Vec<Vec<f64>> =
                params.defs.iter().map(|d| vec![0.0; d.values.len()]).collect();
            let mut batch_loss = 0.0;
            let mut n = 0usize;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (acc, gi) in grad_sum.iter_mut().zip(g.iter()) {
                    for (a, b) in acc.iter_mut().zip(gi.iter()) {
                        *a += b;
                    }
                }
                n += 1;
            }
            let inv = 1.0 / n as f64;
            for acc in grad_sum.iter_mut() {
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
            epoch_loss += batch_loss;
            epoch_count += n;

            let lr_factor =
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            adam.step(&mut params, &grad_sum, cfg, lr_factor);
            step += 1;
            if let Some(def) = params.defs.iter().find(|d| d.values.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Numerical(format!(
                    "parameter '{}' became non-finite at step {step} of epoch {epoch};                      the learning rate is likely too large",
                    def.name
                )));
            }
        }

        let mean_epoch_loss = epoch_loss / epoch_count as f64;
        if !mean_epoch_loss.is_finite()
            || (mean_epoch_loss > 10.0 * initial_loss && initial_loss > 0.0)
        {
            return Err(Error::Diverged {
                epoch,
                loss: mean_epoch_loss,
                initial: initial_loss,
            });
        }
        let set_now = params.to_set(model_cfg);
        let flat = block_flatness(weights, model_cfg, &set_now, &data_student[0])?;
        trace.push(TraceRow { block: block_index, epoch, loss: mean_epoch_loss, flatness: flat });
    }

    let final_loss = mean_loss(weights, model_cfg, &params, mode, data_student, &teacher_out)?;
    Ok(BlockCalibration {
        set: params.to_set(model_cfg),
        trace,
        initial_loss,
        final_loss,
    })
}

/// Calibrate one block: teacher and student both read `data`.
pub fn calibrate_block(
    weights: &BlockWeights,
    model_cfg: &ModelConfig,
    data: &[Matrix],
    mode: &QuantMode,
    cfg: &CalibConfig,
    block_index: usize,
) -> Result<BlockCalibration> {
    calibrate_block_inner(weights, model_cfg, data, data, mode, cfg, block_index)
}

/// Calibrate every block in order. Teacher inputs are always the
/// full-precision hidden states; student inputs follow them unless
/// `propagate_quantized_inputs` is set, in which case each block's student
/// input is the quantized output of the already-calibrated prefix.
pub fn calibrate_model(
    model: &TinyModel,
    data: &[Matrix],
    mode: &QuantMode,
    cfg: &CalibConfig,
) -> Result<ModelCalibration> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArg("calibration needs at least one sample".into()));
    }
    let mcfg = &model.config;

    // Teacher hidden states after each block, per sample.
    let teacher_states: Vec<Vec<Matrix>> = data
        .par_iter()
        .map(|x| forward_hidden_states(model, x, None, &QuantMode::off()))
        .collect::<Result<Vec<_>>>()?;

    let teacher_input = |layer: usize, sample: usize| -> &Matrix {
        if layer == 0 {
            &data[sample]
        } else {
            &teacher_states[sample][layer - 1]
        }
    };

    let mut student_inputs: Vec<Matrix> = data.to_vec();
    let mut sets = Vec::with_capacity(model.blocks.len());
    let mut trace = Vec::new();
    let mut student_input_mse = Vec::with_capacity(model.blocks.len());

    for (l, block) in model.blocks.iter().enumerate() {
        let teacher_ins: Vec<Matrix> =
            (0..data.len()).map(|i| teacher_input(l, i).clone()).collect();
        let mse = {
            let mut acc = 0.0;
            for (s, t) in student_inputs.iter().zip(teacher_ins.iter()) {
                let d = s.sub(t)?;
                acc += d.fro_norm().powi(2) / (d.rows() * d.cols()) as f64;
            }
            acc / data.len() as f64
        };
        student_input_mse.push(mse);

        let result = calibrate_block_inner(
            block,
            mcfg,
            &teacher_ins,
            &student_inputs,
            mode,
            cfg,
            l,
        )?;
        trace.extend(result.trace.iter().cloned());

        if cfg.propagate_quantized_inputs {
            let t = RealizedTransforms::from_set(&result.set, mcfg)?;
            student_inputs = student_inputs
                .par_iter()
                .map(|x| block_forward(x, block, mcfg, Some(&t), mode))
                .collect::<Result<Vec<_>>>()?;
        } else {
            student_inputs = (0..data.len()).map(|i| teacher_input(l + 1, i).clone()).collect();
        }
        sets.push(result.set);
    }
    Ok(ModelCalibration { sets, trace, student_input_mse })
}

/// GPTQ applied after transform learning: quantize the absorbed
/// (transformed) weights of one block against the transformed calibration
/// activations of each linear-input site. Returns the seven outputs in
/// slot order (q, k, v, o, gate, up, down).
pub fn gptq_absorbed_weights(
    weights: &BlockWeights,
    model_cfg: &ModelConfig,
    set: &BlockTransformSet,
    data: &[Matrix],
    spec: &crate::quant::QuantSpec,
) -> Result<Vec<crate::quant::GptqOutput>> {
    use crate::linalg::Matrix as M;
    if data.is_empty() {
        return Err(Error::InvalidArg("gptq needs calibration samples".into()));
    }
    let t = RealizedTransforms::from_set(set, model_cfg)?;
    let pb = crate::model::prepare_block(weights, model_cfg, &t, &QuantMode::off())?;
    let absorbed = pb.absorbed_weights();

    // Stack the per-site transformed activations across samples.
    let mut sites: [Vec<M>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for x in data {
        let s = site_activations(weights, model_cfg, &t, x)?;
        for (acc, m) in sites.iter_mut().zip(s) {
            acc.push(m);
        }
    }
    let stack = |parts: &[M]| -> Result<M> {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = M::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            for r in 0..p.rows() {
                out.row_mut(at).copy_from_slice(p.row(r));
                at += 1;
            }
        }
        Ok(out)
    };
    let x_attn = stack(&sites[0])?;
    let x_o = stack(&sites[1])?;
    let x_ffn = stack(&sites[2])?;
    let x_down = stack(&sites[3])?;
    let calib_for = [&x_attn, &x_attn, &x_attn, &x_o, &x_ffn, &x_ffn, &x_down];

    absorbed
        .iter()
        .zip(calib_for.iter())
        .map(|(w, x)| crate::quant::gptq_quantize(w, x, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen;
    use crate::model::TransformVariant;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            intermediate: 32,
            heads: 2,
            layers: 2,
            vocab: 32,
            rope_base: 10000.0,
        }
    }

    fn tiny_data(cfg: &ModelConfig, samples: usize, seed: u64) -> Vec<Matrix> {
        gen::synth_calibration_data(
            cfg,
            &gen::GenConfig {
                samples,
                seq_len: 12,
                outlier_channels: vec![1, 7],
                outlier_ratio: 80.0,
                pivot_ratio: Some(10.0),
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn block_loss_examples() {
        let a = Matrix::zeros(2, 3);
        assert_eq!(block_loss(&a, &a).unwrap(), 0.0);
        assert!(block_loss(&a, &Matrix::zeros(3, 2)).is_err());

        let b = Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap();
        assert!((block_loss(&a, &b).unwrap() - 6.0).abs() < 1e-15);

        // Random pair against a naive elementwise-sum oracle.
        let mut rng = gen::derive_rng(3, 4);
        use rand::Rng;
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let y = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let oracle: f64 = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| (x.get(r, c) - y.get(r, c)).powi(2))
            .sum();
        assert!((block_loss(&y, &x).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 41);
        let data = tiny_data(&cfg, 4, 42);
        let calib = CalibConfig { epochs: 0, ..Default::default() };
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let out = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.initial_loss, out.final_loss);
        let init = gen::init_transform_set(&cfg, calib.seed);
        assert_eq!(out.set.p_a, init.p_a);
        assert_eq!(out.set.gamma_a, init.gamma_a);
    }

    #[test]
    fn calibration_reduces_loss_on_outlier_block() {
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 43);
        let data = tiny_data(&cfg, 8, 44);
        let calib = CalibConfig { epochs: 10, samples: 8, ..Default::default() };
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let out = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
        assert!(
            out.final_loss < out.initial_loss,
            "loss did not improve: {} -> {}",
            out.initial_loss,
            out.final_loss
        );
        assert_eq!(out.trace.len(), 10);
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let cfg = ModelConfig {
            hidden: 16,
            intermediate: 32,
            heads: 2,
            layers: 1,
            vocab: 16,
            rope_base: 10000.0,
        };
        let model = gen::random_model(&cfg, 1);
        let data = tiny_data(&cfg, 4, 2);
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let calib = CalibConfig { epochs: 6, lr_transforms: 1.5, lr_clip: 1.5, ..Default::default() };
        let err = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0);
        assert!(
            matches!(err, Err(Error::Diverged { .. })),
            "expected a divergence abort, got {err:?}"
        );
    }

    #[test]
    fn fixed_seed_reproduces_traces_bitwise() {
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 45);
        let data = tiny_data(&cfg, 6, 46);
        let calib = CalibConfig { epochs: 3, ..Default::default() };
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let a = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
        let b = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.set, b.set);
    }

    #[test]
    fn one_block_model_reduces_to_calibrate_block() {
        let cfg = ModelConfig { layers: 1, ..tiny_cfg() };
        let model = gen::random_model(&cfg, 47);
        let data = tiny_data(&cfg, 4, 48);
        let calib = CalibConfig { epochs: 2, ..Default::default() };
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let whole = calibrate_model(&model, &data, &mode, &calib).unwrap();
        let single = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
        assert_eq!(whole.sets[0], single.set);
        assert_eq!(whole.trace, single.trace);
    }

    #[test]
    fn propagation_mode_changes_student_inputs() {
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 49);
        let data = tiny_data(&cfg, 4, 50);
        let mode = QuantMode::w4a4kv4(cfg.head_dim());

        let shared = CalibConfig { epochs: 1, ..Default::default() };
        let out = calibrate_model(&model, &data, &mode, &shared).unwrap();
        assert_eq!(out.student_input_mse[0], 0.0);
        assert_eq!(out.student_input_mse[1], 0.0);

        let prop = CalibConfig { epochs: 1, propagate_quantized_inputs: true, ..Default::default() };
        let out = calibrate_model(&model, &data, &mode, &prop).unwrap();
        assert_eq!(out.student_input_mse[0], 0.0);
        assert!(
            out.student_input_mse[1] > 0.0,
            "propagated student input identical to teacher input"
        );
    }

    #[test]
    fn full_block_soft_surrogate_gradients_match_finite_differences() {
        // End-to-end gradient check through the whole block graph with the
        // smooth rounding surrogate, including clip logits.
        let cfg = ModelConfig {
            hidden: 8,
            intermediate: 16,
            heads: 2,
            layers: 1,
            vocab: 16,
            rope_base: 10000.0,
        };
        let model = gen::random_model(&cfg, 51);
        let data = gen::synth_calibration_data(
            &cfg,
            &gen::GenConfig {
                samples: 1,
                seq_len: 5,
                outlier_channels: vec![2],
                outlier_ratio: 10.0,
                pivot_ratio: None,
            },
            52,
        )
        .unwrap();
        let teacher = block_forward(&data[0], &model.blocks[0], &cfg, None, &QuantMode::off()).unwrap();
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let set = gen::init_transform_set(&cfg, 53);
        let params = ParamSet::from_set(&set, &mode, true, true, true);

        let eval = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new(cfg.rope_base);
            let (_, _, loss) = graph::build_block_graph(
                &mut tape,
                &model.blocks[0],
                &cfg,
                p,
                &mode,
                &data[0],
                Some(&teacher),
                Round::Soft(0.7),
            )
            .unwrap();
            tape.value(loss.unwrap()).get(0, 0)
        };

        let mut tape = Tape::new(cfg.rope_base);
        let (bound, _, loss) = graph::build_block_graph(
            &mut tape,
            &model.blocks[0],
            &cfg,
            &params,
            &mode,
            &data[0],
            Some(&teacher),
            Round::Soft(0.7),
        )
        .unwrap();
        let grads = tape.backward(loss.unwrap()).unwrap();

        // Spot-check a spread of parameters across every kind.
        let mut checked = 0;
        for (pi, def) in params.defs.iter().enumerate() {
            let probe_idx = [0usize, def.values.len() / 2];
            for &j in probe_idx.iter().take(if def.values.len() > 1 { 2 } else { 1 }) {
                let analytic = grads.get(bound.0[pi]).map_or(0.0, |g| g.get(0, j));
                let h = 1e-5 * (1.0 + def.values[j].abs());
                let mut plus = params.clone();
                plus.defs[pi].values[j] += h;
                let mut minus = params.clone();
                minus.defs[pi].values[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "{} [{j}]: analytic {analytic} vs fd {fd}",
                    def.name
                );
                checked += 1;
            }
        }
        assert!(checked > 40, "only {checked} parameters checked");
    }

    #[test]
    fn ablation_arms_order_mean_final_losses() {
        // Mean final loss over seeds: LT+PS+LCT <= LT+PS <= LT <= identity.
        // (The acceptance suite runs the full 20-seed version; this is the
        // smaller smoke check at the same scale.)
        let cfg = ModelConfig {
            hidden: 32,
            intermediate: 64,
            heads: 2,
            layers: 2,
            vocab: 32,
            rope_base: 10000.0,
        };
        let seeds = 4;
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let mut means = [0.0f64; 4];
        for seed in 0..seeds {
            let model = gen::random_model(&cfg, 600 + seed);
            let data = gen::synth_calibration_data(
                &cfg,
                &gen::GenConfig {
                    samples: 16,
                    seq_len: 16,
                    outlier_channels: vec![1, 7, 29],
                    outlier_ratio: 100.0,
                    pivot_ratio: Some(10.0),
                },
                700 + seed,
            )
            .unwrap();
            let arms = [
                (true, true, true),
                (true, true, false),
                (true, false, false),
                (false, false, false),
            ];
            for (i, (lt, ps, lct)) in arms.iter().enumerate() {
                let calib = CalibConfig {
                    epochs: 15,
                    lt: *lt,
                    ps: *ps,
                    lct: *lct,
                    seed,
                    ..Default::default()
                };
                let out =
                    calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();
                means[i] += out.final_loss / seeds as f64;
            }
        }
        assert!(
            means[0] <= means[1] * 1.05 && means[1] <= means[2] * 1.05 && means[2] <= means[3],
            "ablation means out of order: {means:?}"
        );
    }

    #[test]
    fn flatness_traces_descend_with_learnable_transforms() {
        let cfg = tiny_cfg();
        let mut improved = 0;
        let seeds = 10;
        for seed in 0..seeds {
            let model = gen::random_model(&cfg, 800 + seed);
            let data = tiny_data(&cfg, 8, 900 + seed);
            let calib = CalibConfig { epochs: 10, seed, ..Default::default() };
            let mode = QuantMode::w4a4kv4(cfg.head_dim());
            let out = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();

            let init = gen::init_transform_set(&cfg, calib.seed);
            let before =
                block_flatness(&model.blocks[0], &cfg, &init, &data[0]).unwrap();
            let after = out.trace.last().unwrap().flatness;
            if after < before {
                improved += 1;
            }
        }
        assert!(improved * 10 >= seeds * 9, "flatness improved on {improved}/{seeds} seeds");
    }

    #[test]
    fn gptq_on_absorbed_weights_dominates_rtn() {
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 63);
        let data = tiny_data(&cfg, 4, 64);
        let calib = CalibConfig { epochs: 3, ..Default::default() };
        let mode = QuantMode::w4a4kv4(cfg.head_dim());
        let out = calibrate_block(&model.blocks[0], &cfg, &data, &mode, &calib, 0).unwrap();

        let spec = crate::quant::QuantSpec::weight_sym(4);
        let gptq = gptq_absorbed_weights(&model.blocks[0], &cfg, &out.set, &data, &spec).unwrap();
        assert_eq!(gptq.len(), 7);

        // Compare against RTN on the same absorbed weights and the same
        // transformed calibration activations.
        let t = RealizedTransforms::from_set(&out.set, &cfg).unwrap();
        let pb = crate::model::prepare_block(&model.blocks[0], &cfg, &t, &QuantMode::off()).unwrap();
        let absorbed = pb.absorbed_weights();
        let sites = site_activations(&model.blocks[0], &cfg, &t, &data[0]).unwrap();
        let calib_for = [&sites[0], &sites[0], &sites[0], &sites[1], &sites[2], &sites[2], &sites[3]];
        for (i, g) in gptq.iter().enumerate() {
            let rtn = crate::quant::rtn_quantize(absorbed[i], &spec).unwrap();
            let x = calib_for[i];
            let lg = x
                .matmul(&g.dequantized.transpose())
                .unwrap()
                .sub(&x.matmul(&absorbed[i].transpose()).unwrap())
                .unwrap()
                .fro_norm()
                .powi(2);
            let lr = x
                .matmul(&rtn.dequantized.transpose())
                .unwrap()
                .sub(&x.matmul(&absorbed[i].transpose()).unwrap())
                .unwrap()
                .fro_norm()
                .powi(2);
            assert!(lg <= lr * 1.001 + 1e-12, "slot {i}: gptq {lg} vs rtn {lr}");
        }
    }

    #[test]
    fn scaling_variant_matches_smooth_scale_vectors() {
        // realize_variant(Scaling) must produce strictly positive scales.
        let cfg = tiny_cfg();
        let model = gen::random_model(&cfg, 61);
        let data = tiny_data(&cfg, 2, 62);
        let ts = crate::model::realize_variant(TransformVariant::Scaling, &model, &data, None)
            .unwrap();
        for t in &ts {
            assert!(t.c_a.iter().all(|&c| c > 0.0));
            assert!(t.c_d.iter().all(|&c| c > 0.0));
        }
    }
}
