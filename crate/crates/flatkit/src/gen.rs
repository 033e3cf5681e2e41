//! Deterministic synthesis of tiny models, transform sets, and calibration
//! data with planted outlier channels and pivot tokens.
//!
//! Every artifact is a pure function of `(config, seed)`: sub-seeds are
//! derived per tensor with a splitmix step so that adding or reordering
//! tensors never shifts another tensor's stream.

use crate::error::Result;
use crate::linalg::{Matrix, SkewParam, SvdInvertible};
use crate::model::{plant_outliers, BlockTransformSet, BlockWeights, ModelConfig, TinyModel};
use crate::quant::clip_logit;
use crate::transforms::{FullTransform, KroneckerTransform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Synthetic-data knobs: how many sequences, how long, and which outlier
/// structure to plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub samples: usize,
    pub seq_len: usize,
    /// Channels whose magnitude is inflated in every sample.
    pub outlier_channels: Vec<usize>,
    pub outlier_ratio: f64,
    /// Scale the first token row of each sample by this factor, emulating
    /// pivot tokens; `None` disables it.
    pub pivot_ratio: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            seq_len: 64,
            outlier_channels: vec![3, 17, 42],
            outlier_ratio: 100.0,
            pivot_ratio: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.samples == 0 || self.seq_len == 0 {
            return Err(crate::Error::Config("samples and seq_len must be positive".into()));
        }
        if let Some(&c) = self.outlier_channels.iter().find(|&&c| c >= model.hidden) {
            return Err(crate::Error::Config(format!(
                "outlier channel {c} out of range for hidden width {}",
                model.hidden
            )));
        }
        if self.outlier_ratio <= 0.0 {
            return Err(crate::Error::Config("outlier ratio must be positive".into()));
        }
        if let Some(p) = self.pivot_ratio {
            if p <= 0.0 {
                return Err(crate::Error::Config("pivot ratio must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Derive an independent RNG stream from a base seed and a salt.
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    // splitmix64 finalizer on seed ^ golden-ratio-scaled salt
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("finite samples")
}

/// Random tiny model with fan-in-scaled Gaussian linear weights and
/// near-unit norm weights.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> TinyModel {
    let h = cfg.hidden;
    let hi = cfg.intermediate;
    let blocks = (0..cfg.layers)
        .map(|layer| {
            let salt = |k: u64| ((layer as u64) << 8) | k;
            let lin = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
                gaussian_matrix(rng, r, c, 1.0 / (c as f64).sqrt())
            };
            let norm = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let normal = Normal::new(0.0, 0.02).expect("positive std");
                (0..h).map(|_| 1.0 + normal.sample(rng)).collect()
            };
            BlockWeights {
                wq: lin(&mut derive_rng(seed, salt(0)), h, h),
                wk: lin(&mut derive_rng(seed, salt(1)), h, h),
                wv: lin(&mut derive_rng(seed, salt(2)), h, h),
                wo: lin(&mut derive_rng(seed, salt(3)), h, h),
                w_gate: lin(&mut derive_rng(seed, salt(4)), hi, h),
                w_up: lin(&mut derive_rng(seed, salt(5)), hi, h),
                w_down: lin(&mut derive_rng(seed, salt(6)), h, hi),
                norm_attn: norm(&mut derive_rng(seed, salt(7))),
                norm_ffn: norm(&mut derive_rng(seed, salt(8))),
            }
        })
        .collect();
    TinyModel { config: *cfg, blocks }
}

/// Random invertible SVD-form matrix: skew entries uniform in `(-amp, amp)`,
/// log-singular-values uniform in `(-amp/2, amp/2)`.
pub fn random_svd_invertible(n: usize, seed: u64, amp: f64) -> SvdInvertible {
    let mut rng = derive_rng(seed, 0x5fd1);
    let k = n * (n - 1) / 2;
    SvdInvertible::new(
        SkewParam::new(n, (0..k).map(|_| rng.gen_range(-amp..amp)).collect()).expect("sized"),
        SkewParam::new(n, (0..k).map(|_| rng.gen_range(-amp..amp)).collect()).expect("sized"),
        (0..n).map(|_| rng.gen_range(-amp / 2.0..amp / 2.0)).collect(),
    )
    .expect("matching dims")
}

/// A well-conditioned random transform set exercising every insertion
/// point, for equivalence tests.
pub fn random_transform_set(cfg: &ModelConfig, seed: u64) -> BlockTransformSet {
    let (a1, a2) = cfg.hidden_split();
    let (d1, d2) = cfg.intermediate_split();
    let mut rng = derive_rng(seed, 0xbead);
    let amp = 0.8;
    let mut set = BlockTransformSet::identity(cfg);
    set.p_a = KroneckerTransform {
        p1: random_svd_invertible(a1, rng.gen(), amp),
        p2: random_svd_invertible(a2, rng.gen(), amp),
    };
    set.p_o1 = random_svd_invertible(cfg.heads, rng.gen(), amp);
    set.p_h = {
        let k = cfg.head_dim() * (cfg.head_dim() - 1) / 2;
        SkewParam::new(cfg.head_dim(), (0..k).map(|_| rng.gen_range(-amp..amp)).collect())
            .expect("sized")
    };
    set.p_v = FullTransform { p: random_svd_invertible(cfg.head_dim(), rng.gen(), amp) };
    set.p_ug = KroneckerTransform {
        p1: random_svd_invertible(a1, rng.gen(), amp),
        p2: random_svd_invertible(a2, rng.gen(), amp),
    };
    set.p_d = KroneckerTransform {
        p1: random_svd_invertible(d1, rng.gen(), amp),
        p2: random_svd_invertible(d2, rng.gen(), amp),
    };
    set.gamma_a = (0..cfg.hidden).map(|_| rng.gen_range(-0.3..0.3)).collect();
    set.gamma_o = (0..cfg.hidden).map(|_| rng.gen_range(-0.3..0.3)).collect();
    set.gamma_ug = (0..cfg.hidden).map(|_| rng.gen_range(-0.3..0.3)).collect();
    set.gamma_d = (0..cfg.intermediate).map(|_| rng.gen_range(-0.3..0.3)).collect();
    set
}

/// Calibration-time initialization: random near-identity transforms
/// (skew entries ~ N(0, 0.01), unit singular values), unit scales, and
/// clip thresholds starting at 0.9. Near-identity keeps the epoch-0 loss
/// equal to the untransformed quantization loss.
pub fn init_transform_set(cfg: &ModelConfig, seed: u64) -> BlockTransformSet {
    let (a1, a2) = cfg.hidden_split();
    let (d1, d2) = cfg.intermediate_split();
    let near = |n: usize, salt: u64| -> SvdInvertible {
        let mut rng = derive_rng(seed, salt);
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        let k = n * (n - 1) / 2;
        SvdInvertible::new(
            SkewParam::new(n, (0..k).map(|_| normal.sample(&mut rng)).collect()).expect("sized"),
            SkewParam::new(n, (0..k).map(|_| normal.sample(&mut rng)).collect()).expect("sized"),
            vec![0.0; n],
        )
        .expect("matching dims")
    };
    let mut set = BlockTransformSet::identity(cfg);
    set.p_a = KroneckerTransform { p1: near(a1, 1), p2: near(a2, 2) };
    set.p_o1 = near(cfg.heads, 3);
    set.p_h = {
        let mut rng = derive_rng(seed, 4);
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        let k = cfg.head_dim() * (cfg.head_dim() - 1) / 2;
        SkewParam::new(cfg.head_dim(), (0..k).map(|_| normal.sample(&mut rng)).collect())
            .expect("sized")
    };
    set.p_v = FullTransform { p: near(cfg.head_dim(), 5) };
    set.p_ug = KroneckerTransform { p1: near(a1, 6), p2: near(a2, 7) };
    set.p_d = KroneckerTransform { p1: near(d1, 8), p2: near(d2, 9) };
    let l = clip_logit(0.9);
    for c in set.clips.linears.iter_mut() {
        *c = crate::quant::ClipParam::new(l, l);
    }
    set.clips.k_cache = l;
    set.clips.v_cache = l;
    set
}

/// Synthesize hidden-state calibration sequences with planted outliers.
pub fn synth_calibration_data(
    model_cfg: &ModelConfig,
    gen_cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<Matrix>> {
    gen_cfg.validate(model_cfg)?;
    (0..gen_cfg.samples)
        .map(|i| {
            let mut rng = derive_rng(seed, 0xda7a_0000 | i as u64);
            let x = gaussian_matrix(&mut rng, gen_cfg.seq_len, model_cfg.hidden, 1.0);
            plant_outliers(
                &x,
                &gen_cfg.outlier_channels,
                gen_cfg.outlier_ratio,
                gen_cfg.pivot_ratio,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{channel_magnitudes, Axis};

    #[test]
    fn generation_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = random_model(&cfg, 7);
        let b = random_model(&cfg, 7);
        assert_eq!(a.blocks[0].wq, b.blocks[0].wq);
        assert_eq!(a.blocks[1].norm_ffn, b.blocks[1].norm_ffn);

        let c = random_model(&cfg, 8);
        assert_ne!(a.blocks[0].wq, c.blocks[0].wq);
    }

    #[test]
    fn planted_channels_rank_top_k() {
        let cfg = ModelConfig::default();
        let gen_cfg = GenConfig::default();
        let data = synth_calibration_data(&cfg, &gen_cfg, 11).unwrap();
        assert_eq!(data.len(), gen_cfg.samples);
        for sample in &data {
            let mags = channel_magnitudes(sample, Axis::Columns);
            let mut ranked: Vec<usize> = (0..mags.len()).collect();
            ranked.sort_by(|&a, &b| mags[b].partial_cmp(&mags[a]).unwrap());
            let top: std::collections::HashSet<usize> =
                ranked[..gen_cfg.outlier_channels.len()].iter().copied().collect();
            for ch in &gen_cfg.outlier_channels {
                assert!(top.contains(ch), "channel {ch} not in top-k by magnitude");
            }
        }
    }

    #[test]
    fn rejects_out_of_range_outlier_channel() {
        let cfg = ModelConfig::default();
        let gen_cfg = GenConfig { outlier_channels: vec![cfg.hidden], ..GenConfig::default() };
        assert!(synth_calibration_data(&cfg, &gen_cfg, 1).is_err());
    }
}
