//! A tiny LLaMA-like transformer: RMSNorm, RoPE multi-head attention, and a
//! SwiGLU feed-forward network, with all six pre-quantization transform
//! insertion points. Runs in full precision or fake-quantized, with
//! weights, activations, and the KV cache independently switchable.

mod forward;
mod sets;

pub use forward::{
    attach_kv_transforms, block_forward, forward_hidden_states, plant_outliers, prepare_block,
    site_activations, PreparedBlock, RMS_EPS,
};
pub use sets::{
    realize_variant, BlockClips, BlockTransformSet, LinearSlot, RealizedTransforms,
    TransformVariant, NUM_LINEARS,
};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::QuantSpec;
use crate::transforms::choose_decomposition;
use serde::{Deserialize, Serialize};

/// Architecture of the tiny transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: every width admits a clean power-of-two
    /// decomposition (64 -> 8x8, 128 -> 8x16) and the head layout is
    /// Hadamard-compatible.
    fn default() -> Self {
        Self { hidden: 64, intermediate: 128, heads: 4, layers: 2, vocab: 256, rope_base: 10000.0 }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.intermediate == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.rope_base <= 1.0 {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    /// Decomposition used for the attention-input and FFN-input transforms.
    pub fn hidden_split(&self) -> (usize, usize) {
        let d = choose_decomposition(self.hidden);
        (d.n1, d.n2)
    }

    /// Decomposition used for the down-projection input transform.
    pub fn intermediate_split(&self) -> (usize, usize) {
        let d = choose_decomposition(self.intermediate);
        (d.n1, d.n2)
    }
}

/// Weights of one transformer block. Linear layers carry no bias; rows are
/// output channels (`y = x W^T`).
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub norm_attn: Vec<f64>,
    pub norm_ffn: Vec<f64>,
}

impl BlockWeights {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (h, hi) = (cfg.hidden, cfg.intermediate);
        let shapes = [
            ("wq", &self.wq, h, h),
            ("wk", &self.wk, h, h),
            ("wv", &self.wv, h, h),
            ("wo", &self.wo, h, h),
            ("w_gate", &self.w_gate, hi, h),
            ("w_up", &self.w_up, hi, h),
            ("w_down", &self.w_down, h, hi),
        ];
        for (name, m, r, c) in shapes {
            if m.rows() != r || m.cols() != c {
                return Err(Error::Dim(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.norm_attn.len() != h || self.norm_ffn.len() != h {
            return Err(Error::Dim("norm weights must match the hidden width".into()));
        }
        Ok(())
    }
}

/// The whole model: a stack of blocks. Calibration and evaluation consume
/// hidden-state tensors directly, so there is no embedding or LM head here;
/// `vocab` in the config only documents the nominal token space of the
/// synthetic data generator.
#[derive(Debug, Clone)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub blocks: Vec<BlockWeights>,
}

impl TinyModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.layers {
            return Err(Error::Dim(format!(
                "{} blocks for a {}-layer config",
                self.blocks.len(),
                self.config.layers
            )));
        }
        for b in &self.blocks {
            b.validate(&self.config)?;
        }
        Ok(())
    }
}

/// Which tensors get fake-quantized. Any subset may be enabled, giving
/// weight-only and KV-cache-only modes in addition to full W/A/KV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct QuantMode {
    pub weights: Option<QuantSpec>,
    pub activations: Option<QuantSpec>,
    pub kv: Option<QuantSpec>,
}

impl QuantMode {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn is_off(&self) -> bool {
        self.weights.is_none() && self.activations.is_none() && self.kv.is_none()
    }

    /// W4A4KV4: per-channel symmetric weights, per-token symmetric
    /// activations, group-wise asymmetric KV with head-dimension groups.
    pub fn w4a4kv4(head_dim: usize) -> Self {
        Self {
            weights: Some(QuantSpec::weight_sym(4)),
            activations: Some(QuantSpec::act_sym(4)),
            kv: Some(QuantSpec::kv_asym(4, head_dim)),
        }
    }

    /// Weight-only 4-bit quantization.
    pub fn w4() -> Self {
        Self { weights: Some(QuantSpec::weight_sym(4)), activations: None, kv: None }
    }

    /// KV-cache-only 4-bit quantization.
    pub fn kv4(head_dim: usize) -> Self {
        Self { weights: None, activations: None, kv: Some(QuantSpec::kv_asym(4, head_dim)) }
    }
}
