//! The JSON run configuration shared by every CLI command.
//!
//! One document carries the model architecture, data-synthesis knobs,
//! calibration hyperparameters, quantization mode, transform variant, and
//! the master seed. Unknown fields are rejected and every section is
//! validated with field-level messages before any computation starts.

use crate::calibrate::CalibConfig;
use crate::error::{Error, Result};
use crate::gen::GenConfig;
use crate::model::{ModelConfig, QuantMode, TransformVariant};
use crate::quant::QuantSpec;
use serde::{Deserialize, Serialize};

/// Quantization mode as written in configs and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    W4a4kv4,
    W4,
    Kv4,
    Off,
}

impl ModeName {
    pub fn to_mode(self, head_dim: usize) -> QuantMode {
        match self {
            ModeName::W4a4kv4 => QuantMode::w4a4kv4(head_dim),
            ModeName::W4 => QuantMode::w4(),
            ModeName::Kv4 => QuantMode::kv4(head_dim),
            ModeName::Off => QuantMode::off(),
        }
    }
}

impl std::str::FromStr for ModeName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w4a4kv4" => Ok(Self::W4a4kv4),
            "w4" => Ok(Self::W4),
            "kv4" => Ok(Self::Kv4),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected w4a4kv4|w4|kv4|off)"
            ))),
        }
    }
}

/// The complete, reproducible description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub calib: CalibConfig,
    pub mode: ModeName,
    pub transform: TransformVariant,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            gen: GenConfig::default(),
            calib: CalibConfig::default(),
            mode: ModeName::W4a4kv4,
            transform: TransformVariant::Flat,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.gen.validate(&self.model).map_err(|e| Error::Config(format!("gen: {e}")))?;
        self.calib.validate().map_err(|e| Error::Config(format!("calib: {e}")))?;
        self.quant_mode().validate_for(&self.model)?;
        Ok(())
    }

    pub fn quant_mode(&self) -> QuantMode {
        self.mode.to_mode(self.model.head_dim())
    }
}

/// Mode-level checks that need the model shape (KV group size must equal
/// the head dimension).
trait ValidateFor {
    fn validate_for(&self, model: &ModelConfig) -> Result<()>;
}

impl ValidateFor for QuantMode {
    fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        let check = |spec: &Option<QuantSpec>, what: &str| -> Result<()> {
            if let Some(s) = spec {
                s.validate().map_err(|e| Error::Config(format!("{what}: {e}")))?;
            }
            Ok(())
        };
        check(&self.weights, "weights")?;
        check(&self.activations, "activations")?;
        check(&self.kv, "kv")?;
        if let Some(kv) = &self.kv {
            if let crate::quant::Granularity::PerGroup(g) = kv.granularity {
                if g != model.head_dim() {
                    return Err(Error::Config(format!(
                        "kv group size {g} must equal the head dimension {}",
                        model.head_dim()
                    )));
                }
            }
        }
        Ok(())
    }
}
