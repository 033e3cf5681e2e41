//! Container (de)serialization of the concrete artifacts: models,
//! calibration data, and transform sets.
//!
//! One container format serves all three kinds; the manifest names below
//! are the stable on-disk schema. Parameters (not realized matrices) are
//! what transform containers carry, so invertibility-by-construction
//! survives the `f32` narrowing:
//!
//! - model: `block{i}.{wq,wk,wv,wo,w_gate,w_up,w_down}` plus
//!   `block{i}.{norm_attn,norm_ffn}`
//! - data: `sample{i}`
//! - transforms: `block{i}.{p_a.p1,p_a.p2,p_o1,p_v,p_ug.p1,p_ug.p2,p_d.p1,
//!   p_d.p2}.{u_skew,v_skew,log_sigma}`, `block{i}.p_h.skew`,
//!   `block{i}.gamma_{a,o,ug,d}`, `block{i}.clip_{w,a}` (7 each, slot
//!   order) and `block{i}.clip_kv` (k then v)

use crate::calibrate::CalibConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::gen::GenConfig;
use crate::linalg::{Matrix, SkewParam, SvdInvertible};
use crate::model::{BlockTransformSet, BlockWeights, ModelConfig, TinyModel};
use crate::quant::ClipParam;
use crate::transforms::{FullTransform, KroneckerTransform};
use serde_json::json;

const WEIGHT_NAMES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];
const SVD_NAMES: [&str; 8] =
    ["p_a.p1", "p_a.p2", "p_o1", "p_v", "p_ug.p1", "p_ug.p2", "p_d.p1", "p_d.p2"];

fn meta_field<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    let v = c
        .meta
        .get(key)
        .ok_or_else(|| Error::Container(format!("meta field '{key}' missing")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Container(format!("meta field '{key}': {e}")))
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

pub fn model_to_container(model: &TinyModel) -> Result<Container> {
    model.validate()?;
    let mut c = Container::new("model", json!({ "model": model.config }));
    for (i, b) in model.blocks.iter().enumerate() {
        let mats = [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_gate, &b.w_up, &b.w_down];
        for (name, m) in WEIGHT_NAMES.iter().zip(mats) {
            c.push_matrix(&format!("block{i}.{name}"), m)?;
        }
        c.push_vector(&format!("block{i}.norm_attn"), &b.norm_attn)?;
        c.push_vector(&format!("block{i}.norm_ffn"), &b.norm_ffn)?;
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<TinyModel> {
    if c.kind != "model" {
        return Err(Error::Container(format!("expected a model container, got '{}'", c.kind)));
    }
    let config: ModelConfig = meta_field(c, "model")?;
    let blocks = (0..config.layers)
        .map(|i| {
            let m = |name: &str| c.get_matrix(&format!("block{i}.{name}"));
            Ok(BlockWeights {
                wq: m("wq")?,
                wk: m("wk")?,
                wv: m("wv")?,
                wo: m("wo")?,
                w_gate: m("w_gate")?,
                w_up: m("w_up")?,
                w_down: m("w_down")?,
                norm_attn: c.get_vector(&format!("block{i}.norm_attn"))?,
                norm_ffn: c.get_vector(&format!("block{i}.norm_ffn"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = TinyModel { config, blocks };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Calibration data
// ---------------------------------------------------------------------------

pub fn data_to_container(
    samples: &[Matrix],
    model_cfg: &ModelConfig,
    gen_cfg: &GenConfig,
    seed: u64,
) -> Result<Container> {
    let mut c = Container::new(
        "data",
        json!({ "model": model_cfg, "gen": gen_cfg, "seed": seed }),
    );
    for (i, s) in samples.iter().enumerate() {
        c.push_matrix(&format!("sample{i}"), s)?;
    }
    Ok(c)
}

pub fn data_from_container(c: &Container) -> Result<Vec<Matrix>> {
    if c.kind != "data" {
        return Err(Error::Container(format!("expected a data container, got '{}'", c.kind)));
    }
    let n = c.len();
    (0..n).map(|i| c.get_matrix(&format!("sample{i}"))).collect()
}

// ---------------------------------------------------------------------------
// Transform sets
// ---------------------------------------------------------------------------

pub fn transforms_to_container(
    sets: &[BlockTransformSet],
    model_cfg: &ModelConfig,
    calib: &CalibConfig,
) -> Result<Container> {
    let mut c = Container::new(
        "transforms",
        json!({
            "model": model_cfg,
            "calib": calib,
            "ablation": { "lt": calib.lt, "ps": calib.ps, "lct": calib.lct },
        }),
    );
    for (i, set) in sets.iter().enumerate() {
        let svds = [
            &set.p_a.p1,
            &set.p_a.p2,
            &set.p_o1,
            &set.p_v.p,
            &set.p_ug.p1,
            &set.p_ug.p2,
            &set.p_d.p1,
            &set.p_d.p2,
        ];
        for (name, p) in SVD_NAMES.iter().zip(svds) {
            c.push_vector(&format!("block{i}.{name}.u_skew"), p.u_param().upper())?;
            c.push_vector(&format!("block{i}.{name}.v_skew"), p.v_param().upper())?;
            c.push_vector(&format!("block{i}.{name}.log_sigma"), p.log_sigma())?;
        }
        c.push_vector(&format!("block{i}.p_h.skew"), set.p_h.upper())?;
        c.push_vector(&format!("block{i}.gamma_a"), &set.gamma_a)?;
        c.push_vector(&format!("block{i}.gamma_o"), &set.gamma_o)?;
        c.push_vector(&format!("block{i}.gamma_ug"), &set.gamma_ug)?;
        c.push_vector(&format!("block{i}.gamma_d"), &set.gamma_d)?;
        let clip_w: Vec<f64> = set.clips.linears.iter().map(|p| p.theta_w).collect();
        let clip_a: Vec<f64> = set.clips.linears.iter().map(|p| p.theta_a).collect();
        c.push_vector(&format!("block{i}.clip_w"), &clip_w)?;
        c.push_vector(&format!("block{i}.clip_a"), &clip_a)?;
        c.push_vector(&format!("block{i}.clip_kv"), &[set.clips.k_cache, set.clips.v_cache])?;
    }
    Ok(c)
}

pub fn transforms_from_container(c: &Container) -> Result<(Vec<BlockTransformSet>, ModelConfig)> {
    if c.kind != "transforms" {
        return Err(Error::Container(format!(
            "expected a transforms container, got '{}'",
            c.kind
        )));
    }
    let config: ModelConfig = meta_field(c, "model")?;
    let (a1, a2) = config.hidden_split();
    let (d1, d2) = config.intermediate_split();
    let dims = [a1, a2, config.heads, config.head_dim(), a1, a2, d1, d2];
    let mut sets = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let svd = |name: &str, n: usize| -> Result<SvdInvertible> {
            SvdInvertible::new(
                SkewParam::new(n, c.get_vector(&format!("block{i}.{name}.u_skew"))?)?,
                SkewParam::new(n, c.get_vector(&format!("block{i}.{name}.v_skew"))?)?,
                c.get_vector(&format!("block{i}.{name}.log_sigma"))?,
            )
        };
        let mut parts = SVD_NAMES.iter().zip(dims).map(|(name, n)| svd(name, n));
        let p_a1 = parts.next().expect("eight names")?;
        let p_a2 = parts.next().expect("eight names")?;
        let p_o1 = parts.next().expect("eight names")?;
        let p_v = parts.next().expect("eight names")?;
        let p_ug1 = parts.next().expect("eight names")?;
        let p_ug2 = parts.next().expect("eight names")?;
        let p_d1 = parts.next().expect("eight names")?;
        let p_d2 = parts.next().expect("eight names")?;

        let clip_w = c.get_vector(&format!("block{i}.clip_w"))?;
        let clip_a = c.get_vector(&format!("block{i}.clip_a"))?;
        let clip_kv = c.get_vector(&format!("block{i}.clip_kv"))?;
        if clip_w.len() != 7 || clip_a.len() != 7 || clip_kv.len() != 2 {
            return Err(Error::Container("clip tensors have unexpected lengths".into()));
        }
        let mut set = BlockTransformSet::identity(&config);
        set.p_a = KroneckerTransform::new(p_a1, p_a2)?;
        set.p_o1 = p_o1;
        set.p_h = SkewParam::new(config.head_dim(), c.get_vector(&format!("block{i}.p_h.skew"))?)?;
        set.p_v = FullTransform { p: p_v };
        set.p_ug = KroneckerTransform::new(p_ug1, p_ug2)?;
        set.p_d = KroneckerTransform::new(p_d1, p_d2)?;
        set.gamma_a = c.get_vector(&format!("block{i}.gamma_a"))?;
        set.gamma_o = c.get_vector(&format!("block{i}.gamma_o"))?;
        set.gamma_ug = c.get_vector(&format!("block{i}.gamma_ug"))?;
        set.gamma_d = c.get_vector(&format!("block{i}.gamma_d"))?;
        for (j, p) in set.clips.linears.iter_mut().enumerate() {
            *p = ClipParam::new(clip_w[j], clip_a[j]);
        }
        set.clips.k_cache = clip_kv[0];
        set.clips.v_cache = clip_kv[1];
        sets.push(set);
    }
    Ok((sets, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen;

    #[test]
    fn model_round_trip() {
        let cfg = ModelConfig::default();
        let model = gen::random_model(&cfg, 71);
        let c = model_to_container(&model).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = model_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        // f32 narrowing: values agree to f32 precision.
        assert!(back.blocks[0].wq.max_abs_diff(&model.blocks[0].wq) < 1e-6);
        // And a second round trip is bit-exact.
        let again = model_to_container(&back).unwrap().to_bytes().unwrap();
        let c2 = model_to_container(&back).unwrap().to_bytes().unwrap();
        assert_eq!(again, c2);
    }

    #[test]
    fn transforms_round_trip_and_realize() {
        let cfg = ModelConfig::default();
        let sets = vec![gen::random_transform_set(&cfg, 72), gen::random_transform_set(&cfg, 73)];
        let calib = CalibConfig::default();
        let c = transforms_to_container(&sets, &cfg, &calib).unwrap();
        let bytes = c.to_bytes().unwrap();
        let (back, cfg2) = transforms_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.len(), 2);
        // Realization from the narrowed parameters still yields exact
        // closed-form inverses.
        let t = crate::model::RealizedTransforms::from_set(&back[0], &cfg).unwrap();
        let prod = t.attn_p1.matmul(&t.attn_p1_inv).unwrap();
        assert!(prod.identity_residual() < 1e-10);
    }

    #[test]
    fn data_round_trip() {
        let cfg = ModelConfig::default();
        let gen_cfg = GenConfig { samples: 3, seq_len: 8, ..Default::default() };
        let data = gen::synth_calibration_data(&cfg, &gen_cfg, 74).unwrap();
        let c = data_to_container(&data, &cfg, &gen_cfg, 74).unwrap();
        let back = data_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[0].max_abs_diff(&data[0]) < 1e-4);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let cfg = ModelConfig::default();
        let model = gen::random_model(&cfg, 75);
        let c = model_to_container(&model).unwrap();
        assert!(data_from_container(&c).is_err());
        assert!(transforms_from_container(&c).is_err());
    }
}
