//! Implementations behind the CLI verbs.

use flatkit::analysis::{
    self, channel_magnitudes, flatness, mse_landscape, select_kernel_case, KernelCase,
    TileOptions,
};
use flatkit::calibrate::{calibrate_model, TraceRow};
use flatkit::config::RunConfig;
use flatkit::container::Container;
use flatkit::error::{Error, Result};
use flatkit::gen;
use flatkit::linalg::Matrix;
use flatkit::model::{
    realize_variant, site_activations, ModelConfig, QuantMode, TinyModel,
    TransformVariant,
};
use flatkit::store;
use flatkit::transforms::{choose_decomposition, kron_saving};
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let model = gen::random_model(&cfg.model, cfg.seed);
    let data = gen::synth_calibration_data(&cfg.model, &cfg.gen, cfg.seed)?;

    std::fs::create_dir_all(out)?;
    store::model_to_container(&model)?.save(&out.join("model.fkc"))?;
    store::data_to_container(&data, &cfg.model, &cfg.gen, cfg.seed)?.save(&out.join("data.fkc"))?;
    println!(
        "wrote {} and {} ({} blocks, {} samples, seed {})",
        out.join("model.fkc").display(),
        out.join("data.fkc").display(),
        cfg.model.layers,
        cfg.gen.samples,
        cfg.seed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn load_model(path: &Path) -> Result<TinyModel> {
    store::model_from_container(&Container::load(path)?)
}

fn load_data(path: &Path, expect: &ModelConfig) -> Result<Vec<Matrix>> {
    let c = Container::load(path)?;
    let data = store::data_from_container(&c)?;
    if let Some(width) = data.first().map(|m| m.cols()) {
        if width != expect.hidden {
            return Err(Error::Config(format!(
                "data width {width} does not match the model's hidden width {}",
                expect.hidden
            )));
        }
    }
    Ok(data)
}

fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("epoch,block,loss,flatness\n");
    for row in trace {
        let _ = writeln!(s, "{},{},{},{}", row.epoch, row.block, row.loss, row.flatness);
    }
    s
}

pub fn calibrate(
    model_path: &Path,
    data_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = load_model(model_path)?;
    let data = load_data(data_path, &model.config)?;
    let mut calib = cfg.calib;
    calib.seed = cfg.seed;
    calib.validate()?;
    let mode = cfg.quant_mode();

    let result = calibrate_model(&model, &data, &mode, &calib)?;

    std::fs::create_dir_all(out)?;
    store::transforms_to_container(&result.sets, &model.config, &calib)?
        .save(&out.join("transforms.fkc"))?;
    write_atomic(&out.join("trace.csv"), trace_csv(&result.trace).as_bytes())?;
    println!(
        "calibrated {} blocks over {} epochs; final epoch losses: {}",
        result.sets.len(),
        calib.epochs,
        result
            .trace
            .iter()
            .filter(|r| r.epoch + 1 == calib.epochs)
            .map(|r| format!("block{}={:.6}", r.block, r.loss))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(
    model_path: &Path,
    data_path: &Path,
    transforms_path: Option<&Path>,
    mode_name: &str,
    variant_name: &str,
    report: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let data = load_data(data_path, &model.config)?;
    let mode_tag: flatkit::config::ModeName = mode_name.parse()?;
    let mode = mode_tag.to_mode(model.config.head_dim());
    let variant: TransformVariant = variant_name.parse()?;

    let sets = match (variant, transforms_path) {
        (TransformVariant::Flat, Some(p)) => {
            let (sets, tcfg) = store::transforms_from_container(&Container::load(p)?)?;
            if tcfg != model.config {
                return Err(Error::Config(
                    "transform container was calibrated for a different model shape".into(),
                ));
            }
            Some(sets)
        }
        (TransformVariant::Flat, None) => {
            return Err(Error::Config(
                "--transform flat requires --transforms with a calibrated container".into(),
            ));
        }
        _ => None,
    };
    let realized = realize_variant(variant, &model, &data, sets.as_deref())?;

    let grid = mse_landscape(&model, &data, &mode, &realized)?;

    // Flatness of the transformed linear inputs, stacked across samples.
    let site_names = ["attn_in", "o_in", "ffn_in", "down_in"];
    let mut flat_rows: Vec<(usize, &str, usize, f64)> = Vec::new();
    let mut flatness_total = 0.0;
    let mut states: Vec<Matrix> = data.to_vec();
    for (b, block) in model.blocks.iter().enumerate() {
        let mut mags: [Vec<f64>; 4] = Default::default();
        for x in &states {
            let sites = site_activations(block, &model.config, &realized[b], x)?;
            for (acc, site) in mags.iter_mut().zip(sites.iter()) {
                let m = channel_magnitudes(site, analysis::Axis::Columns);
                if acc.is_empty() {
                    *acc = m;
                } else {
                    // Combine per-sample Frobenius norms: sqrt of summed squares.
                    for (a, v) in acc.iter_mut().zip(m.iter()) {
                        *a = (*a * *a + v * v).sqrt();
                    }
                }
            }
        }
        for (name, m) in site_names.iter().zip(mags.iter()) {
            let f = flatness(m);
            flatness_total += f;
            flat_rows.push((b, name, m.len(), f));
        }
        // Advance the full-precision states for the next block's sites.
        states = states
            .iter()
            .map(|x| {
                flatkit::model::block_forward(x, block, &model.config, None, &QuantMode::off())
            })
            .collect::<Result<Vec<_>>>()?;
    }

    let per_layer: Vec<f64> = grid
        .grid
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let end_to_end = per_layer.last().copied().unwrap_or(0.0);
    let summary = json!({
        "schema_version": 1,
        "mode": mode_name,
        "transform": variant_name,
        "layers": grid.layers(),
        "tokens": grid.tokens(),
        "samples": data.len(),
        "grid_sum": grid.total(),
        "per_layer_mse": per_layer,
        "end_to_end_mse": end_to_end,
        "flatness_total": flatness_total,
    });

    let mut landscape_csv = String::from("layer,token,mse\n");
    for (l, row) in grid.grid.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let _ = writeln!(landscape_csv, "{l},{t},{v}");
        }
    }
    let mut flatness_csv = String::from("block,tensor,channels,flatness\n");
    for (b, name, n, f) in &flat_rows {
        let _ = writeln!(flatness_csv, "{b},{name},{n},{f}");
    }

    std::fs::create_dir_all(report)?;
    write_atomic(&report.join("landscape.csv"), landscape_csv.as_bytes())?;
    write_atomic(&report.join("flatness.csv"), flatness_csv.as_bytes())?;
    write_atomic(
        &report.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("serializable")).as_bytes(),
    )?;
    println!(
        "mode {mode_name}, transform {variant_name}: grid-sum MSE {:.6e}, flatness total {:.6}",
        grid.total(),
        flatness_total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// overhead
// ---------------------------------------------------------------------------

fn kernel_case_cell(n1: usize, n2: usize, sram: usize) -> String {
    match select_kernel_case(n1, n2, sram, &TileOptions::default()) {
        Ok(sel) => match sel.case {
            KernelCase::Default => "default".into(),
            KernelCase::Corner1 { t_n1 } => format!("corner1(t_n1={t_n1})"),
            KernelCase::Corner2 { b_n1, b_n2 } => format!("corner2(b_n1={b_n1},b_n2={b_n2})"),
        },
        Err(_) => "none".into(),
    }
}

pub fn overhead(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    const SRAM: usize = 99 * 1024; // shared-memory budget per thread block

    println!("decomposition sweep (kernel cases at {} KiB shared memory):", SRAM / 1024);
    println!(
        "{:>8} {:>12} {:>14} {:>14}  kernel case",
        "width", "n1 x n2", "memory saving", "flops saving"
    );
    let mut widths = vec![64usize, 128, 4096, 5120, 8192, 11008, 13824, 28672];
    if !widths.contains(&cfg.model.hidden) {
        widths.push(cfg.model.hidden);
    }
    if !widths.contains(&cfg.model.intermediate) {
        widths.push(cfg.model.intermediate);
    }
    for n in widths {
        let d = choose_decomposition(n);
        let (mem, flops) = kron_saving(d.n1, d.n2);
        println!(
            "{:>8} {:>12} {:>13.1}x {:>13.1}x  {}",
            n,
            format!("{} x {}", d.n1, d.n2),
            mem,
            flops,
            kernel_case_cell(d.n1, d.n2, SRAM)
        );
    }

    println!();
    println!("online-transform overhead per block:");
    println!(
        "{:<16} {:>6} {:>6} {:>4} {:>6} {:>7} {:>16} {:>16} {:>8} {:>10}",
        "config", "h_d", "h_i", "a", "seq", "layers", "formula flops", "exact flops", "ratio", "memory"
    );
    let rows: Vec<(String, ModelConfig, usize, usize)> = vec![
        (
            "llama2-7b".into(),
            ModelConfig {
                hidden: 4096,
                intermediate: 11008,
                heads: 32,
                layers: 32,
                vocab: 32000,
                rope_base: 10000.0,
            },
            2048,
            32,
        ),
        (
            "tiny-square".into(),
            ModelConfig {
                hidden: 64,
                intermediate: 256,
                heads: 4,
                layers: 2,
                vocab: 256,
                rope_base: 10000.0,
            },
            64,
            2,
        ),
        ("config".into(), cfg.model, cfg.gen.seq_len, cfg.model.layers),
    ];
    for (label, m, seq, layers) in rows {
        let formula = analysis::online_transform_flops(&m, 1, seq);
        let exact = analysis::online_transform_flops_exact(&m, 1, seq);
        let ratio = analysis::online_flops_ratio(&m, 1, seq);
        let mem = analysis::transform_memory_bytes(&m, layers);
        let mem_h = if mem < 1024 * 1024 {
            format!("{:.2}KB", mem as f64 / 1024.0)
        } else {
            format!("{:.2}MB", mem as f64 / (1024.0 * 1024.0))
        };
        println!(
            "{:<16} {:>6} {:>6} {:>4} {:>6} {:>7} {:>16.0} {:>16} {:>7.2}% {:>10}",
            label,
            m.hidden,
            m.intermediate,
            m.heads,
            seq,
            layers,
            formula,
            exact,
            100.0 * ratio,
            mem_h
        );
    }
    Ok(())
}
