//! Behavioral tests of the command-line surface: determinism, schema
//! rejection, exit codes, and report shapes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn flatkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flatkit"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("flatkit-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A small config so CLI tests stay quick.
fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": { "hidden": 16, "intermediate": 32, "heads": 2, "layers": 2, "vocab": 32, "rope_base": 10000.0 },
        "gen": { "samples": 6, "seq_len": 12, "outlier_channels": [1, 7], "outlier_ratio": 80.0, "pivot_ratio": null },
        "calib": { "epochs": epochs, "lr_transforms": 0.005, "lr_clip": 0.05, "batch": 4, "samples": 6,
                   "seed": 0, "lt": true, "ps": true, "lct": true,
                   "propagate_quantized_inputs": false, "log_sigma_clamp": 3.0 },
        "mode": "w4a4kv4",
        "transform": "flat",
        "seed": 11
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed (status {:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tmp_dir("gen");
    let cfg = small_config(&dir, 1);
    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(dir.join("a")));
    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(dir.join("b")));
    run_ok(
        flatkit()
            .args(["gen", "--config"])
            .arg(&cfg)
            .args(["--seed", "99"])
            .arg("--out")
            .arg(dir.join("c")),
    );

    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(dir.join("a/model.fkc")), read(dir.join("b/model.fkc")));
    assert_eq!(read(dir.join("a/data.fkc")), read(dir.join("b/data.fkc")));
    // Different seed, different payloads.
    assert_ne!(read(dir.join("a/data.fkc")), read(dir.join("c/data.fkc")));
}

#[test]
fn malformed_config_exits_with_code_2() {
    let dir = tmp_dir("badcfg");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{ "model": { "hidden": "not a number" } }"#).unwrap();
    let out = flatkit()
        .args(["gen", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("out/model.fkc").exists(), "must fail before any computation");

    // Unknown fields are schema errors, too.
    let unknown = dir.join("unknown.json");
    std::fs::write(
        &unknown,
        r#"{ "model": { "hidden": 16, "intermediate": 32, "heads": 2, "layers": 1, "vocab": 8, "rope_base": 10000.0 }, "surprise": 1 }"#,
    )
    .unwrap();
    let out = flatkit()
        .args(["gen", "--config"])
        .arg(&unknown)
        .arg("--out")
        .arg(dir.join("out2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_with_code_4() {
    let dir = tmp_dir("missing");
    let out = flatkit()
        .arg("calibrate")
        .arg(dir.join("nope.fkc"))
        .arg(dir.join("nope2.fkc"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn calibrate_epochs_zero_writes_initialization_and_identity_markers() {
    let dir = tmp_dir("epochs0");
    let cfg = small_config(&dir, 0);
    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    run_ok(
        flatkit()
            .arg("calibrate")
            .arg(dir.join("model.fkc"))
            .arg(dir.join("data.fkc"))
            .args(["--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&dir),
    );
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert_eq!(trace.trim(), "epoch,block,loss,flatness", "no epochs -> header only");

    // The container carries the untouched initialization.
    let c = flatkit::container::Container::load(&dir.join("transforms.fkc")).unwrap();
    let (sets, mcfg) = flatkit::store::transforms_from_container(&c).unwrap();
    let init = flatkit::gen::init_transform_set(&mcfg, 11);
    let got: Vec<f32> = sets[0].p_a.p1.u_param().upper().iter().map(|&v| v as f32).collect();
    let want: Vec<f32> = init.p_a.p1.u_param().upper().iter().map(|&v| v as f32).collect();
    assert_eq!(got, want);

    // Ablation flags all off: identity markers in the metadata and
    // identity parameters in the payload.
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["calib"]["lt"] = serde_json::json!(false);
    v["calib"]["ps"] = serde_json::json!(false);
    v["calib"]["lct"] = serde_json::json!(false);
    v["calib"]["epochs"] = serde_json::json!(1);
    let cfg_off = dir.join("config-off.json");
    std::fs::write(&cfg_off, v.to_string()).unwrap();
    run_ok(
        flatkit()
            .arg("calibrate")
            .arg(dir.join("model.fkc"))
            .arg(dir.join("data.fkc"))
            .args(["--config"])
            .arg(&cfg_off)
            .arg("--out")
            .arg(dir.join("off")),
    );
    let c = flatkit::container::Container::load(&dir.join("off/transforms.fkc")).unwrap();
    assert_eq!(c.meta["ablation"]["lt"], serde_json::json!(false));
    let (sets, _) = flatkit::store::transforms_from_container(&c).unwrap();
    assert!(sets[0].p_a.p1.u_param().upper().iter().all(|&v| v == 0.0));
    assert!(sets[0].gamma_a.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_report_shapes_and_zero_mse_when_off() {
    let dir = tmp_dir("eval");
    let cfg = small_config(&dir, 1);
    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&dir));

    run_ok(
        flatkit()
            .arg("eval")
            .arg(dir.join("model.fkc"))
            .arg(dir.join("data.fkc"))
            .args(["--mode", "off", "--transform", "identity"])
            .arg("--report")
            .arg(dir.join("off")),
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("off/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["grid_sum"], serde_json::json!(0.0));

    // layers x tokens rows plus the header.
    let csv = std::fs::read_to_string(dir.join("off/landscape.csv")).unwrap();
    let rows = csv.trim().lines().count() - 1;
    assert_eq!(rows, 2 * 12);

    // flat without --transforms is a config error.
    let out = flatkit()
        .arg("eval")
        .arg(dir.join("model.fkc"))
        .arg(dir.join("data.fkc"))
        .args(["--transform", "flat"])
        .arg("--report")
        .arg(dir.join("flat"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_code_3() {
    let dir = tmp_dir("diverge");
    let cfg = small_config(&dir, 6);
    // Blow up the learning rate so calibration trips the divergence abort.
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["calib"]["lr_transforms"] = serde_json::json!(1.5);
    v["calib"]["lr_clip"] = serde_json::json!(1.5);
    std::fs::write(&cfg, v.to_string()).unwrap();

    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    let out = flatkit()
        .arg("calibrate")
        .arg(dir.join("model.fkc"))
        .arg(dir.join("data.fkc"))
        .args(["--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn unknown_mode_or_variant_exits_with_code_2() {
    let dir = tmp_dir("badmode");
    let cfg = small_config(&dir, 1);
    run_ok(flatkit().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(&dir));
    let out = flatkit()
        .arg("eval")
        .arg(dir.join("model.fkc"))
        .arg(dir.join("data.fkc"))
        .args(["--mode", "w2a2", "--transform", "identity"])
        .arg("--report")
        .arg(dir.join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_cap_env_var() {
    let dir = tmp_dir("threads");
    let cfg = small_config(&dir, 1);
    let out = flatkit()
        .env("FLATKIT_THREADS", "1")
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("a"))
        .output()
        .unwrap();
    assert!(out.status.success());

    let out = flatkit()
        .env("FLATKIT_THREADS", "zero")
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("b"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overhead_prints_reference_lines() {
    let stdout = run_ok(flatkit().arg("overhead"));
    assert!(stdout.contains("llama2-7b"), "{stdout}");
    assert!(stdout.contains("2.61%"), "{stdout}");
    assert!(stdout.contains("3.41MB"), "{stdout}");
    assert!(stdout.contains("64 x 128"), "{stdout}");

    // Square-width row: exact column equals the formula column.
    let line = stdout.lines().find(|l| l.starts_with("tiny-square")).unwrap();
    let fields: Vec<&str> = line.split_whitespace().collect();
    let formula: f64 = fields[6].parse().unwrap();
    let exact: f64 = fields[7].parse().unwrap();
    assert_eq!(formula, exact, "{line}");
}
