use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use vqqat_core::model::LayerBody;
use vqqat_core::trainer::Checkpoint;

fn vqqat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqqat")).args(args).output().expect("spawn vqqat")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn base_config(epochs: usize) -> Value {
    json!({
        "schema": 1,
        "seed": 3,
        "model": {"input_dim": 8, "layers": [{"name": "fc1", "out": 16}, {"name": "fc2", "out": 3}]},
        "dataset": {"kind": "synthetic", "spec": {"n": 120, "dim": 8, "classes": 3}, "n_eval": 30},
        "optimizer": {"lr": 0.05, "epochs": epochs}
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_single_error_line(o: &Output) {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
}

#[test]
fn float_train_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &base_config(3));
    let out = dir.path().join("run");
    let o = vqqat(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,eval_acc,avg_bits,lr");
    assert_eq!(lines.len(), 4);
    assert!(out.join("checkpoint.json").exists());
    assert!(!out.join("arch_report.json").exists());
}

#[test]
fn missing_layer_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_config(1);
    c["quant"] = json!({"conv1": {"kind": "lq", "bits": 4}});
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &c);
    let o = vqqat(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o);
    assert!(stderr(&o).contains("conv1"));
}

#[test]
fn invalid_json_and_missing_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = vqqat(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o);
    let o = vqqat(&["train", "--config", p(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_config(5);
    c["optimizer"]["lr"] = json!(1e200);
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &c);
    let o = vqqat(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_single_error_line(&o);
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn havq_runs_are_reproducible_and_seed_flag_matters() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_config(3);
    c["quant"] = json!({"fc1": {"kind": "havq", "vec_len": 8, "b_index": 3}});
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &c);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", p(&cfg), "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = vqqat(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(a, b);
    let c = run("c", &["--seed", "4"]);
    assert_ne!(a, c);
    let header = String::from_utf8(a).unwrap();
    assert!(header.starts_with("epoch,train_loss,train_acc,eval_acc,avg_bits,lr,entropy_fc1,dead_fc1\n"));
}

/// Trains a float model and returns (dir, checkpoint path).
fn float_checkpoint(c: &Value) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("float.json");
    write(&cfg, c);
    let out = dir.path().join("float");
    let o = vqqat(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, out.join("checkpoint.json"))
}

fn quantize(dir: &Path, ck: &Path, c: &Value, name: &str) -> (Output, std::path::PathBuf) {
    let cfg = dir.join(format!("{name}.json"));
    write(&cfg, c);
    let out = dir.join(name);
    let o = vqqat(&["quantize", "--config", p(&cfg), "--checkpoint", p(ck), "--out", p(&out)]);
    (o, out)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn quantize_one_codeword_per_vector_is_lossless() {
    let c = base_config(2);
    let (dir, ck) = float_checkpoint(&c);
    let mut q = c.clone();
    // fc1: 8×16 = 128 weights = 16 vectors of 8; 4 index bits = 16 codewords.
    q["quant"] = json!({"fc1": {"kind": "havq", "vec_len": 8, "b_index": 4}});
    let (o, out) = quantize(dir.path(), &ck, &q, "ptq");
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("quantize_report.json"));
    assert_eq!(report["layers"][0]["mse"].as_f64(), Some(0.0));
}

#[test]
fn quantize_reports_one_bit_for_8_over_4_plus_4() {
    let c = base_config(1);
    let (dir, ck) = float_checkpoint(&c);
    let mut q = c.clone();
    q["quant"] = json!({"fc1": {"kind": "projvq", "vec_len": 8, "b_index": 4, "b_scalar": 4}});
    let (o, out) = quantize(dir.path(), &ck, &q, "ptq");
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("quantize_report.json"));
    assert_eq!(report["layers"][0]["bits_per_weight"].as_f64(), Some(1.0));
    assert_eq!(report["layers"][0]["compression_ratio"].as_f64(), Some(32.0));
}

#[test]
fn quantize_mse_matches_recomputation_from_written_files() {
    let c = base_config(1);
    let (dir, ck) = float_checkpoint(&c);
    let float = Checkpoint::load(&ck).unwrap();
    for (name, quant) in [
        ("havq", json!({"kind": "havq", "vec_len": 4, "b_index": 3})),
        ("projvq", json!({"kind": "projvq", "vec_len": 4, "b_index": 2, "b_scalar": 3})),
    ] {
        let mut q = c.clone();
        q["quant"] = json!({ "fc1": quant });
        let (o, out) = quantize(dir.path(), &ck, &q, name);
        assert!(o.status.success(), "{}", stderr(&o));
        let report = read_json(&out.join("quantize_report.json"));
        let layer = &report["layers"][0];
        let assignments: Vec<usize> = serde_json::from_value(layer["assignments"].clone()).unwrap();
        let scalars: Option<Vec<f64>> = serde_json::from_value(layer["scalars"].clone()).unwrap();
        let qck = read_json(&out.join("quantized_checkpoint.json"));
        let cb = &qck["model"]["layers"][0]["body"]["quant"]["codebook"];
        let l = cb["vec_len"].as_u64().unwrap() as usize;
        let entries: Vec<f64> = serde_json::from_value(cb["entries"].clone()).unwrap();
        let LayerBody::Plain { weights, .. } = &float.model.layers[0].body else {
            panic!("float layer expected")
        };
        let mut sse = 0.0;
        for (v, &a) in assignments.iter().enumerate() {
            let s = scalars.as_ref().map_or(1.0, |s| s[v]);
            for k in 0..l {
                let d = weights[v * l + k] - s * entries[a * l + k];
                sse += d * d;
            }
        }
        let mse = sse / weights.len() as f64;
        let reported = layer["mse"].as_f64().unwrap();
        assert!((mse - reported).abs() <= 1e-12 * mse.max(1e-300), "{name}: {mse} vs {reported}");
    }
}

#[test]
fn quantize_without_padding_rejects_indivisible_layers() {
    let c = base_config(1);
    let (dir, ck) = float_checkpoint(&c);
    let mut q = c.clone();
    q["allow_padding"] = json!(false);
    q["quant"] = json!({"fc2": {"kind": "havq", "vec_len": 5, "b_index": 2}});
    let (o, _) = quantize(dir.path(), &ck, &q, "ptq");
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o);
}

#[test]
fn eval_prints_accuracies() {
    let c = base_config(3);
    let (dir, ck) = float_checkpoint(&c);
    let cfg = dir.path().join("float.json");
    let o = vqqat(&["eval", "--config", p(&cfg), "--checkpoint", p(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["train_acc"].as_f64().unwrap() > 0.5);
    assert_eq!(v["avg_bits"].as_f64(), Some(32.0));
}

#[test]
fn gradcheck_default_corrupted_and_single_op() {
    let o = vqqat(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.ends_with(" ok")));

    let o = vqqat(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o);

    let o = vqqat(&["gradcheck", "--op", "havq_backward"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("havq_backward"));

    let o = vqqat(&["gradcheck", "--op", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_nas_run_lists_choices_and_recomputed_bits() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base_config(6);
    c["model"]["layers"] = json!([{"name": "fc1", "out": 32}, {"name": "fc2", "out": 16}, {"name": "fc3", "out": 3}]);
    c["quant"] = json!({
        "fc1": {"kind": "mixed", "vq": {"kind": "havq", "vec_len": 8, "b_index": 4}, "lq_bits": 2},
        "fc2": {"kind": "mixed", "vq": {"kind": "havq", "vec_len": 8, "b_index": 4}, "lq_bits": 2}
    });
    c["nas"] = json!({"beta": 1e-3, "budget_bits": 1.2});
    let cfg = dir.path().join("nas.json");
    write(&cfg, &c);
    let out = dir.path().join("run");
    let o = vqqat(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = vqqat(&["report", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let layers = summary["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    let arch = read_json(&out.join("arch_report.json"));
    assert_eq!(summary["layers"], arch);

    // Σ storage / Σ weights from the configs and the recorded choices.
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let mut bits = 0.0;
    let mut weights = 0.0;
    for (entry, (n_in, n_out)) in layers.iter().zip([(8.0, 32.0), (32.0, 16.0)]) {
        let n = n_in * n_out;
        let frozen = entry["frozen"].as_bool().unwrap();
        let name = entry["layer_name"].as_str().unwrap();
        let p_vq = match (frozen, entry["final_choice"].as_str().unwrap()) {
            (true, "vq") => 1.0,
            (true, _) => 0.0,
            _ => ck.model.layer(name).unwrap().mixed().unwrap().arch.p_vq(),
        };
        bits += p_vq * n * 4.0 / 8.0 + (1.0 - p_vq) * n * 2.0;
        weights += n;
    }
    let reported = summary["bits_per_weight"].as_f64().unwrap();
    assert!((reported - bits / weights).abs() <= 1e-12, "{reported} vs {}", bits / weights);
    assert!(summary["utilization"]["fc1"].as_array().unwrap().len() == 6);
}

#[test]
fn report_on_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqqat(&["report", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o);
}
