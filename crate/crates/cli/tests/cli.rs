use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn frad(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frad"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run frad")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn dataset(dir: &Path) -> String {
    let cfg = write(dir, "gen.cfg", "data.count = 4\n");
    let out = frad(&["gen-data", "--config", &cfg, "--seed", "1"], &dir.join("gen"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("gen/dataset.jsonl").display().to_string()
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad_key = write(d, "bad.cfg", "data.colour = 3\n");
    assert_eq!(frad(&["gen-data", "--config", &bad_key], &d.join("a")).status.code(), Some(2));
    let bad_value = write(d, "val.cfg", "data.count = many\n");
    assert_eq!(frad(&["gen-data", "--config", &bad_value], &d.join("a")).status.code(), Some(2));
    assert_eq!(frad(&["pretrain"], &d.join("a")).status.code(), Some(2));

    let missing = frad(&["force-accuracy", "--input", "/definitely/not/here.jsonl"], &d.join("b"));
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/definitely/not/here.jsonl"));

    let ds = dataset(d);
    let nan = write(
        d,
        "nan.cfg",
        "model.layers = 1\nmodel.features = 8\nmodel.rbf = 4\ntrain.lr = 1e300\ntrain.warmup = 0\ntrain.epochs = 2\n",
    );
    assert_eq!(frad(&["pretrain", "--input", &ds, "--config", &nan], &d.join("c")).status.code(), Some(4));
}

#[test]
fn empty_settings_write_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ds = dataset(d);
    let cfg = write(d, "fa.cfg", "accuracy.settings =\n");
    let out = frad(&["force-accuracy", "--input", &ds, "--config", &cfg], &d.join("fa"));
    assert!(out.status.success());
    let text = fs::read_to_string(d.join("fa/force_accuracy.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("# frad "));
    assert_eq!(lines[1], "setting,kind,sigma,tau,c_error,pearson_rho,cosine_mean");
}

#[test]
fn standard_settings_give_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ds = dataset(d);
    let cfg = write(d, "fa.cfg", "accuracy.molecules = 2\naccuracy.samples = 4\n");
    assert!(frad(&["force-accuracy", "--input", &ds, "--config", &cfg], &d.join("fa")).status.success());
    let text = fs::read_to_string(d.join("fa/force_accuracy.csv")).unwrap();
    assert_eq!(text.lines().count(), 2 + 6);
}

#[test]
fn manifest_replays_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ds = dataset(d);
    let cfg = write(d, "ps.cfg", "scale.samples = 2\nscale.settings = 0:0.04,20:0.04\n");
    assert!(frad(&["perturbation-scale", "--input", &ds, "--config", &cfg, "--seed", "9"], &d.join("one")).status.success());
    let manifest = d.join("one/manifest.json").display().to_string();
    assert!(frad(&["perturbation-scale", "--config", &manifest], &d.join("two")).status.success());
    let a = fs::read(d.join("one/perturbation_scale.csv")).unwrap();
    let b = fs::read(d.join("two/perturbation_scale.csv")).unwrap();
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("one/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["subcommand"], "perturbation-scale");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn failed_pipeline_stage_is_named_and_kept() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = write(d, "p.cfg", "data.path = /no/such/dataset.jsonl\n");
    let out = frad(&["pipeline", "--config", &missing], &d.join("p"));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage data") && err.contains("/no/such/dataset.jsonl"), "{err}");

    let no_val = write(
        d,
        "q.cfg",
        "data.count = 3\nmodel.layers = 1\nmodel.features = 8\nmodel.rbf = 4\npretrain.train.epochs = 1\nfinetune.train.epochs = 1\nfinetune.val_fraction = 0\n",
    );
    let out = frad(&["pipeline", "--config", &no_val], &d.join("q"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage eval"));
    assert!(d.join("q/finetune/model.ckpt").exists());
}

#[test]
fn perturb_writes_structures_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let xyz = write(
        d,
        "ethane.xyz",
        "8\nethane\nC 0 0 0\nC 1.54 0 0\nH -0.36 1.03 0\nH -0.36 -0.51 0.89\nH -0.36 -0.51 -0.89\nH 1.90 -1.03 0\nH 1.90 0.51 0.89\nH 1.90 0.51 -0.89\n",
    );
    let out = frad(&["perturb", "--input", &xyz, "--sigma", "1", "--tau", "0.01"], &d.join("p"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["x_med.xyz", "x_fin.xyz", "perturb.json"] {
        assert!(d.join("p").join(f).exists(), "{f}");
    }
    let side: serde_json::Value = serde_json::from_slice(&fs::read(d.join("p/perturb.json")).unwrap()).unwrap();
    assert_eq!(side["delta"]["dpsi"].as_array().unwrap().len(), 1);
    assert!(side["scale_fin"].as_f64().unwrap() > 0.0);
}
