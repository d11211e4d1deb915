use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn be(n: u32) -> [u8; 4] {
    n.to_be_bytes()
}

/// A small MNIST-shaped dataset: class `c` lights rows `2c..2c+2`.
fn write_split(dir: &Path, images: &str, labels: &str, per_class: usize) {
    let n = per_class * 10;
    let mut img = Vec::new();
    img.extend(be(0x803));
    img.extend(be(n as u32));
    img.extend(be(28));
    img.extend(be(28));
    let mut lab = Vec::new();
    lab.extend(be(0x801));
    lab.extend(be(n as u32));
    for i in 0..n {
        let c = i % 10;
        lab.push(c as u8);
        for p in 0..784 {
            let row = p / 28;
            img.push(if row / 2 == c { 200 + (i % 50) as u8 } else { (p * 7 + i) as u8 % 30 });
        }
    }
    fs::write(dir.join(images), img).unwrap();
    fs::write(dir.join(labels), lab).unwrap();
}

fn fixture() -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    let mnist = root.path().join("mnist");
    fs::create_dir_all(&mnist).unwrap();
    write_split(&mnist, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 30);
    write_split(&mnist, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 5);
    root
}

fn cli(data: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sleep-replay"))
        .arg("--data-root")
        .arg(data)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn train_sleep_eval_report_roundtrip() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let w = |s: &str| work.path().join(s);

    let out = ok(cli(data.path(), &w("train"), &["--seed", "4", "train", "--fraction", "0.5", "--epochs", "2"]));
    assert!(out.contains("trained on 150 images"), "{out}");
    let loss = fs::read_to_string(w("train/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let manifest = fs::read_to_string(w("train/manifest.ini")).unwrap();
    assert!(manifest.contains("[subset]") && manifest.contains("per_class_counts = 15,15"));

    let model_dir = w("train");
    ok(cli(data.path(), &w("sleep"), &["sleep", "--model-dir", model_dir.to_str().unwrap()]));
    for f in ["model.srcmlp", "spike_counts.csv", "raster.csv", "delta_signs.csv", "trace_summary.json", "scales.json"] {
        assert!(w("sleep").join(f).exists(), "{f}");
    }
    let counts = fs::read_to_string(w("sleep/spike_counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 366);

    let model = w("sleep/model.srcmlp");
    let out = ok(cli(data.path(), &w("eval"), &["eval", "--model", model.to_str().unwrap()]));
    assert!(out.starts_with("accuracy "), "{out}");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(w("eval/metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let trace = w("sleep/trace_summary.json");
    ok(cli(data.path(), &w("trace_csv"), &["report", "--input", trace.to_str().unwrap()]));
    assert!(w("trace_csv/rate_series.csv").exists());
}

#[test]
fn experiment_report_tables() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let exp = work.path().join("exp");
    ok(cli(
        data.path(),
        &exp,
        &["experiment", "--family", "limited", "--fraction", "0.2,0.5", "--trials", "2", "--epochs", "1"],
    ));
    let summary = fs::read_to_string(exp.join("summary.csv")).unwrap();
    // header + 2 fractions x 3 phases x accuracy
    assert_eq!(summary.lines().count(), 7, "{summary}");
    let trials = fs::read_to_string(exp.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 2 * 2 * 3);

    let tables = work.path().join("tables");
    ok(cli(data.path(), &tables, &["report", "--input", exp.join("report.json").to_str().unwrap()]));
    assert_eq!(fs::read(tables.join("summary.csv")).unwrap(), fs::read(exp.join("summary.csv")).unwrap());
    assert!(tables.join("confusion").read_dir().unwrap().count() >= 2);
}

#[test]
fn config_file_overrides_defaults() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("c.ini");
    fs::write(&cfg, "[experiment]\nfamily = imbalanced\nimbalance_base = 0.5\ntarget_classes = 3\nclass_fractions = 0.5, 1.0\n\n[train]\nepochs = 1\n\n[sleep]\ntime_steps = 20\n").unwrap();
    let exp = work.path().join("imb");
    ok(cli(data.path(), &exp, &["--config", cfg.to_str().unwrap(), "experiment"]));
    let grid = fs::read_to_string(exp.join("delta_grid.csv")).unwrap();
    assert!(grid.lines().count() >= 2, "{grid}");
    let manifest = fs::read_to_string(exp.join("manifest.ini")).unwrap();
    assert!(manifest.contains("time_steps = 20"));
}

#[test]
fn errors_exit_with_status_two() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let missing = work.path().join("nowhere");
    let o = cli(&missing, &work.path().join("x"), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let o = cli(data.path(), &work.path().join("y"), &["train", "--fraction", "0.001"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("minimum viable fraction"));

    let junk = work.path().join("junk.json");
    fs::write(&junk, "{\"x\": 1}").unwrap();
    let o = cli(data.path(), &work.path().join("z"), &["report", "--input", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
