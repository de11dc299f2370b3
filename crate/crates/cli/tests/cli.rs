use std::fs;
use std::path::Path;

use molt_cli::{run, EXIT_CONFIG, EXIT_FORMAT, EXIT_IO, EXIT_USAGE};

fn molt(args: &[&str]) -> i32 {
    run(std::iter::once("molt").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--seed", "7", "--classes", "4", "--samples", "40", "--test-samples", "24", "--out", p(dir)];
    args.extend_from_slice(extra);
    assert_eq!(molt(&args), 0);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--set", "epochs=3", "--set", "batch_size=8"];
    args.extend_from_slice(extra);
    assert_eq!(molt(&args), 0);
}

#[test]
fn gen_data_then_train_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, m) = (tmp.path().join("d"), tmp.path().join("m"));
    gen_data(&d, &[]);
    for f in ["train_image.mol", "train_text.mol", "test_image.mol", "test_text.mol", "manifest.cfg"] {
        assert!(d.join(f).exists(), "{f}");
    }
    train(&d, &m, &[]);
    assert!(m.join("checkpoint.molc").exists());
    let log = fs::read_to_string(m.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn eval_twice_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, m) = (tmp.path().join("d"), tmp.path().join("m"));
    gen_data(&d, &[]);
    train(&d, &m, &[]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        assert_eq!(molt(&["eval", "--model", p(&m), "--scenario", "clean", "--out", p(r)]), 0);
    }
    for f in ["report.json", "report.csv"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap());
    }
    let noisy = tmp.path().join("noisy");
    assert_eq!(
        molt(&["eval", "--model", p(&m), "--scenario", "noise", "--p", "0.1", "--target", "text", "--out", p(&noisy)]),
        0
    );
    assert!(fs::read_to_string(noisy.join("report.json")).unwrap().contains("\"target\":\"text\""));
}

#[test]
fn robust_report_has_table_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, m, b, r) = (tmp.path().join("d"), tmp.path().join("m"), tmp.path().join("b"), tmp.path().join("r"));
    gen_data(&d, &[]);
    train(&d, &m, &[]);
    train(&d, &b, &["--baseline"]);
    assert_eq!(molt(&["robust", "--model", p(&m), "--baseline", p(&b), "--out", p(&r)]), 0);
    let json = fs::read_to_string(r.join("report.json")).unwrap();
    let count = |k: &str| json.matches(&format!("\"kind\":\"{k}\"")).count();
    assert_eq!(count("clean"), 2);
    assert_eq!(count("text-absent") + count("image-absent"), 4);
    assert_eq!(count("noise"), 8);
    assert_eq!(json.matches("\"baseline\":true").count(), 7);
    assert_eq!(fs::read_to_string(r.join("report.csv")).unwrap().lines().count(), 15);
    // The full model is not a baseline checkpoint.
    assert_eq!(molt(&["robust", "--model", p(&m), "--baseline", p(&m)]), EXIT_CONFIG);
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, a) = (tmp.path().join("d"), tmp.path().join("a"));
    gen_data(&d, &[]);
    let code = molt(&[
        "ablate", "--data", p(&d), "--seeds", "0,1", "--set", "epochs=1", "--set", "batch_size=8", "--out", p(&a),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(a.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}

#[test]
fn multi_label_data_sets_the_task() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, m) = (tmp.path().join("d"), tmp.path().join("m"));
    gen_data(&d, &["--multi-label"]);
    train(&d, &m, &[]);
    assert!(fs::read_to_string(m.join("config.cfg")).unwrap().contains("task = multi"));
    let x = tmp.path().join("x");
    assert_eq!(molt(&["train", "--data", p(&d), "--out", p(&x), "--set", "task=single"]), EXIT_CONFIG);
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = tmp.path().join("out");
    assert_eq!(molt(&["train", "--frobnicate"]), EXIT_USAGE);
    assert_eq!(molt(&["eval", "--model", p(&out), "--scenario", "sideways"]), EXIT_USAGE);
    assert_eq!(molt(&["train", "--data", p(&tmp.path().join("none")), "--out", p(&out)]), EXIT_IO);

    gen_data(&d, &[]);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nlr = 4e-4\nlayers four\n").unwrap();
    assert_eq!(molt(&["train", "--data", p(&d), "--out", p(&out), "--config", p(&cfg)]), EXIT_CONFIG);
    assert_eq!(molt(&["train", "--data", p(&d), "--out", p(&out), "--set", "alpha=0", "--set", "beta=0"]), EXIT_CONFIG);

    let bytes = fs::read(d.join("train_image.mol")).unwrap();
    fs::write(d.join("train_image.mol"), &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(molt(&["train", "--data", p(&d), "--out", p(&out)]), EXIT_FORMAT);
    assert!(!out.join("checkpoint.molc").exists());
}

#[test]
fn config_file_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, m) = (tmp.path().join("d"), tmp.path().join("m"));
    gen_data(&d, &[]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# short run\nepochs = 2\nbatch_size = 10\nfbp = off\n").unwrap();
    assert_eq!(molt(&["train", "--data", p(&d), "--out", p(&m), "--config", p(&cfg)]), 0);
    let written = fs::read_to_string(m.join("config.cfg")).unwrap();
    assert!(written.contains("fbp = false"));
    assert_eq!(fs::read_to_string(m.join("train_log.csv")).unwrap().lines().count(), 3);
}
