//! End-to-end runs of every subcommand through `fracsrf_cli::run`.

use std::fs;
use std::path::Path;

use fracsrf_cli::run;
use serde_json::Value;

fn fracsrf(args: &[&str]) -> i32 {
    run(std::iter::once("fracsrf").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: [&str; 6] = ["--image-size", "8", "--train-per-class", "12", "--test-per-class", "6"];

fn gen(out: &Path, seed: &str) -> i32 {
    let mut args = vec!["gen-sinusoids", "--seed", seed, "--out", path(out)];
    args.extend(TINY);
    fracsrf(&args)
}

#[test]
fn gen_sinusoids_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(gen(&a, "7"), 0);
    assert_eq!(gen(&b, "7"), 0);
    assert_eq!(gen(&c, "8"), 0);
    assert!(a.join("meta.json").is_file());
    let bytes = |d: &Path| fs::read(d.join("data.bin")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(fracsrf(&["gen-sinusoids", "--out", out]), 1, "missing --seed");
    assert_eq!(fracsrf(&["gen-sinusoids", "--seed", "1", "--out", out, "--bogus"]), 1);
    assert_eq!(fracsrf(&["frobnicate"]), 1);
    assert_eq!(fracsrf(&["train", "--model", "resnet", "--seed", "0", "--out", out]), 1);
    let missing = dir.path().join("nothing-here");
    assert_eq!(fracsrf(&["train", "--model", "cnn", "--seed", "0", "--out", out, "--data", path(&missing)]), 1);
    assert_eq!(fracsrf(&["eval", "--checkpoint", path(&missing), "--out", out]), 1);
    assert_eq!(fracsrf(&["sweep", "--axis", "width", "--seed", "0", "--out", out]), 1);
    assert_eq!(fracsrf(&["sweep", "--values", "1-3", "--seed", "0", "--out", out]), 1);
    assert_eq!(fracsrf(&["--help"]), 0);
}

#[test]
fn train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir, eval_dir, kernels) =
        (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"), dir.path().join("kernels"));
    assert_eq!(gen(&data, "3"), 0);
    let train = ["train", "--model", "fracsrf", "--seed", "1", "--epochs", "2", "--learn-sigma"];
    let mut args = train.to_vec();
    args.extend(["--data", path(&data), "--out", path(&run_dir)]);
    assert_eq!(fracsrf(&args), 0);
    for f in ["model.json", "model.ckpt", "report.json", "data.json", "confusion.csv"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let report = json(&run_dir.join("report.json"));
    assert_eq!(report["model"], "fracsrf");
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(json(&run_dir.join("data.json"))["kind"], "export");

    let ckpt = run_dir.join("model.ckpt");
    assert_eq!(fracsrf(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&eval_dir)]), 0);
    let eval = json(&eval_dir.join("eval.json"));
    assert_eq!(eval["report"]["accuracy"], report["test"]["accuracy"]);
    let csv = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    assert_eq!(fracsrf(&["inspect-kernels", "--checkpoint", path(&ckpt), "--out", path(&kernels)]), 0);
    let index = json(&kernels.join("index.json"));
    let entries = index["kernels"].as_array().unwrap();
    // conv1 is 1 -> 32, conv2 is 32 -> 5.
    assert_eq!(entries.len(), 32 + 32 * 5);
    let first = &entries[0];
    assert_eq!(first["kind"], "fracsrf");
    assert_eq!(first["size"], 5);
    let pgm = fs::read(kernels.join(first["pgm"].as_str().unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
    assert_eq!(pgm.len(), b"P5\n5 5\n255\n".len() + 25);
    let rows = fs::read_to_string(kernels.join(first["csv"].as_str().unwrap())).unwrap();
    assert_eq!(rows.lines().count(), 5);
    assert!(rows.lines().all(|l| l.split(',').count() == 5));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--model", "srf", "--seed", "4", "--epochs", "2", "--out", path(&out)];
        args.extend(TINY);
        let code = fracsrf(&args);
        assert_eq!(code, 0);
        let mut r = json(&out.join("report.json"));
        r["mean_seconds_per_epoch"] = Value::Null;
        for e in r["epochs"].as_array_mut().unwrap() {
            e["seconds"] = Value::Null;
        }
        r
    };
    assert_eq!(metrics("a"), metrics("b"));
}

#[test]
fn config_file_feeds_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[data]\nimage_size = 8\ntrain_per_class = 10\ntest_per_class = 4\nseed = 2\n\n[train]\nepochs = 3\nlr = 0.01\n\n[model]\norder_lo = 2.0\norder_hi = 3.0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    // The flag beats the file.
    let args = ["train", "--model", "fracsrf", "--seed", "0", "--epochs", "1", "--config", path(&cfg), "--out", path(&out)];
    assert_eq!(fracsrf(&args), 0);
    let report = json(&out.join("report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(report["config"]["lr"], 0.01);
    let data = json(&out.join("data.json"));
    assert_eq!(data["spec"]["image_size"], 8);
    assert_eq!(data["spec"]["seed"], 2);

    fs::write(&cfg, "[train]\nepocs = 3\n").unwrap();
    assert_eq!(fracsrf(&args), 1, "unknown config keys are rejected");
}

#[test]
fn non_finite_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--model", "cnn", "--seed", "0", "--epochs", "3", "--lr", "1e30", "--out", path(&out)];
    args.extend(TINY);
    assert_eq!(fracsrf(&args), 2);
}

#[test]
fn exp1_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp1");
    let mut args = vec!["exp1", "--seed", "0", "--seeds", "1", "--epochs", "1", "--out", path(&exp)];
    args.extend(TINY);
    assert_eq!(fracsrf(&args), 0);
    let report = json(&exp.join("report.json"));
    assert_eq!(report["models"].as_array().unwrap().len(), 3);
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    let summary = fs::read_to_string(exp.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for m in ["cnn", "srf", "fracsrf"] {
        assert!(exp.join(format!("confusion_{m}.csv")).is_file());
    }

    let sweep = dir.path().join("sweep");
    let mut args = vec![
        "sweep", "--axis", "order_init", "--values", "1:3,6:10", "--seed", "0", "--seeds", "1", "--epochs", "1",
        "--out", path(&sweep),
    ];
    args.extend(TINY);
    assert_eq!(fracsrf(&args), 0);
    let table = fs::read_to_string(sweep.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let rows = json(&sweep.join("report.json"))["rows"].clone();
    assert_eq!(rows[1]["order_range"], serde_json::json!([6.0, 10.0]));
}

#[test]
fn gradcheck_count_and_cf() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fracsrf(&["gradcheck", "--seed", "5", "--out", path(dir.path())]), 0);
    let g = json(&dir.path().join("gradcheck.json"));
    assert!(g["tensors"].as_array().unwrap().iter().all(|t| t["max_rel_error"].as_f64().unwrap() < 1e-4));

    assert_eq!(fracsrf(&["count-params", "--seed", "0", "--out", path(dir.path())]), 0);
    let p = json(&dir.path().join("params.json"));
    let exp1 = p["exp1"].as_array().unwrap();
    // 1 -> 32 -> 5 with biases: 3·32 + 32 + 32, then 3·5·32 + 5 + 5.
    assert_eq!(exp1[2]["model"], "fracsrf");
    assert_eq!(exp1[2]["total"], 160 + 490);
    assert!(p["nin"][2]["ratio_to_plain"].as_f64().unwrap() < 0.36);

    let cf = dir.path().join("cf").join("cf.csv");
    assert_eq!(fracsrf(&["compare-cf", "--sigma", "1", "--seed", "0", "--out", path(&cf)]), 0);
    let text = fs::read_to_string(&cf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("nu,rmse,"));
    let mean: f64 = lines[10].split(',').nth(1).unwrap().parse().unwrap();
    assert!(mean < 0.22);
}
