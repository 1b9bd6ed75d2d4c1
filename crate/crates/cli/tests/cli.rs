use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zcswish(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zcswish"))
        .args(args)
        .env_remove("ZCSWISH_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

fn swish(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[test]
fn params_headline_counts() {
    let o = zcswish(&["params", "--activation", "relu", "--expect", "15028644"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = zcswish(&[
        "params",
        "--activation",
        "zc-swish",
        "--expect",
        "15041316",
        "--expect-activation",
        "12672",
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0.084%"), "{}", stdout(&o));

    let o = zcswish(&["params", "--activation", "relu", "--expect", "15028645"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("mismatch"));
}

#[test]
fn params_scaled_width() {
    // Depth 8 at width/8: convs 3-8-16-32-32-64-64, head 64*1*1 -> 64 -> 100.
    let convs = [(3, 8), (8, 16), (16, 32), (32, 32), (32, 64), (64, 64)];
    let conv: usize = convs.iter().map(|&(i, o)| 9 * i * o + o).sum();
    let total = conv + 64 * 64 + 64 + 64 * 100 + 100;
    let o = zcswish(&["params", "--depth", "8", "--width-divisor", "8", "--expect", &total.to_string()]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn params_rejects_unknown_depth() {
    let o = zcswish(&["params", "--depth", "12"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("12"), "{}", stderr(&o));
}

#[test]
fn curves_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = zcswish(&[
        "curves",
        "--out",
        out.to_str().unwrap(),
        "--points",
        "101",
        "--beta-values",
        "0.5,1,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let base = csv_rows(&out.join("baseline.csv"));
    assert_eq!(base.len(), 101);
    let zero = base.iter().find(|r| r[0].parse::<f64>().unwrap() == 0.0).unwrap();
    for v in &zero[1..] {
        assert_eq!(v.parse::<f64>().unwrap().abs(), 0.0, "{zero:?}");
    }
    for r in &base {
        let x: f64 = r[0].parse().unwrap();
        assert!((r[3].parse::<f64>().unwrap() - swish(x)).abs() < 1e-12);
    }

    for name in ["sweep_c.csv", "sweep_g.csv", "sweep_beta.csv"] {
        for r in csv_rows(&out.join(name)) {
            if r[0].parse::<f64>().unwrap() == 0.0 {
                assert!(r[4].parse::<f64>().unwrap().abs() < 1e-15, "{name}: {r:?}");
            }
        }
    }
    for r in csv_rows(&out.join("sweep_beta.csv")) {
        let [x, c, beta, g, y] = [0, 1, 2, 3, 4].map(|i| r[i].parse::<f64>().unwrap());
        let s = |u: f64| 1.0 / (1.0 + (-u).exp());
        let expect = g * ((x - c) * s(beta * (x - c)) + c * s(-beta * c));
        assert!((y - expect).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn curves_rejects_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = zcswish(&["curves", "--out", dir.path().to_str().unwrap(), "--points", "0"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_and_f64_beats_f32() {
    let o = zcswish(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let (mut max64, mut max32) = (0.0f64, 0.0f64);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() == 4 {
            max64 = max64.max(cols[1].parse().unwrap());
            max32 = max32.max(cols[2].parse().unwrap());
        }
    }
    assert!(max64 > 0.0 && max64 * 10.0 < max32, "{max64} {max32}\n{text}");
}

#[test]
fn drift_zero_input_without_bias_stays_zero() {
    for act in ["relu", "gelu", "swish", "zc-swish"] {
        let o = zcswish(&["drift", "--activation", act, "--depth", "3", "--input", "zeros", "--no-bias", "--samples", "16"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!(r[1].parse::<f64>().unwrap(), 0.0, "{act}");
        }
    }
}

#[test]
fn drift_per_channel_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = zcswish(&[
        "drift",
        "--depth",
        "4",
        "--width",
        "8",
        "--samples",
        "64",
        "--per-channel",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = csv_rows(&out);
    let units = csv_rows(&dir.path().join("d.channels.csv"));
    assert_eq!(units.len(), 4 * 8);
    // The layer mean is the mean of the unit means.
    for (l, row) in layers.iter().enumerate() {
        let m: f64 = units[l * 8..(l + 1) * 8].iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / 8.0;
        assert!((row[1].parse::<f64>().unwrap() - m).abs() < 1e-12);
    }
}

#[test]
fn center_oracle_zeroes_the_mean() {
    let o = zcswish(&["center-oracle", "--samples", "5000", "--tol", "1e-9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["residual_mean"].as_f64().unwrap().abs() < 1e-9);
    assert!(v["mean_at_zero"].as_f64().unwrap() > 0.1);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.txt");
    fs::write(&file, "1.5\n-0.5\n2.0\n0.25\n").unwrap();
    let o = zcswish(&["center-oracle", "--input", file.to_str().unwrap(), "--beta", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["samples"], 4);
    assert!(v["residual_mean"].as_f64().unwrap().abs() < 1e-6);
}

const TINY: &[&str] = &[
    "train",
    "--preset",
    "desk",
    "--synthetic",
    "--per-class",
    "2",
    "--test-per-class",
    "1",
    "--width-divisor",
    "16",
    "--batch-size",
    "50",
    "--quiet",
];

fn tiny_train(extra: &[&str]) -> Output {
    let epochs: &[&str] = if extra.contains(&"--epochs") { &[] } else { &["--epochs", "1"] };
    let args: Vec<&str> = TINY.iter().chain(epochs).chain(extra).copied().collect();
    zcswish(&args)
}

#[test]
fn train_writes_run_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let o = tiny_train(&["--activation", "zc-swish", "--seeds", "3", "--output", first.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed_dir = first.join("seed-3");
    for f in ["config.json", "metrics.csv", "steps.csv", "layerstats.csv", "summary.json"] {
        assert!(seed_dir.join(f).is_file(), "{f}");
    }
    assert!(first.join("config.json").is_file());
    assert!(first.join("aggregate.json").is_file());
    let metrics = fs::read_to_string(seed_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);

    let second = dir.path().join("b");
    let o = zcswish(&[
        "train",
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--output",
        second.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(second.join("seed-3/metrics.csv")).unwrap(), metrics.as_bytes());
    assert_eq!(
        fs::read(second.join("seed-3/steps.csv")).unwrap(),
        fs::read(seed_dir.join("steps.csv")).unwrap()
    );
}

#[test]
fn train_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(&["--epochs", "0", "--output", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("seed-42/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("seed-42/steps.csv")).unwrap().lines().count(), 1);
}

#[test]
fn train_multi_seed_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(&["--seeds", "1,2", "--jobs", "2", "--no-probes", "--output", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().nth(1).unwrap().contains('±'), "{out}");
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["aggregate"]["runs"], 2);
    assert_eq!(agg["seeds"], serde_json::json!([1, 2]));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = zcswish(&["train", "--preset", "desk", "--synthetic", "--batch-size", "0", "--output", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let file = dir.path().join("cfg.json");
    fs::write(&file, r#"{"schema_version": 1, "colour": "red"}"#).unwrap();
    let o = zcswish(&["train", "--config", file.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("colour") || stderr(&o).contains("missing field"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_points_at_download() {
    let dir = tempfile::tempdir().unwrap();
    let o = zcswish(&[
        "train",
        "--preset",
        "desk",
        "--data-dir",
        dir.path().join("none").to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("train.bin") && err.contains("cs.toronto.edu"), "{err}");
}

#[test]
fn curves_accepts_negative_lists() {
    let dir = tempfile::tempdir().unwrap();
    let o = zcswish(&[
        "curves",
        "--out",
        dir.path().to_str().unwrap(),
        "--x",
        "-2,0,2",
        "--c-values",
        "-1,1",
        "--g-values",
        "-0.5,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("sweep_c.csv")).len(), 6);
    let g = csv_rows(&dir.path().join("sweep_g.csv"));
    assert!(g.iter().any(|r| r[3] == "-0.5"), "{g:?}");
}
