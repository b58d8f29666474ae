use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgdscope::schedule::{BatchSchedule, LrSchedule};
use sgdscope_cli::fetch::MNIST_FILES;

fn sgdscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdscope"))
        .args(args)
        .env_remove("SGDSCOPE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn blobs_config(batch: &str, epochs: usize, per_class: usize) -> String {
    format!(
        r#"{{
  "model": [2, 8, 3],
  "lr": "lr0.05",
  "batch": "{batch}",
  "total_epochs": {epochs},
  "measure_interval": 3,
  "seed": 4,
  "dataset": {{"kind": "synthetic", "classes": 3, "dims": 2, "per_class": {per_class}, "spread": 0.03, "seed": 2}}
}}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn train(dir: &Path, config: &str, out: &str) -> (Output, PathBuf) {
    let cfg = write(dir, &format!("{out}.json"), config);
    let out = dir.join(out);
    (sgdscope(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), out)
}

#[test]
fn minimal_train_writes_one_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), &blobs_config("s8", 2, 20), "run");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let epochs = rows(&out.join("epochs.csv"));
    assert_eq!(epochs.len(), 2);
    let header = csv::Reader::from_path(out.join("epochs.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(
        header.iter().collect::<Vec<_>>(),
        ["epoch", "lr", "batch_size", "train_err", "test_err", "C_bar_K", "L_K"]
    );
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["param_digest"].as_str().unwrap().len(), 64);
    assert_eq!(summary["config"]["total_epochs"], 2);
}

#[test]
fn multi_step_schedule_shows_in_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), &blobs_config("s32-to-128-MS", 12, 60), "ms");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lr = LrSchedule::multi_step(0.05, 12).unwrap();
    let batch = BatchSchedule::from_shorthand("s32-to-128-MS", 12).unwrap();
    let mut seen = Vec::new();
    for r in rows(&out.join("samples.csv")) {
        let epoch: usize = r[0].parse().unwrap();
        if seen.last().map(|&(e, _)| e) != Some(epoch) {
            seen.push((epoch, r[2].parse::<usize>().unwrap()));
        }
    }
    let want: Vec<(usize, usize)> = (1..=12).map(|e| (e, batch.batch_size_at(&lr, e).unwrap())).collect();
    assert_eq!(seen, want);
    let sizes: Vec<usize> = want.iter().map(|&(_, b)| b).collect();
    // Segments 1-6, 7-9, 10-12 each restart at 32.
    assert_eq!(sizes, [32, 32, 32, 64, 64, 128, 32, 32, 64, 32, 32, 64]);
}

#[test]
fn identical_runs_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = blobs_config("s4-to-16", 5, 15);
    let (a, out_a) = train(tmp.path(), &cfg, "a");
    let (b, out_b) = train(tmp.path(), &cfg, "b");
    assert!(a.status.success() && b.status.success());
    for f in ["epochs.csv", "samples.csv"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_dataset_exits_3_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = blobs_config("s8", 2, 20).replace(
        r#"{"kind": "synthetic", "classes": 3, "dims": 2, "per_class": 20, "spread": 0.03, "seed": 2}"#,
        &format!(r#"{{"kind": "mnist", "dir": "{}"}}"#, tmp.path().join("absent").display()),
    );
    let (o, out) = train(tmp.path(), &cfg, "run");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn bad_config_exits_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), &blobs_config("s8", 2, 20).replace("\"seed\": 4", "\"seed\": -4"), "run");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 7"), "{err}");
    assert!(!out.exists());
    let (o, _) = train(tmp.path(), &blobs_config("s3-to-12", 2, 20), "run");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch"));
}

fn grid(base_model: &str) -> String {
    format!(
        r#"{{
  "base": {{
    "model": {base_model},
    "total_epochs": 3,
    "measure_interval": 4,
    "seed": 10,
    "dataset": {{"kind": "synthetic", "classes": 3, "dims": 2, "per_class": 20, "spread": 0.05, "seed": 3}}
  }},
  "batch": ["s16", 4],
  "lr": [0.1, "lr0.02"]
}}"#
    )
}

#[test]
fn sweep_writes_runs_and_sorted_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let g = write(tmp.path(), "grid.json", &grid("[2, 6, 3]"));
    let out = tmp.path().join("sweep");
    let o = sgdscope(&[
        "sweep",
        "--grid",
        g.to_str().unwrap(),
        "--seeds",
        "2",
        "--parallel",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut runs: Vec<String> =
        fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    runs.sort();
    assert_eq!(runs.len(), 8);
    assert!(runs.contains(&"s4_lr0.02_seed11".to_string()));
    let agg = rows(&out.join("aggregate.csv"));
    let keys: Vec<(String, String)> = agg.iter().map(|r| (r[0].to_string(), r[2].to_string())).collect();
    let lr = |v: f64| format!("{v:.16e}");
    assert_eq!(
        keys,
        [("s4".into(), lr(0.02)), ("s4".into(), lr(0.1)), ("s16".into(), lr(0.02)), ("s16".into(), lr(0.1))]
    );
    for r in &agg {
        let (label, rate): (&str, f64) = (&r[0], r[2].parse().unwrap());
        let errs: Vec<f64> = (10..12)
            .map(|seed| {
                let rows = rows(&out.join("runs").join(format!("{label}_lr{rate}_seed{seed}")).join("epochs.csv"));
                rows.last().unwrap()[4].parse().unwrap()
            })
            .collect();
        let mean = (errs[0] + errs[1]) / 2.0;
        let std = ((errs[0] - mean).powi(2) + (errs[1] - mean).powi(2)).sqrt();
        assert!((r[5].parse::<f64>().unwrap() - mean).abs() <= 1e-12 * mean.max(1.0));
        assert!((r[6].parse::<f64>().unwrap() - std).abs() <= 1e-12 * std.max(1.0));
        assert_eq!(&r[3], "2");
        assert_eq!(&r[4], "0");
    }
}

#[test]
fn failed_sweep_runs_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    // Input width 5 does not match the 2-dimensional blobs.
    let g = write(tmp.path(), "grid.json", &grid("[5, 6, 3]"));
    let out = tmp.path().join("sweep");
    let o = sgdscope(&["sweep", "--grid", g.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(rows(&out.join("failures.csv")).len(), 4);
    assert!(rows(&out.join("aggregate.csv")).iter().all(|r| &r[4] == "1" && r[5].is_empty()));
}

#[test]
fn selfcheck_passes() {
    let o = sgdscope(&["selfcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

fn gzip_into(dir: &Path, name: &str, bytes: &[u8]) {
    let f = fs::File::create(dir.join(format!("{name}.gz"))).unwrap();
    let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

#[test]
fn fetch_rejects_wrong_sizes_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("mirror");
    fs::create_dir(&src).unwrap();
    for (name, _) in MNIST_FILES {
        gzip_into(&src, name, b"short");
    }
    let out = tmp.path().join("mnist");
    let o = sgdscope(&["fetch-mnist", "--out", out.to_str().unwrap(), "--base-url", src.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn fetch_round_trips_a_local_mirror() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("mirror");
    fs::create_dir(&src).unwrap();
    // Size-correct stand-ins; the fetcher checks lengths, not content.
    for (i, (name, size)) in MNIST_FILES.iter().enumerate() {
        let bytes: Vec<u8> = (0..*size).map(|k| (k * 7 + i) as u8).collect();
        gzip_into(&src, name, &bytes);
    }
    let out = tmp.path().join("mnist");
    let url = format!("file://{}", src.display());
    let o = sgdscope(&["fetch-mnist", "--out", out.to_str().unwrap(), "--base-url", &url]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (i, (name, size)) in MNIST_FILES.iter().enumerate() {
        let got = fs::read(out.join(name)).unwrap();
        assert_eq!(got.len(), *size);
        assert_eq!(got[5], (35 + i) as u8);
    }
}
