use std::path::Path;
use std::process::{Command, Output};

use hypermixer::synthetic::SynthConfig;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypermixer-cli"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_prints_reference_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops.csv");
    let o = cli(&["flops", "--n-grid", "100", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("hypermixer=132712448"));
    assert!(stdout(&o).contains("attention=10338604"));
    assert!(std::fs::read_to_string(&out)
        .unwrap()
        .contains("100,132712448,10338604,"));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = cli(&["gradcheck", "--variant", "hypermixer_tied"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = cli(&["gradcheck", "--variant", "hypermixer_tied", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("FAILED"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"kind": "fnet", "num_layers": 1, "d": 4, "d_prime": 4},
            "train": {"learning_rate": 0.001, "dropout_p": 0.0, "batch_size": 2, "epochs": 1, "seed": 0},
            "task": {"train": "sentiment_fixture", "flavour": "x"}, "out": "o", "seed": 0}"#,
    )
    .unwrap();
    let o = cli(&["train-text", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flavour"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = cli(&["train-text", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_reports_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = cli(&[
        "bench",
        "--variants",
        "mlpmixer",
        "--n-grid",
        "64",
        "--n-max",
        "32",
        "--d",
        "8",
        "--dprime",
        "8",
        "--reps",
        "1",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32"), "{}", stderr(&o));

    let o = cli(&[
        "bench",
        "--variants",
        "hypermixer_tied,fnet",
        "--n-grid",
        "8,16",
        "--d",
        "8",
        "--dprime",
        "8",
        "--reps",
        "2",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2 + 4);
}

#[test]
fn tiny_text_run_then_evp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"kind": "hypermixer_tied", "num_layers": 1, "d": 8, "d_prime": 8},
            "train": {"learning_rate": 0.001, "dropout_p": 0.0, "batch_size": 64, "epochs": 1, "seed": 0},
            "task": {"train": "sentiment_fixture"},
            "search": {"trials": 2, "log_base": "natural"},
            "out": "out", "seed": 1}"#,
    )
    .unwrap();
    let o = cli(&["train-text", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in ["trials.jsonl", "model.ckpt", "result.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let trials = out.join("trials.jsonl");
    assert_eq!(std::fs::read_to_string(&trials).unwrap().lines().count(), 2);

    let evp = dir.path().join("evp.csv");
    let o = cli(&[
        "evp",
        "--trials",
        path(&trials),
        "--k-grid",
        "1,2",
        "--out",
        path(&evp),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: Vec<f64> = std::fs::read_to_string(&trials)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["score"]
                .as_f64()
                .unwrap()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let csv = std::fs::read_to_string(&evp).unwrap();
    let k1: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((k1 - mean).abs() < 1e-9);
}

#[test]
fn synth_writes_maps_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("synth.json");
    let cfg = SynthConfig {
        d: 8,
        d_prime: 16,
        epochs: 1,
        valid_size: 10,
        test_size: 8,
        ..SynthConfig::default()
    };
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cli(&[
            "synth",
            "--variant",
            "attention",
            "--examples",
            "20",
            "--seed",
            "3",
            "--config",
            path(&cfg_path),
            "--out",
            path(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "mse.json",
        "map_0.pgm",
        "map_0.csv",
        "true_map_0.pgm",
        "map_3.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let pgm = std::fs::read(a.join("map_0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n100 100\n255\n"));
}
