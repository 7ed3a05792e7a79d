//! Runs the `mlip` binary end to end on tiny inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlip"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const TINY: &str = r#"{
  "dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2.0, "decoder_depth": 1,
  "num_patches": 16, "patch_size": 4, "mask_ratio": 0.5, "batch_size": 8,
  "tau": 0.1, "lr": 0.003, "epochs": 2, "lambdas": [1, 1, 1, 1],
  "beta": 0.1, "ot_iters": 50, "seed": 0,
  "losses": {"contrastive": "weighted", "spm": true, "mip": true},
  "data": {"train_pairs": 24, "eval_pairs": 8, "num_concepts": 6, "concepts_per_pair": 2, "noise": 0.1}
}"#;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn ipot_solve_writes_plan_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.csv");
    fs::write(&cost, "0, 1\n1, 0\n").unwrap();
    let out = mlip(&[
        "ipot-solve",
        "--cost",
        p(&cost),
        "--beta",
        "0.5",
        "--iters",
        "200",
        "--tol",
        "0",
    ]);
    let plan: Vec<Vec<f64>> = stdout(&out)
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(plan.len(), 2);
    assert!((plan[0][0] - 0.5).abs() < 1e-12 && plan[0][1] < 1e-3);
    assert!((plan[1][1] - 0.5).abs() < 1e-12 && plan[1][0] < 1e-3);
    let diag = String::from_utf8(out.stderr).unwrap();
    assert!(
        diag.contains("objective=") && diag.contains("iterations_used=200"),
        "{diag}"
    );

    let file = dir.path().join("plan.csv");
    stdout(&mlip(&["ipot-solve", "--cost", p(&cost), "--out", p(&file)]));
    assert_eq!(fs::read_to_string(&file).unwrap().lines().count(), 2);
}

#[test]
fn ipot_solve_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.csv");
    fs::write(&cost, "0, x\n").unwrap();
    let out = mlip(&["ipot-solve", "--cost", p(&cost)]);
    assert!(!out.status.success());
    fs::write(&cost, "0, 1\n").unwrap();
    assert!(!mlip(&["ipot-solve", "--cost", p(&cost), "--beta", "0"])
        .status
        .success());
}

#[test]
fn check_gradients_passes_on_micro() {
    let text = stdout(&mlip(&["check-gradients", "--scale", "micro"]));
    assert!(text.contains("integrity.phi"));
    assert!(text.trim_end().ends_with("PASS"), "{text}");
}

#[test]
fn pretrain_eval_dump_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    let summary: serde_json::Value =
        serde_json::from_str(&stdout(&mlip(&["pretrain", "--config", p(&config), "--out", p(&run)]))).unwrap();
    assert!(summary["top1_v2t"].as_f64().is_some());
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    // 24 pairs in batches of 8 for 2 epochs, plus one epoch row each.
    assert_eq!(log.lines().count(), 8);
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let ckpt = run.join("model.ckpt");
    let e: serde_json::Value =
        serde_json::from_str(&stdout(&mlip(&["eval", "--checkpoint", p(&ckpt), "--data", "9:12"]))).unwrap();
    assert_eq!(e["pairs"], 12);
    let a = e["alignment"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));

    let data = dir.path().join("data");
    stdout(&mlip(&[
        "make-data",
        "--seed",
        "9",
        "--out",
        p(&data),
        "--config",
        p(&config),
        "--pairs",
        "12",
    ]));
    assert!(data.join("manifest.json").exists() && data.join("images.f64").exists());
    let from_dir: serde_json::Value =
        serde_json::from_str(&stdout(&mlip(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]))).unwrap();
    assert_eq!(from_dir, e, "saved and regenerated datasets must agree");

    let csv = stdout(&mlip(&["dump-phi", "--checkpoint", p(&ckpt), "--masks", "3"]));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("vector,p0,") && rows[1].starts_with("phi,"));
    let log_w: f64 = rows[2..]
        .iter()
        .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap().ln())
        .sum();
    assert!((log_w - 1.0).abs() < 1e-9);

    let svg = dir.path().join("loss.svg");
    stdout(&mlip(&[
        "plot",
        "--log",
        p(&run.join("metrics.jsonl")),
        "--out",
        p(&svg),
    ]));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.matches("<polyline").count() == 5);

    let retrain = dir.path().join("run2");
    stdout(&mlip(&["pretrain", "--config", p(&config), "--out", p(&retrain)]));
    assert_eq!(
        fs::read_to_string(retrain.join("metrics.jsonl")).unwrap(),
        log,
        "training is deterministic"
    );
}

#[test]
fn config_and_data_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, TINY.replacen("\"dim\"", "\"dimension\"", 1)).unwrap();
    let out = mlip(&["pretrain", "--config", p(&config), "--out", p(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    fs::write(&config, TINY.replacen("\"tau\": 0.1", "\"tau\": -1", 1)).unwrap();
    assert!(!mlip(&["pretrain", "--config", p(&config)]).status.success());

    let out = mlip(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("missing.ckpt")),
        "--data",
        "1",
    ]);
    assert!(!out.status.success());
    let out = mlip(&["plot", "--log", p(&config)]);
    assert!(!out.status.success());
}
