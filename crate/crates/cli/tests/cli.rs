use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msa_cli::{weights, RunConfig};
use msa_core::data::make_binary_regression;
use msa_core::layers::LayerSpec;
use msa_core::Layer;
use serde_json::{json, Value};

fn msa(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msa"))
        .args(args.iter().map(|p| p.as_os_str()))
        .env_remove("MSA_OUTPUT_DIR")
        .output()
        .expect("spawn msa")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn synthetic_config(dir: &Path, epochs: usize) -> Value {
    json!({
        "network": [{"type": "binary", "out": 3}],
        "optimizer": {"algorithm": "binary-msa", "epochs": epochs, "batch_size": 500,
                      "alpha0": 0.0, "alpha_decay": 1.0, "seed": 4},
        "dataset": {"kind": "synthetic", "d0": 6, "d1": 3, "samples": 500, "seed": 11},
        "loss": "mean-square",
        "output_dir": dir.join("out"),
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MSA_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let found = dir.join("t10k-labels-idx1-ubyte.gz").is_file()
        || dir.join("t10k-labels-idx1-ubyte").is_file();
    if !found {
        eprintln!(
            "MNIST not found in {}; run scripts/fetch_mnist.sh",
            dir.display()
        );
    }
    found.then_some(dir)
}

#[test]
fn zero_epochs_writes_header_and_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_config(dir.path(), 0));
    let out = msa(&[Path::new("train"), &cfg_path]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out_dir = dir.path().join("out");
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("epoch,step,j_train"));
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(json, json!([]));

    let cfg = RunConfig::load(&cfg_path).unwrap();
    assert_eq!(
        weights::load(&out_dir.join("weights.msaw")).unwrap(),
        cfg.build_network().unwrap()
    );

    let resolved: Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("config.resolved.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["init_seed"], json!(4));
    assert_eq!(
        resolved["optimizer"]["rho"],
        json!({"rule": "heuristic", "fraction": 0.5})
    );
}

#[test]
fn training_then_eval_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_config(dir.path(), 10));
    let out = msa(&[Path::new("train"), &cfg_path]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 10/10"));

    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let weights_path = dir.path().join("out/weights.msaw");

    let eval = stdout_json(&msa(&[
        Path::new("eval"),
        &cfg_path,
        &weights_path,
        Path::new("--split"),
        Path::new("train"),
    ]));
    assert_eq!(eval["samples"], json!(500));
    let last: Vec<String> = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(String::from)
        .collect();
    assert_eq!(
        eval["objective"].as_f64().unwrap(),
        last[2].parse::<f64>().unwrap()
    );

    let diag = stdout_json(&msa(&[
        Path::new("diagnose"),
        &cfg_path,
        &weights_path,
        Path::new("--perturbations"),
        Path::new("5"),
    ]));
    assert_eq!(diag["error_estimates"].as_array().unwrap().len(), 5);
    assert!(dir.path().join("out/diagnose.json").is_file());
}

#[test]
fn planted_weights_evaluate_to_zero_and_satisfy_the_maximum_principle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_config(dir.path(), 0));
    let problem = make_binary_regression(6, 3, 500, 11).unwrap();
    let net = msa_core::Network::new(6, vec![Layer::binary(problem.theta_star.clone()).unwrap()])
        .unwrap();
    let weights_path = dir.path().join("planted.msaw");
    weights::save(&net, &weights_path).unwrap();

    let eval = stdout_json(&msa(&[
        Path::new("eval"),
        &cfg_path,
        &weights_path,
        Path::new("--split"),
        Path::new("train"),
    ]));
    assert_eq!(eval["objective"], json!(0.0));
    assert_eq!(eval["error_rate"], json!(0.0));

    let diag = stdout_json(&msa(&[
        Path::new("diagnose"),
        &cfg_path,
        &weights_path,
        Path::new("--perturbations"),
        Path::new("0"),
        Path::new("--samples"),
        Path::new("500"),
    ]));
    assert_eq!(diag["error_estimates"], json!([]));
    for layer in diag["pmp"]["layers"].as_array().unwrap() {
        assert_eq!(layer["hamiltonian_gap"], json!(0.0));
    }
}

#[test]
fn random_weights_give_non_negative_penalties() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(dir.path(), 0);
    cfg["network"] = json!([
        {"type": "dense", "out": 5, "bias": true},
        {"type": "activation", "kind": "tanh"},
        {"type": "dense", "out": 3}
    ]);
    cfg["optimizer"]["algorithm"] = json!("gradient-msa");
    let cfg_path = write_config(dir.path(), &cfg);
    let weights_path = dir.path().join("w.msaw");
    weights::save(
        &RunConfig::load(&cfg_path).unwrap().build_network().unwrap(),
        &weights_path,
    )
    .unwrap();

    let diag = stdout_json(&msa(&[
        Path::new("diagnose"),
        &cfg_path,
        &weights_path,
        Path::new("--perturbations"),
        Path::new("30"),
        Path::new("--samples"),
        Path::new("50"),
    ]));
    let reports = diag["error_estimates"].as_array().unwrap();
    assert_eq!(reports.len(), 30);
    for r in reports {
        for key in ["penalty_f", "penalty_grad_f", "penalty_grad_l"] {
            assert!(r[key].as_f64().unwrap() >= 0.0, "{key} in {r}");
        }
    }
}

#[test]
fn output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_config(dir.path(), 1));
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_msa"))
        .arg("train")
        .arg(&cfg_path)
        .env("MSA_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("metrics.csv").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &synthetic_config(dir.path(), 0));
    let missing = dir.path().join("missing.msaw");
    assert_eq!(
        msa(&[Path::new("eval"), &cfg_path, &missing]).status.code(),
        Some(2)
    );

    // Config naming an optimizer that cannot train its layers.
    let mut bad = synthetic_config(dir.path(), 1);
    bad["optimizer"]["algorithm"] = json!("ternary-msa");
    let bad_dir = dir.path().join("bad");
    std::fs::create_dir(&bad_dir).unwrap();
    let out = msa(&[Path::new("train"), &write_config(&bad_dir, &bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert_eq!(
        msa(&[Path::new("train"), &dir.path().join("nope.json")])
            .status
            .code(),
        Some(2)
    );

    // Weights of a different architecture.
    let other = dir.path().join("other.msaw");
    let net = msa_core::layers::build_network(6, &[LayerSpec::Binary { out: 2 }], 0).unwrap();
    weights::save(&net, &other).unwrap();
    assert_eq!(
        msa(&[
            Path::new("eval"),
            &cfg_path,
            &other,
            Path::new("--split"),
            Path::new("train")
        ])
        .status
        .code(),
        Some(2)
    );

    // Synthetic data has no test split.
    let good = dir.path().join("good.msaw");
    weights::save(
        &RunConfig::load(&cfg_path).unwrap().build_network().unwrap(),
        &good,
    )
    .unwrap();
    assert_eq!(
        msa(&[Path::new("eval"), &cfg_path, &good]).status.code(),
        Some(2)
    );

    // Missing dataset files are a runtime failure.
    let mut no_data = synthetic_config(dir.path(), 1);
    no_data["dataset"] = json!({"kind": "mnist", "dir": dir.path().join("empty")});
    no_data["network"] = json!([{"type": "binary", "out": 10}]);
    let nd_dir = dir.path().join("nd");
    std::fs::create_dir(&nd_dir).unwrap();
    let out = msa(&[Path::new("train"), &write_config(&nd_dir, &no_data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fetch_mnist"));
}

#[test]
fn zero_ternary_net_guesses_first_class_on_mnist() {
    let Some(mnist) = mnist_dir() else { return };
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "network": [{"type": "ternary", "out": 10}, {"type": "batch_norm"}],
        "optimizer": {"algorithm": "ternary-msa"},
        "dataset": {"kind": "mnist", "dir": mnist},
        "loss": "squared-hinge",
        "output_dir": dir.path().join("out"),
    });
    let cfg_path = write_config(dir.path(), &cfg);
    let mut net = RunConfig::load(&cfg_path).unwrap().build_network().unwrap();
    net.replace_layer(
        0,
        Layer::ternary(msa_core::Matrix::zeros(10, 784), 1e-7).unwrap(),
    )
    .unwrap();
    let weights_path = dir.path().join("zero.msaw");
    weights::save(&net, &weights_path).unwrap();

    let eval = stdout_json(&msa(&[
        Path::new("eval"),
        &cfg_path,
        &weights_path,
        Path::new("--split"),
        Path::new("test"),
    ]));
    assert_eq!(eval["samples"], json!(10000));
    let err = eval["error_rate"].as_f64().unwrap();
    assert!((err - 0.9).abs() <= 0.02, "error rate {err}");
}

#[test]
fn ternary_training_reports_sparsity() {
    let Some(mnist) = mnist_dir() else { return };
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "network": [{"type": "ternary", "out": 32}, {"type": "batch_norm"},
                    {"type": "activation", "kind": "relu"},
                    {"type": "ternary", "out": 10}, {"type": "batch_norm"}],
        "optimizer": {"algorithm": "ternary-msa", "epochs": 2},
        "dataset": {"kind": "mnist", "dir": mnist, "train_limit": 2000, "evaluate_test": false},
        "loss": "squared-hinge",
        "output_dir": dir.path().join("out"),
    });
    let out = msa(&[Path::new("train"), &write_config(dir.path(), &cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut rd = csv::Reader::from_path(dir.path().join("out/metrics.csv")).unwrap();
    let col = rd
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "nonzero_fraction")
        .unwrap();
    let rows: Vec<_> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let nz: f64 = rows[1][col].parse().unwrap();
    assert!(nz > 0.0 && nz < 1.0, "nonzero fraction {nz}");
    assert_eq!(rows[1][col + 1].split(';').count(), 2);
}
