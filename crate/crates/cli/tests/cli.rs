use std::path::Path;
use std::process::{Command, Output};

fn inviv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inviv"))
        .args(args)
        .env_remove("INVIV_SEED")
        .output()
        .expect("spawn inviv")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, spec: &str, mixing: &str, seed: &str, n: &str) -> Output {
    inviv(&["simulate", "--spec", spec, "--mixing", mixing, "--seed", seed, "--n-train", n, "--n-val", "100", "--out", p(dir)])
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_per_environment_files_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(simulate(&a, "builtin:d2", "builtin:poly1", "4", "300").status.success());
    assert!(simulate(&b, "builtin:d2", "builtin:poly1", "4", "300").status.success());
    for f in ["env0_train.csv", "env0_val.csv", "env1_train.csv", "env1_val.csv", "dataset.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = &csv_rows(&a.join("env0_train.csv"))[0];
    assert_eq!(header.iter().filter(|h| h.starts_with("z_")).count(), 5);
    assert_eq!(csv_rows(&a.join("env1_train.csv")).len(), 301);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 5);
}

#[test]
fn three_environment_alias_and_counterexamples() {
    let t = tempfile::tempdir().unwrap();
    let d3 = t.path().join("d3");
    assert!(simulate(&d3, "builtin:d3_threeenv", "builtin:poly1", "0", "50").status.success());
    assert!(d3.join("env2_train.csv").exists());
    let c5 = t.path().join("c5");
    assert!(simulate(&c5, "builtin:c5", "builtin:poly1", "0", "50").status.success());
    assert!(c5.join("env0_train.csv").exists() && !c5.join("env1_train.csv").exists());
    let bad = inviv(&["simulate", "--spec", "builtin:nope", "--out", p(&t.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("builtin:d2"));
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(simulate(&a, "builtin:d2", "builtin:poly1", "5", "40").status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_inviv"))
        .args(["simulate", "--spec", "builtin:d2", "--seed", "1", "--n-train", "40", "--n-val", "100", "--out", p(&b)])
        .env("INVIV_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("env0_train.csv")).unwrap(), std::fs::read(b.join("env0_train.csv")).unwrap());
}

#[test]
fn spec_files_reject_unknown_keys() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("spec.toml");
    std::fs::write(&spec, "name = \"x\"\np = 2\nbogus_key = 1\n").unwrap();
    let o = inviv(&["simulate", "--spec", p(&spec), "--out", p(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
}

#[test]
fn train_smoke_run_writes_artifacts_and_passes_check() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let model = t.path().join("model");
    assert!(simulate(&data, "builtin:d2", "builtin:poly1", "1", "200").status.success());
    let args = ["train", "--data", p(&data), "--out", p(&model), "--epochs", "1"];
    let o = inviv(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "losses.csv", "config.json", "report.json", "manifest.json"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let mut check = vec!["--check"];
    check.extend_from_slice(&args);
    let c = inviv(&check);
    assert!(c.status.success(), "{}", stderr(&c));
}

#[test]
fn train_reports_missing_data_and_divergence() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("no_such_dir");
    let o = inviv(&["train", "--data", p(&missing), "--out", p(&t.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_dir"));

    let data = t.path().join("data");
    assert!(simulate(&data, "builtin:d2", "builtin:poly1", "1", "200").status.success());
    let cfg = t.path().join("cfg.toml");
    std::fs::write(&cfg, "lr = 1e300\nepochs = 3\nbatch_size = 100\n").unwrap();
    let o = inviv(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&t.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn estimate_oracle_and_observed_instrument_methods() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert!(simulate(&data, "builtin:d2", "builtin:poly2", "2", "4000").status.success());
    let out = t.path().join("est.csv");
    let o = inviv(&["estimate", "--data", p(&data), "--methods", "2sls_z,egger_z,2sls_w_oracle", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    let get = |m: &str| rows.iter().find(|r| r[0] == m).unwrap().clone();
    for m in ["2sls_z", "egger_z"] {
        let bias: f64 = get(m)[3].parse().unwrap();
        assert!(bias.abs() > 0.05, "{m} bias {bias}");
    }
    let oracle = get("2sls_w_oracle");
    let (bias, se): (f64, f64) = (oracle[3].parse().unwrap(), oracle[4].parse().unwrap());
    assert!(bias.abs() < 3.0 * se, "bias {bias} se {se}");
    assert!(t.path().join("est.manifest.json").exists());

    let o = inviv(&["estimate", "--data", p(&data), "--methods", "2sls_what", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let t = tempfile::tempdir().unwrap();
    let o = inviv(&["experiment", "--name", "nope", "--out", p(t.path())]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["mixing_ablation", "misspec_dims", "independence_ablation", "three_env", "invariance_loss_ablation"] {
        assert!(e.contains(name), "{e}");
    }
}
