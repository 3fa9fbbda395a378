use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_symode");

fn symode(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn symode")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Temp dir holding a clean default dataset at `data/dataset.json`.
fn with_dataset() -> TempDir {
    let dir = TempDir::new().unwrap();
    let out = symode(dir.path(), &["simulate", "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

#[test]
fn simulate_writes_the_dataset_schema() {
    let dir = with_dataset();
    let ds = json(&dir.path().join("data/dataset.json"));
    let meta = ds["meta"].as_object().unwrap();
    let mut keys: Vec<&str> = meta.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["margin", "noise_sigma", "seed", "theta1_true", "theta2_true"]);
    let experiments = ds["experiments"].as_array().unwrap();
    assert_eq!(experiments.len(), 50);
    for e in experiments {
        assert!(e["id"].is_u64() && e["z0"].is_f64());
        let obs = e["observations"].as_array().unwrap();
        assert!(obs[0]["t"].is_f64() && obs[0]["z"].is_f64());
    }
    assert!(dir.path().join("data/config.resolved.toml").exists());
    assert!(dir.path().join("data/metadata.json").exists());
}

#[test]
fn simulate_is_reproducible_and_seeded() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", "gen.noise_sigma = 0.05\n");
    for out in ["a", "b"] {
        assert_eq!(code(&symode(dir.path(), &["simulate", "--config", "c.toml", "--out", out])), 0);
    }
    assert_eq!(code(&symode(dir.path(), &["simulate", "--config", "c.toml", "--out", "c", "--seed", "9"])), 0);
    let read = |d: &str| fs::read(dir.path().join(d).join("dataset.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(json(&dir.path().join("c/dataset.json"))["meta"]["seed"], 9);
}

#[test]
fn invalid_configuration_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "neg.toml", "gen.noise_sigma = -0.1\n");
    write(dir.path(), "unknown.toml", "train.learning_rate = 0.1\n");
    write(dir.path(), "range.toml", "gen.z0_min = -3.0\n");
    for cfg in ["neg.toml", "unknown.toml", "range.toml", "missing.toml"] {
        let out = symode(dir.path(), &["simulate", "--config", cfg, "--out", "x"]);
        assert_eq!(code(&out), 3, "{cfg}: {}", stderr(&out));
    }
    let out = symode(dir.path(), &["simulate", "--config", "range.toml", "--out", "x"]);
    assert!(stderr(&out).contains("admissible interval"));
    assert_eq!(code(&symode(dir.path(), &["no-such-command"])), 3);
}

#[test]
fn dataset_problems_exit_with_input_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "missing.toml", "data.path = \"nope.json\"\n");
    assert_eq!(code(&symode(dir.path(), &["train", "--config", "missing.toml", "--out", "x"])), 3);
    assert_eq!(code(&symode(dir.path(), &["train", "--out", "x"])), 3);

    write(dir.path(), "broken.json", "{\n  \"meta\": {\n    \"seed\": 0,\n    \"noise\": 1\n  }\n}\n");
    write(dir.path(), "broken.toml", "data.path = \"broken.json\"\n");
    let out = symode(dir.path(), &["train", "--config", "broken.toml", "--out", "x"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));

    let unordered = r#"{"meta": {"theta1_true": null, "theta2_true": null, "noise_sigma": 0.0, "seed": 0, "margin": 0.1},
        "experiments": [{"id": 0, "z0": 0.1, "observations": [{"t": 1.0, "z": 0.5}, {"t": 0.5, "z": 0.4}]}]}"#;
    write(dir.path(), "unordered.json", unordered);
    write(dir.path(), "unordered.toml", "data.path = \"unordered.json\"\n");
    let out = symode(dir.path(), &["grad-check", "--config", "unordered.toml", "--out", "x"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("experiments[0].observations[1].t"), "{}", stderr(&out));
}

#[test]
fn plain_training_converges_and_writes_the_table() {
    let dir = with_dataset();
    write(
        dir.path(),
        "c.toml",
        "data.path = \"data/dataset.json\"\nloss.a1 = 0.0\nloss.a2 = 0.0\nloss.a3 = 0.0\nloss.a4 = 0.0\n",
    );
    let out = symode(dir.path(), &["train", "--config", "c.toml", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let table = fs::read_to_string(dir.path().join("run/convergence.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "iter,theta1,theta2,mse,reg_f,reg_g,reg_h,reg_i,total,grad_norm,adjoint_fd_gap");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 11);
        assert_eq!(&cols[4..8], ["0.0", "0.0", "0.0", "0.0"]);
        let iter: usize = cols[0].parse().unwrap();
        assert_eq!(cols[10].is_empty(), !iter.is_multiple_of(10));
    }

    let report = json(&dir.path().join("run/report.json"));
    assert_eq!(report["result"]["converged"], true);
    assert!(report["param_error"].as_f64().unwrap() <= 1e-3);
    let path = report["result"]["theta_path"].as_array().unwrap();
    let last = path.last().unwrap();
    assert_eq!(report["result"]["final_params"]["theta1"], last["theta1"]);
    assert_eq!(report["config"]["data"]["path"], "data/dataset.json");
}

#[test]
fn hitting_the_iteration_cap_exits_two() {
    let dir = with_dataset();
    write(dir.path(), "c.toml", "data.path = \"data/dataset.json\"\ntrain.max_iters = 3\n");
    let out = symode(dir.path(), &["train", "--config", "c.toml", "--out", "run"]);
    assert_eq!(code(&out), 2);
    let report = json(&dir.path().join("run/report.json"));
    assert_eq!(report["result"]["stop_reason"], "max_iters");
    assert_eq!(report["result"]["theta_path"].as_array().unwrap().len(), 4);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = with_dataset();
    write(dir.path(), "c.toml", "data.path = \"data/dataset.json\"\ntrain.max_iters = 40\nloss.mode = \"literal\"\n");
    assert_eq!(code(&symode(dir.path(), &["train", "--config", "c.toml", "--out", "first"])), 2);
    let resolved = fs::read_to_string(dir.path().join("first/config.resolved.toml")).unwrap();
    assert!(resolved.lines().all(|l| !l.starts_with('[')), "flat keys only");
    assert!(resolved.contains("loss.mode = \"literal\""));
    assert_eq!(code(&symode(dir.path(), &["train", "--config", "first/config.resolved.toml", "--out", "second"])), 2);
    for f in ["report.json", "convergence.csv", "config.resolved.toml"] {
        assert_eq!(
            fs::read(dir.path().join("first").join(f)).unwrap(),
            fs::read(dir.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn json_configuration_is_accepted() {
    let dir = with_dataset();
    write(dir.path(), "c.json", r#"{"data": {"path": "data/dataset.json"}, "gradcheck": {"points": 3}}"#);
    let out = symode(dir.path(), &["grad-check", "--config", "c.json", "--out", "gc"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("gc/grad_check.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["random_0", "random_1", "random_2", "optimum", "linear"]);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn audit_reports_the_symmetry_checks() {
    let dir = TempDir::new().unwrap();
    let out = symode(dir.path(), &["audit-symmetry", "--out", "audit"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = json(&dir.path().join("audit/audit_summary.json"));
    assert_eq!(summary["all_pass"], true);
    assert!(summary["forward_max_abs"].as_f64().unwrap() <= 1e-10);
    // 2 thetas x 27 constant triples x 3 times x 5 phases
    let forward = fs::read_to_string(dir.path().join("audit/audit_forward.csv")).unwrap();
    assert_eq!(forward.lines().count(), 1 + 2 * 27 * 3 * 5);
    let backward = fs::read_to_string(dir.path().join("audit/audit_backward.csv")).unwrap();
    let nonzero_r4 = backward.lines().skip(1).filter(|l| l.starts_with("1.0,0.0,1.0,0.6,")).count();
    assert_eq!(nonzero_r4, 3);

    write(dir.path(), "tight.toml", "audit.slope_min = 2.05\n");
    let out = symode(dir.path(), &["audit-symmetry", "--config", "tight.toml", "--out", "tight"]);
    assert_eq!(code(&out), 4);
    assert_eq!(json(&dir.path().join("tight/audit_summary.json"))["all_pass"], false);
}

#[test]
fn compare_on_a_given_dataset() {
    let dir = with_dataset();
    write(dir.path(), "c.toml", "data.path = \"data/dataset.json\"\ncompare.runs = 0\ntrain.max_iters = 20\n");
    let out = symode(dir.path(), &["compare", "--config", "c.toml", "--out", "cmp"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let arms: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(arms, ["plain", "regularized"]);
    let report = json(&dir.path().join("cmp/compare_report.json"));
    assert_eq!(report["runs"][0]["dataset"], "data/dataset.json");
}
