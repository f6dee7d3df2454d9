use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbridge-dimf"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(mode: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    bin()
        .args([mode, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("SBRIDGE_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn gauss_convergence_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dim = 4\neps = [1.0, 3.0]\nn_inner = [1, 4]\nseed = 7\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("gauss-convergence", &cfg, &a, &["--jobs", "1"]), 0);
    assert_eq!(run("gauss-convergence", &cfg, &b, &["--jobs", "3"]), 0);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names.iter().filter(|n| *n != "summary.json") {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let (mut sa, mut sb) = (summary(&a), summary(&b));
    sa["config"]["output_dir"] = Value::Null;
    sb["config"]["output_dir"] = Value::Null;
    assert_eq!(sa, sb);

    let csv = std::fs::read_to_string(a.join("gauss_eps1.0_N4.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,kl_coupling_to_sb,kl_step,wall_ms");
    assert!(!csv.contains('\r'));
    let s = summary(&a);
    let run = s["runs"].as_array().unwrap().iter().find(|r| r["eps"] == 1.0 && r["n_inner"] == 4).unwrap();
    let its = run["iterations_to_threshold"].as_u64().unwrap() as usize;
    assert_eq!(lines.len() - 1, run["iterations"].as_u64().unwrap() as usize);
    let first_below = lines[1..].iter().position(|l| l.split(',').nth(1).unwrap() == "1e-10").unwrap() + 1;
    assert_eq!(first_below, its);
}

#[test]
fn unit_gaussian_correlation_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = \"gauss-convergence\"\ndim = 1\nproblem = \"standard\"\neps = [1.0]\nn_inner = [5]\nthreshold = 1e-14\n");
    let out = dir.path().join("o");
    assert_eq!(run("gauss-convergence", &cfg, &out, &[]), 0);
    let rho = summary(&out)["runs"][0]["final_correlation"].as_f64().unwrap();
    assert!((rho - 0.618034).abs() < 1e-6, "{rho}");
}

#[test]
fn grid_convergence_default_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(run("grid-convergence", &cfg, &out, &[]), 0);
    let r = &summary(&out)["runs"][0];
    assert!(r["final_tv"].as_f64().unwrap() < 1e-8);
    assert!(r["asymmetry"].as_f64().unwrap() < 1e-10);
    assert!(r["pythagorean_markovian_residual"].as_f64().unwrap() < 1e-10);
    assert!(r["pythagorean_reciprocal_residual"].as_f64().unwrap() < 1e-10);
    let csv = std::fs::read_to_string(out.join("grid_eps0.5_N3.csv")).unwrap();
    assert!(csv.starts_with("iter,tv_to_oracle,kl_coupling_to_oracle,kl_step\n"));
}

#[test]
fn oracle_check_passes_and_fails_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = \"oracle-check\"\n");
    let out = dir.path().join("o");
    assert_eq!(run("oracle-check", &cfg, &out, &[]), 0);
    let s = summary(&out);
    assert_eq!(s["passed"], true);
    assert_eq!(s["runs"].as_array().unwrap().len(), 11);

    let strict = write_config(dir.path(), "[oracle_check]\ninstances = 2\ncorrelation_tol = 1e-12\n");
    assert_eq!(run("oracle-check", &strict, &dir.path().join("s"), &[]), 2);
    assert_eq!(summary(&dir.path().join("s"))["passed"], false);
}

#[test]
fn bridge_check_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dim = 1\nn_inner = [2]\n[bridge_check]\nsamples = 20000\n");
    let out = dir.path().join("o");
    assert_eq!(run("bridge-check", &cfg, &out, &["--seed", "3"]), 0);
    assert!(summary(&out)["runs"][0]["composition_residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let unknown = write_config(dir.path(), "epsilon = [1.0]\n");
    assert_eq!(run("gauss-convergence", &unknown, &out, &[]), 1);
    let wrong_mode = write_config(dir.path(), "mode = \"grid-convergence\"\n");
    assert_eq!(run("gauss-convergence", &wrong_mode, &out, &[]), 1);
    assert_eq!(run("gauss-convergence", &dir.path().join("missing.toml"), &out, &[]), 1);
    assert_eq!(run("not-a-mode", &wrong_mode, &out, &[]), 1);
    assert_eq!(run("grid-convergence", &wrong_mode, &out, &["--jobs", "0"]), 1);
    assert!(!out.exists());
}
