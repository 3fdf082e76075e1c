//! End-to-end runs of the command-line tool.

use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_circ-ssm");

const SMALL: &str = "seed = 11
[simulate]
t_len = 16
[grid]
n = 6
[mcmc]
n_iter = 300
burn_in = 100
chains = 2
[anneal]
iterations = 8
mc_samples = 20
[validate_gp]
psi = [1.0]
dt = [0.0, 0.5]
dtheta = [0.0, 1.5707963267948966]
n_quad = 2000
";

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).arg("--out").arg(dir).output().expect("binary runs")
}

fn pipeline(dir: &Path) {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    for cmd in ["simulate", "mle", "fit", "forecast", "diagnose", "validate-gp"] {
        let out = run(dir, &[cmd, "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 13, "{names:?}");
    for n in names {
        let x = fs::read(a.path().join(&n)).unwrap();
        let y = fs::read(b.path().join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
        if n != "run.toml" {
            let text = String::from_utf8(x).unwrap();
            assert!(text.starts_with("# circ-ssm "), "{n:?} lacks the header");
            assert!(text.lines().next().unwrap().contains("seed=11"));
        }
    }
}

#[test]
fn simulate_defaults_give_101_rows() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["simulate", "--seed", "1"]);
    assert!(out.status.success());
    let text = fs::read_to_string(d.path().join("dataset.csv")).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 101);
}

#[test]
fn seed_flag_overrides_and_changes_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(a.path(), &["simulate", "--seed", "1"]).status.success());
    assert!(run(b.path(), &["simulate", "--seed", "2"]).status.success());
    let x = fs::read_to_string(a.path().join("dataset.csv")).unwrap();
    let y = fs::read_to_string(b.path().join("dataset.csv")).unwrap();
    assert_ne!(x.lines().nth(2), y.lines().nth(2));
}

#[test]
fn bad_inputs_fail_with_messages() {
    let d = tempfile::tempdir().unwrap();
    // no seed anywhere
    let out = run(d.path(), &["simulate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let out = run(d.path(), &["frobnicate", "--seed", "1"]);
    assert!(!out.status.success());

    let cfg = d.path().join("typo.toml");
    fs::write(&cfg, "seed = 1\n[mcmc]\nn_itre = 5\n").unwrap();
    let out = run(d.path(), &["fit", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_itre"));

    fs::write(d.path().join("dataset.csv"), "t,y\n").unwrap();
    let out = run(d.path(), &["fit", "--seed", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn forecast_reports_both_scales_with_detrending() {
    let d = tempfile::tempdir().unwrap();
    let mut csv = String::from("t,y\n");
    for t in 1..=20 {
        csv.push_str(&format!("{t},{}\n", 5.0 + 0.5 * t as f64 + 0.2 * (t as f64).sin()));
    }
    fs::write(d.path().join("dataset.csv"), csv).unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "seed = 3\n[data]\ndetrend = true\n[grid]\nn = 5\n[mcmc]\nn_iter = 300\nburn_in = 150\n").unwrap();
    for cmd in ["fit", "forecast"] {
        let out = run(d.path(), &[cmd, "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let est = circ_ssm::cli::read_estimates(&d.path().join("trend.txt")).unwrap();
    assert!((est[1].1 - 0.5).abs() < 0.05);
    let text = fs::read_to_string(d.path().join("forecast.txt")).unwrap();
    let get = |k: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(&format!("{k} = "))).unwrap().parse().unwrap()
    };
    // the original-scale mean sits on the trend line at t = 20
    assert!((get("mean_original") - get("mean_model") - (est[0].1 + est[1].1 * 20.0)).abs() < 1e-9);
    assert!(get("hpd_lower_model") < get("hpd_upper_model"));
}
