//! End-to-end runs of the `slfv` binary.

use std::path::Path;
use std::process::{Command, Output};

use slfv_harness::output::{read_profile, read_rows, IdentityCsvRow};

fn slfv(dir: &Path, args: &[&str]) -> Output {
    let out_dir = format!("io.out_dir={}", dir.display());
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slfv"));
    cmd.args(args).args(["--set", &out_dir]);
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SHORT: [&str; 6] = ["--set", "sim.t_end=2", "--set", "analysis.replicates=4", "--set", "rng.seed=9"];

#[test]
fn zero_length_run_reports_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = slfv(
        dir.path(),
        &[
            "simulate",
            "--set",
            "sim.t_end=0",
            "--set",
            "analysis.replicates=1",
            "--set",
            "sim.initial_state=\"one_type_per_site\"",
        ],
    );
    ok(&out);
    let profile = read_profile(&dir.path().join("profile.csv")).unwrap();
    assert!(profile.iter().all(|&v| v == 3.0));
    let rows: Vec<IdentityCsvRow> = read_rows(&dir.path().join("identity.csv")).unwrap();
    for r in &rows {
        let want = if r.x == r.ref_site { 1.0 } else { 0.0 };
        assert_eq!(r.mean, want);
        assert_eq!(r.n_replicates, 1);
    }
}

#[test]
fn outputs_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&slfv(dir.path(), &[&["simulate"][..], &SHORT[..]].concat()));
    ok(&slfv(dir.path(), &["predict"]));
    for f in ["profile.csv", "identity.csv", "identity_replicates.csv", "theta.csv", "prediction.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# slfv ") && first.contains("config_hash="), "{f}: {first}");
    }
    let theta = std::fs::read_to_string(dir.path().join("theta.csv")).unwrap();
    assert!(theta.lines().next().unwrap().contains("profile_hash="));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(&slfv(a.path(), &[&["simulate", "-j", "1"][..], &SHORT[..]].concat()));
    ok(&slfv(b.path(), &[&["simulate", "-j", "3"][..], &SHORT[..]].concat()));
    ok(&slfv(c.path(), &[&["simulate", "-j", "1"][..], &SHORT[..]].concat()));
    for f in ["profile.csv", "identity.csv", "identity_replicates.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(x == std::fs::read(b.path().join(f)).unwrap(), "{f} differs across worker counts");
        assert!(x == std::fs::read(c.path().join(f)).unwrap(), "{f} differs across reruns");
    }
}

#[test]
fn flat_growth_predicts_a_flat_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = slfv(
        dir.path(),
        &[
            "steady-state",
            "--set",
            "model.growth={family=\"logistic_const\", kappa=8.0}",
        ],
    );
    ok(&out);
    let p = read_profile(&dir.path().join("steady_profile.csv")).unwrap();
    assert!(p.iter().all(|v| (v - 8.0).abs() < 1e-8));
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["predict.t_max=0", "sim.bogus=1", "model.u=0", "analysis.reference_sites=[101]"] {
        let out = slfv(dir.path(), &["predict", "--set", set]);
        assert_eq!(out.status.code(), Some(1), "{set}");
    }
    let out = slfv(dir.path(), &["--config", "/nonexistent/slfv.toml", "predict"]);
    assert_eq!(out.status.code(), Some(1));
    let out = slfv(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn single_replicate_has_no_coverage_band() {
    let dir = tempfile::tempdir().unwrap();
    ok(&slfv(dir.path(), &["simulate", "--set", "sim.t_end=1", "--set", "analysis.replicates=1"]));
    ok(&slfv(dir.path(), &["predict"]));
    let out = slfv(dir.path(), &["compare"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("coverage=NA"));
    let text = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert!(text.lines().skip(2).all(|l| l.ends_with(",NA")));
}

#[test]
fn mismatched_grids_are_rejected() {
    let sim = tempfile::tempdir().unwrap();
    let pred = tempfile::tempdir().unwrap();
    ok(&slfv(sim.path(), &[&["simulate"][..], &SHORT[..]].concat()));
    ok(&slfv(pred.path(), &["predict", "--set", "analysis.reference_sites=[45, 60]"]));
    let p = pred.path().join("prediction.csv");
    let out = slfv(sim.path(), &["compare", "--prediction", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = slfv(dir.path(), &["show-config", "--set", "rng.seed=5"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, &text).unwrap();
    let again = slfv(dir.path(), &["--config", path.to_str().unwrap(), "show-config"]);
    ok(&again);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}
