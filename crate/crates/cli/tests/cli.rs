use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_flexkernel")
}

/// Writes a config whose output directory is `<dir>/<out>`, followed by `body`.
fn config(dir: &Path, name: &str, out: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!("[run]\noutput_dir = {}\n{body}", dir.join(out).display());
    std::fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &str, cfg: &Path) -> Output {
    Command::new(bin()).arg(cmd).arg(cfg).env_remove("FLEXKERNEL_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fit_config(dir: &Path, out: &str, steps: usize) -> PathBuf {
    config(dir, &format!("{out}.ini"), out, &format!("[target]\nk = 17\n[optim]\nsteps = {steps}\n"))
}

#[test]
fn unknown_key_is_a_config_error_without_manifest() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "a.ini", "out", "[optim]\nstepz = 3\n");
    let o = run("fit", &cfg);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=config exit=2 message="), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!d.path().join("out").exists());
}

#[test]
fn missing_config_file_and_missing_required_key() {
    let d = TempDir::new().unwrap();
    assert_eq!(run("fit", &d.path().join("nope.ini")).status.code(), Some(2));
    let path = d.path().join("b.ini");
    std::fs::write(&path, "[optim]\nsteps = 3\n").unwrap();
    assert_eq!(run("fit", &path).status.code(), Some(2));
}

#[test]
fn failure_after_parsing_still_writes_a_manifest() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "a.ini", "out", "[target]\nkind = image\npath = /nonexistent/target.csv\n");
    let o = run("fit", &cfg);
    assert_ne!(o.status.code(), Some(0));
    let m = std::fs::read_to_string(d.path().join("out/manifest.txt")).unwrap();
    assert!(m.contains("status = error\nerror = "), "{m}");
    assert!(m.contains("target.path = /nonexistent/target.csv"));
}

#[test]
fn gradcheck_passes_on_default_seeds_and_fails_at_absurd_tolerance() {
    let d = TempDir::new().unwrap();
    let ok = run("gradcheck", &config(d.path(), "a.ini", "ok", ""));
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let csv = std::fs::read_to_string(d.path().join("ok/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let bad = run("gradcheck", &config(d.path(), "b.ini", "bad", "[gradcheck]\ntolerance = 1e-30\n"));
    assert_eq!(bad.status.code(), Some(4));
    assert!(stderr(&bad).starts_with("error kind=gradcheck exit=4"));
    let m = std::fs::read_to_string(d.path().join("bad/manifest.txt")).unwrap();
    assert!(m.contains("status = error"));
}

#[test]
fn fit_is_deterministic_and_feeds_spectrum_and_crossres() {
    let d = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = run("fit", &fit_config(d.path(), out, 40));
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok command=fit "));
    }
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/mse_trajectory.csv"), read("b/mse_trajectory.csv"));
    assert_eq!(read("a/kernel_final.csv"), read("b/kernel_final.csv"));
    let manifest = String::from_utf8(read("a/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 1\n"));
    assert!(manifest.contains("  mse_trajectory.csv\n"));
    assert!(read("a/kernel_final.pgm").starts_with(b"P5\n17 17\n255\n"));

    let ck = d.path().join("a/checkpoint");
    let body = format!("[spectrum]\ncheckpoint = {}\n", ck.display());
    let o = run("spectrum", &config(d.path(), "s.ini", "s", &body));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = String::from_utf8(read("s/spectrum.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    let fields: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(fields[0], "magnet");
    assert_eq!(fields[4], "4");
    assert!(d.path().join("s/spectrum_magnet.pgm").exists());

    let body = format!("[crossres]\ncheckpoint = {}\nsignals = 2\n", ck.display());
    let o = run("crossres", &config(d.path(), "c.ini", "c", &body));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = String::from_utf8(read("c/crossres.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("magnet,0,17,33,0.25,"));
}

#[test]
fn seed_override_from_environment() {
    let d = TempDir::new().unwrap();
    let cfg = fit_config(d.path(), "a", 2);
    let o = Command::new(bin()).arg("fit").arg(&cfg).env("FLEXKERNEL_SEED", "7").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = std::fs::read_to_string(d.path().join("a/manifest.txt")).unwrap();
    assert!(m.contains("seed = 7\n") && m.contains("run.seed = 7\n"));

    let o = Command::new(bin()).arg("fit").arg(&cfg).env("FLEXKERNEL_SEED", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resumes_from_saved_state() {
    let d = TempDir::new().unwrap();
    let common = "[data]\ntrain_size = 64\ntest_size = 32\n[model]\nwidth = 4\nmagnet_hidden = 8\n[optim]\nwarmup_epochs = 1\n";
    let o = run("train", &config(d.path(), "a.ini", "a", &format!("{common}epochs = 1\n")));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let state = d.path().join("a/state");
    let path = d.path().join("b.ini");
    let header = format!("[run]\noutput_dir = {}\nresume = {}\n", d.path().join("b").display(), state.display());
    std::fs::write(&path, format!("{header}{common}epochs = 2\n")).unwrap();
    let o = run("train", &path);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains(" epochs=2 "));
    let metrics = std::fs::read_to_string(d.path().join("b/metrics.csv")).unwrap();
    let epochs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(!epochs.is_empty() && epochs.iter().all(|e| *e == "1"), "{metrics}");
}
