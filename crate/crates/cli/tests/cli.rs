use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vbsde");

/// A small fBm problem that keeps each run well under a second.
const SMALL: &str = "
[kernel]
family = fbm
hurst = 0.75
horizon = 1

[grids]
t0 = 0.125
n_time = 64
n_space = 200

[driver]
builtin = neg_y

[terminal]
expr = sin(x) + 0.1
growth_c = 2
lambda = 0.2

[compare]
builtin = neg_y
terminal = sin(x)
growth_c = 2
lambda = 0.2

[mc]
n_paths = 1000
seed = 5
export_paths = 3

[certify]
samples = 200
injectivity_samples = 20
";

fn run(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("exp.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("out/manifest.txt")).unwrap()
}

#[test]
fn every_subcommand_passes_and_is_reproducible() {
    for sub in ["variance", "simulate", "solve-pde", "solve-bsde", "verify", "compare", "certify"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let oa = run(a.path(), sub, SMALL, &[]);
        assert_eq!(oa.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&oa.stderr));
        let ob = run(b.path(), sub, SMALL, &["--threads", "1"]);
        assert_eq!(ob.status.code(), Some(0), "{sub}");
        let (fa, fb) = (read_outputs(&a.path().join("out")), read_outputs(&b.path().join("out")));
        assert!(fa.len() >= 2, "{sub}: {fa:?}");
        assert_eq!(fa, fb, "{sub} outputs differ between runs");
        assert!(manifest(a.path()).contains("status=pass"));
    }
}

#[test]
fn verify_lists_seven_checks() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), "verify", SMALL, &[]).status.code(), Some(0));
    let m = manifest(d.path());
    assert_eq!(m.lines().filter(|l| l.starts_with("check=")).count(), 7);
    assert!(m.contains("checks_passed=7/7"));
}

#[test]
fn missing_hurst_is_a_config_error_naming_the_key() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), "verify", &SMALL.replace("hurst = 0.75\n", ""), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernel.hurst"));
    assert!(!d.path().join("out/manifest.txt").exists());
}

#[test]
fn malformed_lines_report_their_line_number() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), "variance", &SMALL.replace("horizon = 1", "horizon 1"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn growth_budget_too_large_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), "solve-pde", &SMALL.replacen("lambda = 0.2", "lambda = 0.3", 1), &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn understated_lipschitz_constant_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("[driver]\nbuiltin = neg_y", "[driver]\nexpr = -2*y\nlipschitz = 1");
    let out = run(d.path(), "solve-pde", &cfg, &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_with_unordered_terminals_fails_naming_the_point() {
    let d = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("terminal = sin(x)\n", "terminal = sin(x) + 0.2*max(x - 1, 0)\n");
    let out = run(d.path(), "compare", &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("g1 < g2 at x ="), "{err}");
    let m = manifest(d.path());
    assert!(m.contains("status=error") && m.contains("g1 < g2 at x ="), "{m}");
}

#[test]
fn seed_override_and_config_hash() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), "variance", SMALL, &[]);
    let base = manifest(d.path());
    let hash = |m: &str, key: &str| m.lines().find(|l| l.starts_with(key)).unwrap().to_string();
    run(d.path(), "variance", &format!("# a comment\n{}", SMALL.replace("hurst = 0.75", "hurst=0.750")), &[]);
    let reformatted = manifest(d.path());
    assert_eq!(hash(&base, "config_sha256="), hash(&reformatted, "config_sha256="));
    assert_ne!(hash(&base, "config_raw_sha256="), hash(&reformatted, "config_raw_sha256="));
    run(d.path(), "variance", SMALL, &["--seed", "6"]);
    let reseeded = manifest(d.path());
    assert!(reseeded.contains("seed=6"));
    assert_ne!(hash(&base, "config_sha256="), hash(&reseeded, "config_sha256="));
}

#[test]
fn thread_count_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("exp.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = Command::new(BIN)
        .args(["variance", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("out"))
        .env("VBSDE_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN)
        .args(["variance", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("out"))
        .env("VBSDE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unreadable_config_is_exit_two() {
    let out = Command::new(BIN).args(["variance", "--config", "/nonexistent/x.cfg", "--out", "/tmp/unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
