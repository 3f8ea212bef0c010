//! Config-driven runner for the volterra-bsde pipeline.

pub mod commands;
pub mod config;
pub mod output;

use std::path::Path;

use commands::{Failure, Subcommand};
use config::ExperimentConfig;
use output::{sha256_hex, write_atomic, Manifest};

/// Process exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Parses `config_text`, runs `cmd`, writes artifacts and `manifest.txt`
/// into `out`, and returns the exit code. Diagnostics go to stderr.
pub fn execute(cmd: Subcommand, config_text: &str, config_name: &str, out: &Path, seed: Option<u64>) -> i32 {
    let mut cfg = match ExperimentConfig::parse(config_text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {config_name}: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = seed {
        cfg.mc.seed = s;
    }
    let result = commands::run(cmd, &cfg);
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(Failure::Config(m)) => {
            eprintln!("error: {config_name}: {m}");
            return EXIT_CONFIG;
        }
        Err(Failure::Check(m)) => (commands::Outcome::default(), Some(m)),
    };
    let mut outputs = Vec::new();
    for (name, body) in &outcome.files {
        if let Err(e) = write_atomic(out, name, body.as_bytes()) {
            eprintln!("error: writing {}: {e}", out.join(name).display());
            return EXIT_FAIL;
        }
        outputs.push((name.clone(), sha256_hex(body.as_bytes())));
    }
    let manifest = Manifest {
        subcommand: cmd.name(),
        config_canonical_sha256: sha256_hex(cfg.canonical().as_bytes()),
        config_raw_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.mc.seed,
        outputs,
        checks: &outcome.checks,
        error: error.clone(),
    };
    let text = manifest.render();
    if let Err(e) = write_atomic(out, "manifest.txt", text.as_bytes()) {
        eprintln!("error: writing manifest: {e}");
        return EXIT_FAIL;
    }
    for c in &outcome.checks {
        eprintln!("{} {} (value {:e}, tolerance {:e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    if let Some(m) = error {
        eprintln!("error: {m}");
        return EXIT_FAIL;
    }
    if outcome.checks.iter().all(|c| c.pass) {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}
