//! Atomic artifact writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use volterra_bsde::table::fmt_num;

/// One pass/fail line of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes iff `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    pub fn flag(name: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub config_canonical_sha256: String,
    pub config_raw_sha256: String,
    pub seed: u64,
    pub outputs: Vec<(String, String)>,
    pub checks: &'a [Check],
    pub error: Option<String>,
}

impl Manifest<'_> {
    pub fn status(&self) -> &'static str {
        if self.error.is_some() {
            "error"
        } else if self.checks.iter().all(|c| c.pass) {
            "pass"
        } else {
            "fail"
        }
    }

    /// Plain `key=value` text; no timestamps or paths so reruns are
    /// byte-identical.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("tool=vbsde {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("subcommand={}\n", self.subcommand));
        s.push_str(&format!("config_sha256={}\n", self.config_canonical_sha256));
        s.push_str(&format!("config_raw_sha256={}\n", self.config_raw_sha256));
        s.push_str(&format!("seed={}\n", self.seed));
        for (name, hash) in &self.outputs {
            s.push_str(&format!("output={name} sha256={hash}\n"));
        }
        for c in self.checks {
            s.push_str(&format!("check={} value={} tolerance={} pass={}\n", c.name, fmt_num(c.value), fmt_num(c.tolerance), c.pass));
        }
        let passed = self.checks.iter().filter(|c| c.pass).count();
        s.push_str(&format!("checks_passed={passed}/{}\n", self.checks.len()));
        if let Some(e) = &self.error {
            s.push_str(&format!("error={}\n", e.replace('\n', " ")));
        }
        s.push_str(&format!("status={}\n", self.status()));
        s
    }
}
