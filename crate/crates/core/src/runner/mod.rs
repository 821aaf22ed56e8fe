//! Configuration-driven experiment runner behind the `rsmfc` binary.

pub mod config;
pub mod output;
mod suites;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

pub use config::{parse_config, ConfigError, ControlGridSpec, ExperimentConfig, Suite};
use output::{sha256_hex, OutDir};

/// Name of the run record; it carries timings and is left out of its own
/// file inventory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "RSMFC_SEED";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Overrides applied on top of a parsed configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory; `None` keeps the configured one.
    pub out: Option<PathBuf>,
    /// Skip writing files altogether.
    pub dry: bool,
    /// Run the reproduction at its full time resolution.
    pub paper_exact: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub wall_clock_s: f64,
    pub details: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub paper_exact: bool,
    pub suites: Vec<SuiteReport>,
    pub files: Vec<FileEntry>,
    pub passed: bool,
}

impl RunManifest {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunnerError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_config(&text)?)
}

/// Seed precedence: command-line flag, then environment, then file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: u64) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env.map(str::trim) {
        None | Some("") => Ok(file),
        Some(s) => s
            .parse()
            .map_err(|_| ConfigError(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
    }
}

/// Runs the configured suites in their fixed order and writes the outputs.
///
/// Numerical failures inside a suite mark that suite as failed; only I/O
/// problems abort the run.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<RunManifest, RunnerError> {
    let root = if options.dry {
        None
    } else {
        Some(
            options
                .out
                .clone()
                .unwrap_or_else(|| config.outputs.clone()),
        )
    };
    let mut out = OutDir::new(root.as_deref())?;
    let mut config = config.clone();
    if let Some(r) = &root {
        config.outputs = r.clone();
    }

    let mut order = config.suites.clone();
    order.sort();
    order.dedup();

    let mut ctx = suites::Ctx::new(&config, options.paper_exact);
    let mut reports = Vec::with_capacity(order.len());
    for suite in order {
        let start = Instant::now();
        let outcome = suites::run_suite(suite, &mut ctx, &mut out)?;
        reports.push(SuiteReport {
            name: suite.name().to_string(),
            passed: outcome.passed,
            wall_clock_s: start.elapsed().as_secs_f64(),
            details: outcome.details,
        });
    }

    let mut files = Vec::new();
    if let Some(r) = out.root() {
        let mut written: Vec<PathBuf> = out.written().to_vec();
        written.sort();
        written.dedup();
        for rel in written {
            let bytes = std::fs::read(r.join(&rel))?;
            files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let passed = reports.iter().all(|r| r.passed);
    let manifest = RunManifest {
        version: version(),
        config,
        paper_exact: options.paper_exact,
        suites: reports,
        files,
        passed,
    };
    if out.root().is_some() {
        let mut text = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        text.push('\n');
        out.write(MANIFEST_FILE, text.as_bytes())?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 7).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 7).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 7).unwrap(), 7);
        assert_eq!(resolve_seed(None, Some(" "), 7).unwrap(), 7);
        assert!(resolve_seed(None, Some("x"), 7).is_err());
    }
}
