//! Experiment front-end for the crossbar training simulator: config files,
//! training runs, parameter sweeps, conductance dumps and engine checks.

pub mod config;
pub mod convert;
pub mod oracle;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "XBAR_OUT_DIR";

/// `$XBAR_OUT_DIR` when set and non-empty, otherwise `configured`.
pub fn output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}
