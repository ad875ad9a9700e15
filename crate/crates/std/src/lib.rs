//! File formats, checkpoints, metric logs, decision-boundary plots and the
//! experiment runner built on [`causalnl_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod logging;
pub mod plot;

pub use causalnl_core as core;
pub use error::{Error, Result};

/// Environment variable naming the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CAUSALNL_OUTPUT_ROOT";

/// Resolves `path` against the output root, if one is set and `path` is relative.
pub fn resolve_output(path: &std::path::Path) -> std::path::PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => std::path::Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
