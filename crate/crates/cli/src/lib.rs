//! Run configuration, run directories and end-to-end pipelines for `mdlab`.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod pipeline;

pub use commands::{run, Command};
pub use config::{load_config, validate_config, Preset, RunConfig};
pub use error::CliError;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "MDLAB_THREADS";

/// Size the global worker pool from `MDLAB_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
