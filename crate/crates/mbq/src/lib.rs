//! Files, reports and benchmarks around `mbq-core`, plus the `mbq` binary.

pub mod bench;
mod error;
pub mod format;
pub mod qckpt;
pub mod report;

pub use error::{Error, Result};

use std::path::Path;

use mbq_core::pipeline::PipelineConfig;

/// Reads a JSON pipeline config; absent fields take their defaults.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        None => PipelineConfig::default(),
        Some(p) => format::read_json(p)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
