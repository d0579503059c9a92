//! Command-line and HTTP front ends over one engine.

pub mod cli;
pub mod http;
pub mod ops;

use std::path::Path;

use ragops_core::config::DeploymentConfig;

/// Load the config at `path`; a missing file at the default location means defaults.
pub fn load_config(path: &Path, explicit: bool) -> Result<DeploymentConfig, String> {
    if !path.exists() && !explicit {
        return Ok(DeploymentConfig::default());
    }
    DeploymentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))
}
