use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

pub mod evaluate;
pub mod pipeline;
pub mod reward;
pub mod serve;
pub mod synth;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Written manifests store absolute image roots, independent of the cwd.
pub fn absolute(p: &Path) -> Result<std::path::PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}
