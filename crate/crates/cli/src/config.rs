//! The optional TOML config file. Every table mirrors one subcommand; flags
//! override file values, and relative paths resolve against the file.

use std::path::{Path, PathBuf};

use navkit_core::eval::ContextSource;
use navkit_core::agent::HistoryMode;
use navkit_core::model::HttpConfig;
use navkit_core::pipeline::FilterConfig;
use serde::Deserialize;

use crate::error::CliError;

pub const ENV_CONFIG: &str = "NAVKIT_CONFIG";
pub const ENV_TOKEN: &str = "NAVKIT_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Replay,
    Scripted,
    Http,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub dataset: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub mode: Option<HistoryMode>,
    pub n: Option<usize>,
    pub include_thought: Option<bool>,
    pub allow_wide_semantic_window: Option<bool>,
    pub context_source: Option<ContextSource>,
    pub parallelism: Option<usize>,
    pub max_retries: Option<u32>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub std_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub data_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub bind: Option<String>,
    pub lease_ttl_secs: Option<u64>,
    pub token: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub evaluate: EvaluateSection,
    pub http: Option<HttpConfig>,
    pub filter: Option<FilterConfig>,
    pub reward: RewardSection,
    pub serve: ServeSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        rebase(&mut cfg.evaluate.dataset);
        rebase(&mut cfg.evaluate.script);
        rebase(&mut cfg.evaluate.output);
        rebase(&mut cfg.serve.data_dir);
        rebase(&mut cfg.serve.dataset);
        rebase(&mut cfg.serve.ui_dir);
        Ok(cfg)
    }
}

/// Parses a flag value through the type's serde names, so flags and the
/// config file accept the same spellings.
pub fn serde_value<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("navkit.toml");
        std::fs::write(
            &p,
            "[evaluate]\ndataset = \"data/manifest.json\"\nbackend = \"replay\"\nmode = \"raw_history\"\nn = 3\n\n[http]\nendpoint = \"http://x/v1/chat/completions\"\n",
        )
        .unwrap();
        let cfg = FileConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.evaluate.dataset.unwrap(), dir.path().join("data/manifest.json"));
        assert_eq!(cfg.evaluate.mode, Some(HistoryMode::RawHistory));
        assert_eq!(cfg.http.unwrap().model, "default");
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("navkit.toml");
        std::fs::write(&p, "[evaluate]\nbakend = \"replay\"\n").unwrap();
        assert!(matches!(FileConfig::load(Some(&p)), Err(CliError::Config(_))));
    }

    #[test]
    fn flag_spellings() {
        assert_eq!(serde_value::<ContextSource>("self"), Ok(ContextSource::SelfGenerated));
        assert_eq!(serde_value::<HistoryMode>("semantic_context"), Ok(HistoryMode::SemanticContext));
        assert!(serde_value::<BackendKind>("grpc").is_err());
    }
}
