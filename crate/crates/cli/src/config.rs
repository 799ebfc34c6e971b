use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use lro_core::bench::Thresholds;
use lro_core::gateway::{BackendConfig, Price};
use lro_core::prompt::PromptOptions;
use lro_core::scale_lab::SweepConfig;
use serde::Deserialize;

pub const DEFAULT_KEY_VAR: &str = "OPENAI_API_KEY";

/// Backend section of the TOML file; every field is optional so that
/// unset values fall through to the built-in defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_context_tokens: Option<usize>,
    pub parallelism: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendSection>,
    #[serde(default)]
    pub prices: BTreeMap<String, Price>,
    #[serde(default)]
    pub templates: TemplateSection,
    #[serde(default)]
    pub prompt: PromptOptions,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub judge: Option<BackendSection>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(dir) = cfg.templates.dir.as_mut() {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    *dir = base.join(&*dir);
                }
            }
        }
        Ok(cfg)
    }
}

/// Backend overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct BackendFlags {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_context_tokens: Option<usize>,
    pub parallelism: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
}

impl BackendFlags {
    pub fn is_empty(&self) -> bool {
        self.endpoint.is_none() && self.model.is_none()
    }
}

/// Flags override the file, which overrides the defaults.
pub fn resolve_backend(file: Option<&BackendSection>, flags: &BackendFlags) -> BackendConfig {
    let d = BackendConfig::default();
    let f = file.cloned().unwrap_or_default();
    BackendConfig {
        endpoint: flags.endpoint.clone().or(f.endpoint).unwrap_or(d.endpoint),
        model: flags.model.clone().or(f.model).unwrap_or(d.model),
        temperature: flags.temperature.or(f.temperature).unwrap_or(d.temperature),
        max_context_tokens: flags
            .max_context_tokens
            .or(f.max_context_tokens)
            .unwrap_or(d.max_context_tokens),
        parallelism: flags.parallelism.or(f.parallelism).unwrap_or(d.parallelism),
        timeout: flags
            .timeout_secs
            .or(f.timeout_secs)
            .map(Duration::from_secs)
            .unwrap_or(d.timeout),
        retries: flags.retries.or(f.retries).unwrap_or(d.retries),
    }
}
