//! Agent configuration: one TOML document, closed schema.
//!
//! ```toml
//! name = "coder"
//! model_ref = "scripted:script.json"
//! backend_mode = "xml"
//! max_iters = 30
//! enabled_extensions = ["file_edit", "bash", "view", "memory", "complete"]
//!
//! [compression]
//! recent_window = 6
//!
//! [prompt_templates]
//! match_failure = "..."
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog;
use crate::compress::CompressionPolicy;
use crate::llm::{validate_model_ref, BackendMode};
use crate::tools::command::CommandPolicySpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_max_iters() -> u32 {
    50
}

fn default_max_output_tokens() -> u32 {
    8192
}

fn default_llm_retries() -> u32 {
    2
}

fn default_workdir() -> PathBuf {
    PathBuf::from(".")
}

pub fn default_extensions() -> Vec<String> {
    ["file_edit", "bash", "view", "memory", "complete"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub name: String,
    pub model_ref: String,
    #[serde(default)]
    pub backend_mode: BackendMode,
    #[serde(default = "default_max_iters")]
    pub max_iters: u32,
    #[serde(default)]
    pub thinking_budget: u32,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Retries after a transport error before the session aborts.
    #[serde(default = "default_llm_retries")]
    pub llm_retries: u32,
    #[serde(default = "default_extensions")]
    pub enabled_extensions: Vec<String>,
    #[serde(default)]
    pub compression: CompressionPolicy,
    #[serde(default)]
    pub prompt_templates: BTreeMap<String, String>,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_policy: Option<CommandPolicySpec>,
    /// Notes root imported at session start by the `notes` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes_dir: Option<PathBuf>,
    /// Directory relative paths in this config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AgentConfig {
    pub fn new(name: &str, model_ref: &str) -> Self {
        Self {
            name: name.into(),
            model_ref: model_ref.into(),
            backend_mode: BackendMode::Xml,
            max_iters: default_max_iters(),
            thinking_budget: 0,
            max_output_tokens: default_max_output_tokens(),
            llm_retries: default_llm_retries(),
            enabled_extensions: default_extensions(),
            compression: CompressionPolicy::default(),
            prompt_templates: BTreeMap::new(),
            workdir: default_workdir(),
            command_policy: None,
            notes_dir: None,
            base_dir: PathBuf::from("."),
        }
    }

    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut config = Self::from_toml_str(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.name.trim().is_empty() {
            return invalid("name must not be empty".into());
        }
        if self.max_iters < 1 {
            return invalid("max_iters must be at least 1".into());
        }
        if self.max_output_tokens == 0 {
            return invalid("max_output_tokens must be positive".into());
        }
        validate_model_ref(&self.model_ref).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(arch) = &self.compression.architect_model_ref {
            validate_model_ref(arch).map_err(|e| ConfigError::Invalid(format!("compression.architect_model_ref: {e}")))?;
        }
        let mut seen = BTreeSet::new();
        for ext in &self.enabled_extensions {
            if !seen.insert(ext) {
                return invalid(format!("extension `{ext}` is listed twice"));
            }
            if !catalog::KNOWN_EXTENSIONS.contains(&ext.as_str()) {
                return invalid(format!("unknown extension `{ext}` (known: {})", catalog::KNOWN_EXTENSIONS.join(", ")));
            }
        }
        self.compression.validate().map_err(|e| ConfigError::Invalid(format!("compression: {e}")))?;
        if let Some(policy) = &self.command_policy {
            policy.compile().map_err(|e| ConfigError::Invalid(format!("command_policy: {e}")))?;
        }
        Ok(())
    }

    /// Resolve a config-relative path.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn template(&self, name: &str) -> &str {
        crate::prompts::template(&self.prompt_templates, name)
    }
}
