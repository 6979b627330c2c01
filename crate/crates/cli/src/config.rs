use std::fs;
use std::path::Path;
use std::time::Duration;

use layoutc_core::attention::{DenoiseConfig, GateConfig, GuidanceConfig};
use layoutc_core::eval::DEFAULT_SCORE_THRESHOLD;
use layoutc_core::mask::ResolutionSchedule;
use layoutc_core::prompt::PromptConfig;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_MODEL: &str = "gpt-4";

/// Settings read from `--config`; command-line flags take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prompt: PromptConfig,
    pub provider: ProviderSection,
    pub guidance: GuidanceConfig,
    pub gate: GateConfig,
    pub schedule: ResolutionSchedule,
    pub denoise: DenoiseConfig,
    pub eval: EvalSection,
    pub workers: Option<usize>,
}

/// Provider settings. Credentials are only taken from the environment.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSection {
    pub endpoint: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub temperature: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: DEFAULT_MODEL.into(),
            max_retries: 3,
            timeout_secs: 60,
            temperature: 0.0,
        }
    }
}

impl ProviderSection {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub score_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Domain(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.guidance.validate().map_err(CliError::domain)?;
        self.gate.validate().map_err(CliError::domain)?;
        if self.schedule.cross.iter().chain(&self.schedule.self_attn).any(|&p| p == 0) {
            return Err(CliError::Domain("schedule resolutions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.score_threshold) {
            return Err(CliError::Domain("eval.score_threshold must lie in [0, 1]".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Domain("workers must be positive".into()));
        }
        Ok(())
    }
}
