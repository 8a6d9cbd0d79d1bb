//! Pipeline configuration and its validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::types::{default_fixed_prompts, PromptTemplate};

pub const OBJECT_THRESHOLD: f64 = 0.2;
pub const TEXTURE_THRESHOLD: f64 = 0.1;

pub fn default_blacklist() -> Vec<String> {
    [
        "crack", "scratch", "defect", "damage", "flaw", "hole", "stain", "broken", "anomaly",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Every tunable of the pipeline. Loaded from JSON; unknown keys are rejected.
///
/// `box_threshold` / `text_threshold` stay `None` until [`validate`] resolves
/// them from `texture_mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub box_threshold: Option<f64>,
    pub text_threshold: Option<f64>,
    pub texture_mode: bool,
    pub iou_threshold: f64,
    pub size_factor: f64,
    pub normal_sample_count: usize,
    pub anomalous_sample_count: usize,
    pub seed: u64,
    pub enable_tagging: bool,
    pub enable_llm: bool,
    pub enable_size_filter: bool,
    /// Derive the size threshold from each test image instead of once per
    /// category.
    pub per_image_size_threshold: bool,
    pub blacklist: Vec<String>,
    pub fixed_prompts: Vec<String>,
    pub iap_template: PromptTemplate,
    pub max_adjectives: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            box_threshold: None,
            text_threshold: None,
            texture_mode: false,
            iou_threshold: 0.5,
            size_factor: 0.8,
            normal_sample_count: 4,
            anomalous_sample_count: 8,
            seed: 111,
            enable_tagging: true,
            enable_llm: true,
            enable_size_filter: true,
            per_image_size_threshold: false,
            blacklist: default_blacklist(),
            fixed_prompts: default_fixed_prompts(),
            iap_template: PromptTemplate::default(),
            max_adjectives: 32,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Resolved box threshold (texture-mode default applied when unset).
    pub fn box_threshold(&self) -> f64 {
        self.box_threshold.unwrap_or_else(|| self.mode_threshold())
    }

    pub fn text_threshold(&self) -> f64 {
        self.text_threshold.unwrap_or_else(|| self.mode_threshold())
    }

    fn mode_threshold(&self) -> f64 {
        if self.texture_mode {
            TEXTURE_THRESHOLD
        } else {
            OBJECT_THRESHOLD
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn unit_interval(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            field,
            bound: "(0,1]",
        })
    }
}

/// Checks every invariant and fills in the texture-mode threshold defaults.
pub fn validate(config: PipelineConfig) -> Result<PipelineConfig, ConfigError> {
    let mut config = config;
    config.box_threshold = Some(config.box_threshold());
    config.text_threshold = Some(config.text_threshold());

    unit_interval("box_threshold", config.box_threshold())?;
    unit_interval("text_threshold", config.text_threshold())?;
    unit_interval("iou_threshold", config.iou_threshold)?;
    unit_interval("size_factor", config.size_factor)?;
    if config.normal_sample_count < 1 {
        return Err(ConfigError::OutOfRange {
            field: "normal_sample_count",
            bound: "[1,inf)",
        });
    }
    if config.anomalous_sample_count < 1 {
        return Err(ConfigError::OutOfRange {
            field: "anomalous_sample_count",
            bound: "[1,inf)",
        });
    }
    if config.max_adjectives < 1 {
        return Err(ConfigError::OutOfRange {
            field: "max_adjectives",
            bound: "[1,inf)",
        });
    }
    if config.fixed_prompts.is_empty() || config.fixed_prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(ConfigError::OutOfRange {
            field: "fixed_prompts",
            bound: "non-empty list of non-blank prompts",
        });
    }
    // re-checked here because the field is public
    PromptTemplate::new(config.iap_template.text())?;
    Ok(config)
}
