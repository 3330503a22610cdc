//! JSON pipeline configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_FPR_LIMIT;
use crate::model::ModelConfig;
use crate::render::RenderConfig;
use crate::toy::{ToyConfig, TOY_CLASS};
use crate::training::TrainConfig;

/// Every setting a command needs. Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub class_name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub fpr_limit: f64,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            class_name: TOY_CLASS.to_string(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            fpr_limit: DEFAULT_FPR_LIMIT,
            toy: ToyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, 0, format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::invalid("fpr_limit must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Canvas side the images and point grids are resized to.
    pub fn image_size(&self) -> usize {
        self.model.encoder.image_size
    }

    pub fn render(&self) -> Option<&RenderConfig> {
        self.model.multiview.then_some(&self.render)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"class_name": "bagel", "train": {"k_shot": 4, "epochs": 3, "seed": 9}}"#).unwrap();
        assert_eq!(c.class_name, "bagel");
        assert_eq!(c.train.k_shot, 4);
        assert_eq!(c.model, ModelConfig::default());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
    }
}
