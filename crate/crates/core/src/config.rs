//! Run configuration: one JSON document covering the autoencoder,
//! transition, training, and loss-weight settings. Parsing is strict
//! (unknown fields are rejected) and every run validates the document
//! before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ae::AeConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nca::TransitionConfig;
use crate::train::{TrainConfig, CONFIG_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub ae: AeConfig,
    pub transition: TransitionConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            ae: AeConfig::default(),
            transition: TransitionConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (want {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        self.ae.validate()?;
        self.transition.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.transition.kind == crate::nca::TransitionKind::Vitca {
            // nothing latent-specific to add; embed/head dims are free
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable config")
    }

    pub fn to_pretty_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }
}

/// The published JSON-Schema document for [`RunConfig`]; `--print-config-schema`
/// emits it and the README links here.
pub const CONFIG_SCHEMA: &str = include_str!("config_schema.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_pretty_string();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus_field": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus_field"));
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"phase":"ae","epochs":3,"batch_size":4,"lr":0.001,"lr_min":0.00001,"beta1":0.9,"beta2":0.999,"adam_eps":1e-8,"seed":1,"curriculum":false,"min_severity":0.0,"max_severity":0.1,"eval_severity":0.1,"corruption":"gaussian_noise","pool_capacity":64}}"#)
                .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.ae, AeConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_schema_version_fails_validation() {
        let cfg = RunConfig { schema_version: 7, ..Default::default() };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn schema_document_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        assert_eq!(v["title"], "lnca run configuration");
    }
}
