//! The TOML run configuration. Every table is optional; omitted keys take
//! the defaults below, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vaeinfo_core::eval::EVAL_BATCH;
use vaeinfo_core::latent_edit::EditSettings;
use vaeinfo_core::model::{ConvKind, ModelConfig};
use vaeinfo_core::sim::{DatasetConfig, PerturbOp};
use vaeinfo_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Every component draws from named substreams of it,
    /// and it replaces `train.seed`.
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub edit: EditSettings,
    pub change: ChangeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            out: None,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            edit: EditSettings::default(),
            change: ChangeSettings::default(),
        }
    }
}

/// Network shapes; image size and channel count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub width_scale: f64,
    pub d_a: usize,
    pub d_c: usize,
    pub m: usize,
    pub ae_depth: usize,
    pub disc_depth: usize,
    /// Defaults to 2D for CRM and 3D for HCRM.
    pub ae_conv_kind: Option<ConvKind>,
    pub ce_use_inception: bool,
    pub skip_connections: bool,
    pub base_width: usize,
    pub max_width: usize,
    pub homoscedastic: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            width_scale: 0.25,
            d_a: m.d_a,
            d_c: m.d_c,
            m: m.m,
            ae_depth: m.ae_depth,
            disc_depth: m.disc_depth,
            ae_conv_kind: None,
            ce_use_inception: m.ce_use_inception,
            skip_connections: m.skip_connections,
            base_width: m.base_width,
            max_width: m.max_width,
            homoscedastic: m.homoscedastic,
        }
    }
}

impl NetworkConfig {
    pub fn model_config(&self, size: usize, channels: usize) -> ModelConfig {
        let base = ModelConfig::for_image(size, channels, self.width_scale);
        ModelConfig {
            d_a: self.d_a,
            d_c: self.d_c,
            m: self.m,
            ae_depth: self.ae_depth,
            disc_depth: self.disc_depth,
            ae_conv_kind: self.ae_conv_kind.unwrap_or(base.ae_conv_kind),
            ce_use_inception: self.ce_use_inception,
            skip_connections: self.skip_connections,
            base_width: self.base_width,
            max_width: self.max_width,
            homoscedastic: self.homoscedastic,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Test examples rendered per model.
    pub figures: usize,
    pub batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { figures: 8, batch: EVAL_BATCH }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChangeSettings {
    /// Perturbed variants per example.
    pub k: usize,
    /// Examples taken from the test split; all when unset.
    pub n: Option<usize>,
    pub ops: Vec<PerturbOp>,
}

impl Default for ChangeSettings {
    fn default() -> Self {
        Self { k: 5, n: None, ops: vec![PerturbOp::RemoveEdge { edge: None }] }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut cfg = RunConfig { seed: 9, data: Some("d".into()), ..Default::default() };
        cfg.train.epochs = 3;
        cfg.change.ops.push(PerturbOp::AddEdge { from: Some(1), to: None });
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_toml().unwrap()).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_and_unknown_keys() {
        let cfg = RunConfig::parse("seed = 4\n[train]\nepochs = 2\nmodel_kind = \"cgan_plc\"\n").unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.batch_size), (4, 2, 32));
        assert!(RunConfig::parse("sed = 4").is_err());
        assert!(RunConfig::parse("[train]\nepoch = 2").is_err());
    }
}
