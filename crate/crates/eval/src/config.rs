//! Experiment configuration, mirrored one-to-one by the `bench` JSON file.

use std::path::PathBuf;

use rawmix_core::sim::Illuminant;
use rawmix_core::MsfaPattern;
use rawmix_features::{RawMixerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorId {
    Rawmixer,
    Mlbp,
}

impl DescriptorId {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorId::Rawmixer => "rawmixer",
            DescriptorId::Mlbp => "mlbp",
        }
    }
}

/// RawMixer hyperparameters that do not follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_kernels: usize,
    pub mixer_kernel: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = RawMixerConfig::new(1, 1);
        Self {
            n_kernels: c.n_kernels,
            mixer_kernel: c.mixer_kernel,
            embed_dim: c.embed_dim,
            heads: c.heads,
            encoder_layers: c.encoder_layers,
            ff_dim: c.ff_dim,
            feature_dim: c.feature_dim,
        }
    }
}

impl ModelShape {
    pub fn to_config(&self, pattern_width: usize, num_classes: usize) -> RawMixerConfig {
        RawMixerConfig {
            pattern_width,
            n_kernels: self.n_kernels,
            mixer_kernel: self.mixer_kernel,
            embed_dim: self.embed_dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            ff_dim: self.ff_dim,
            feature_dim: self.feature_dim,
            num_classes,
        }
    }
}

/// Train-time and test-time augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    /// Add one augmented copy of every training patch.
    pub train: bool,
    /// Add one augmented copy of every test patch.
    pub test: bool,
    pub remodel_fraction: f64,
    pub noise_sigma: f64,
    pub distortion_k1: f64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            train: true,
            test: true,
            remodel_fraction: 0.1,
            noise_sigma: 0.25,
            distortion_k1: 0.05,
        }
    }
}

/// Accuracy floors checked by `bench`; unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum median accuracy in percent.
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub msfa: String,
    pub patch_size: usize,
    pub illuminant_train: String,
    pub illuminant_test: String,
    pub descriptor: DescriptorId,
    pub wb_enabled: bool,
    pub preserving_aug: bool,
    /// Unlocks `wb_enabled = false` and `preserving_aug = false`.
    pub ablation: bool,
    pub seeds: Vec<u64>,
    pub num_classes: usize,
    pub scene_height: usize,
    pub scene_width: usize,
    pub augment: AugmentPlan,
    pub training: TrainConfig,
    pub model: ModelShape,
    /// Dataset manifest to read scenes from instead of synthesizing them.
    pub dataset: Option<PathBuf>,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            msfa: "imec4x4".into(),
            patch_size: 64,
            illuminant_train: "daylight".into(),
            illuminant_test: "warm".into(),
            descriptor: DescriptorId::Rawmixer,
            wb_enabled: true,
            preserving_aug: true,
            ablation: false,
            seeds: vec![0, 1, 2],
            num_classes: 8,
            scene_height: 128,
            scene_width: 128,
            augment: AugmentPlan::default(),
            training: TrainConfig::default(),
            model: ModelShape::default(),
            dataset: None,
            thresholds: Thresholds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn pattern(&self) -> Result<MsfaPattern> {
        MsfaPattern::from_id(&self.msfa).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.pattern()?.width();
        if self.patch_size == 0 || self.patch_size % b != 0 {
            return Err(Error::Config(format!(
                "patch size {} is not a positive multiple of B = {b}",
                self.patch_size
            )));
        }
        if !self.ablation && (!self.wb_enabled || !self.preserving_aug) {
            return Err(Error::Config(
                "white balance and pattern-preserving augmentation can only be disabled with ablation = true"
                    .into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.dataset.is_none() {
            if self.num_classes < 2 {
                return Err(Error::Config("at least two classes are required".into()));
            }
            for name in [&self.illuminant_train, &self.illuminant_test] {
                Illuminant::by_name(name).map_err(|e| Error::Config(e.to_string()))?;
            }
            let half = self.scene_height / 2 / b * b;
            if half < self.patch_size || self.scene_width < self.patch_size {
                return Err(Error::Config(format!(
                    "{}x{} scenes hold no {}-pixel patch per half",
                    self.scene_width, self.scene_height, self.patch_size
                )));
            }
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.remodel_fraction) || !(a.noise_sigma >= 0.0) || !a.distortion_k1.is_finite() {
            return Err(Error::Config("augmentation parameters out of range".into()));
        }
        Ok(())
    }

    /// Column label for report tables: illuminant pair plus ablation flags.
    pub fn condition_label(&self) -> String {
        let mut label = format!("{}->{}", self.illuminant_train, self.illuminant_test);
        if !self.wb_enabled {
            label.push_str(" no-wb");
        }
        if !self.preserving_aug {
            label.push_str(" naive-aug");
        }
        label
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn misaligned_patch_size_is_rejected() {
        let cfg = ExperimentConfig {
            msfa: "imec5x5".into(),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("B = 5")));
    }

    #[test]
    fn ablation_flags_need_ablation_mode() {
        let mut cfg = ExperimentConfig {
            wb_enabled: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.ablation = true;
        cfg.validate().unwrap();
        cfg.preserving_aug = false;
        cfg.validate().unwrap();
        assert_eq!(cfg.condition_label(), "daylight->warm no-wb naive-aug");
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"msfa": "imec2x2", "seeds": [7]}"#).unwrap();
        assert_eq!(cfg.patch_size, 64);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.training.epochs, 30);
    }
}
