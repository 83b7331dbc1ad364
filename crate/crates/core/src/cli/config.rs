use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ClassifierConfig, OdinParams};
use crate::contrastive::{AugmentationPolicy, Normalization, SupConConfig};
use crate::error::{Error, Result};
use crate::evalprobe::{HeadDims, ProbeConfig};
use crate::gradcon::GradconConfig;
use crate::models::BackboneConfig;
use crate::seed::derive_seed;
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every stage derives its own from it by name.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_side: usize,
    pub stripe_count: usize,
    pub stripe_contrast: f64,
    pub noise_std: f64,
    pub lesion_strength: f64,
    pub n_healthy: usize,
    pub n_healthy_holdout: usize,
    pub n_unlabeled: usize,
    pub severity_max: u32,
    pub n_train: usize,
    pub n_test_per_biomarker: usize,
    pub n_multilabel_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            image_side: synth.image_side,
            stripe_count: synth.stripe_count,
            stripe_contrast: synth.stripe_contrast,
            noise_std: synth.noise_std,
            lesion_strength: synth.lesion_strength,
            n_healthy: 800,
            n_healthy_holdout: 200,
            n_unlabeled: 2000,
            severity_max: 4,
            n_train: 500,
            n_test_per_biomarker: 200,
            n_multilabel_test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Bin count used by `pretrain --mode severity` and `ablate` by default.
    pub n_bins: usize,
    /// Bin counts compared in the report.
    pub bin_sweep: Vec<usize>,
    /// Images per extreme bin in the inspection sheet.
    pub report_k: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n_bins: 500,
            bin_sweep: vec![250, 500, 1000],
            report_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentationPolicy::default();
        Self {
            crop_scale_min: p.crop_scale.0,
            crop_scale_max: p.crop_scale.1,
            flip_prob: p.flip_prob,
            brightness: p.brightness,
            contrast: p.contrast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = HeadDims::default();
        Self {
            embedding_dim: BackboneConfig::default().embedding_dim,
            projection_hidden: h.hidden,
            projection_dim: h.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub mahalanobis_epsilon: f64,
    pub classifier: ClassifierConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let odin = OdinParams::default();
        Self {
            odin_temperature: odin.temperature,
            odin_epsilon: odin.epsilon,
            mahalanobis_epsilon: 1e-3,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// The whole experiment in one TOML file. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub gradcon: GradconConfig,
    pub labels: LabelConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: SupConConfig,
    pub probe: ProbeConfig,
    pub baselines: BaselineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.labels.n_bins == 0 || self.labels.n_bins > self.data.n_unlabeled {
            return bad("labels.n_bins must be in 1..=data.n_unlabeled");
        }
        if self.labels.bin_sweep.iter().any(|&n| n == 0 || n > self.data.n_unlabeled) {
            return bad("labels.bin_sweep entries must be in 1..=data.n_unlabeled");
        }
        if self.data.n_test_per_biomarker % 2 != 0 {
            return bad("data.n_test_per_biomarker must be even");
        }
        if !(self.gradcon.alpha >= 0.0) || !(self.pretrain.temperature > 0.0) {
            return bad("gradcon.alpha must be >= 0 and pretrain.temperature > 0");
        }
        if self.baselines.odin_temperature <= 0.0 || self.baselines.odin_epsilon < 0.0 {
            return bad("odin_temperature must be > 0 and odin_epsilon >= 0");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.run.seed, stage)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            image_side: self.data.image_side,
            stripe_count: self.data.stripe_count,
            stripe_contrast: self.data.stripe_contrast,
            noise_std: self.data.noise_std,
            lesion_strength: self.data.lesion_strength,
            seed: self.stage_seed("gen-data"),
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_side: self.data.image_side,
            embedding_dim: self.model.embedding_dim,
            bias: true,
        }
    }

    pub fn head_dims(&self) -> HeadDims {
        HeadDims {
            hidden: self.model.projection_hidden,
            output: self.model.projection_dim,
        }
    }

    pub fn policy(&self, normalization: Normalization) -> AugmentationPolicy {
        AugmentationPolicy {
            crop_scale: (self.augment.crop_scale_min, self.augment.crop_scale_max),
            flip_prob: self.augment.flip_prob,
            brightness: self.augment.brightness,
            contrast: self.augment.contrast,
            normalization,
        }
    }

    pub fn odin(&self) -> OdinParams {
        OdinParams {
            temperature: self.baselines.odin_temperature,
            epsilon: self.baselines.odin_epsilon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.gradcon.alpha, 0.03);
        assert_eq!(c.pretrain.temperature, 0.07);
        assert_eq!(c.pretrain.batch_size, 64);
        assert_eq!(c.pretrain.epochs, 25);
        assert_eq!(c.pretrain.learning_rate, 1e-3);
        assert_eq!(c.pretrain.momentum, 0.9);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("[run]\nseed = 3\n[labels]\nn_bins = 10\n").unwrap();
        assert_eq!(partial.run.seed, 3);
        assert_eq!(partial.labels.n_bins, 10);
        assert_eq!(partial.pretrain, SupConConfig::default());
        assert_ne!(partial.hash(), c.hash());
        assert_eq!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["[run]\nsede = 1\n", "[nonsense]\n", "[labels]\nn_bins = 0\n", "[data]\nn_test_per_biomarker = 3\n"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }
}
