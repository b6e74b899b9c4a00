//! Declarative TOML configuration covering every hyperparameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DEFAULT_PERCEPTUAL;
use crate::model::ModelConfig;
use crate::params::AdamConfig;
use crate::scene::DensifyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
    pub mask: f64,
    /// Skinning weight before `skin_switch`.
    pub skin_early: f64,
    pub skin_late: f64,
    pub skin_switch: usize,
    pub isopos: f64,
    pub isocov: f64,
    pub skin_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perc: 0.01,
            mask: 0.1,
            skin_early: 10.0,
            skin_late: 0.1,
            skin_switch: 1000,
            isopos: 1.0,
            isocov: 100.0,
            skin_samples: 1024,
        }
    }
}

impl LossWeights {
    pub fn skin_at(&self, iteration: usize) -> f64 {
        if iteration < self.skin_switch {
            self.skin_early
        } else {
            self.skin_late
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub iterations: usize,
    /// Canonical gaussians, color network and frame latents start training here.
    pub gaussian_gate: usize,
    pub nonrigid_gate: usize,
    pub pose_gate: usize,
    pub eval_interval: usize,
    /// Total multiplicative network learning-rate decay over the run.
    pub network_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 15000,
            gaussian_gate: 1000,
            nonrigid_gate: 3000,
            pose_gate: 5000,
            eval_interval: 500,
            network_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub feature: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub skinning: f64,
    pub network: f64,
    pub latent: f64,
    pub latent_weight_decay: f64,
    pub pose: f64,
    /// Whether the global pose scale entry is optimized.
    pub train_pose_scale: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            feature: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            skinning: 1e-4,
            network: 1e-3,
            latent: 1e-3,
            latent_weight_decay: 0.05,
            pose: 1e-3,
            train_pose_scale: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl LearningRates {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub pose_noise_std: f64,
    pub pose_noise_prob: f64,
    pub view_max_deg: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            pose_noise_std: 0.1,
            pose_noise_prob: 0.5,
            view_max_deg: 45.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub gaussians: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { gaussians: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub bones: usize,
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    /// Largest training bend of the last joint, degrees.
    pub max_bend_deg: f64,
    /// Camera azimuth range `[-orbit, orbit]`, degrees.
    pub orbit_deg: f64,
    pub camera_distance: f64,
    pub focal: f64,
    pub gt_gaussians: usize,
    pub gt_opacity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bones: 2,
            width: 64,
            height: 64,
            train_frames: 12,
            heldout_frames: 2,
            max_bend_deg: 60.0,
            orbit_deg: 30.0,
            camera_distance: 3.5,
            focal: 70.0,
            gt_gaussians: 6000,
            gt_opacity: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub perceptual: String,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub augment: Augmentation,
    pub init: InitConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            perceptual: DEFAULT_PERCEPTUAL.to_string(),
            precision: Precision::F64,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            augment: Augmentation::default(),
            init: InitConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Extracts the offending key from a `deny_unknown_fields` message.
fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| match unknown_key(e.message()) {
            Some(k) => Error::UnknownConfigKey(k),
            None => Error::Config(e.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.precision != Precision::F64 {
            return bad("only `precision = \"f64\"` is available".into());
        }
        let s = &self.schedule;
        if !(s.gaussian_gate <= s.nonrigid_gate && s.nonrigid_gate <= s.pose_gate) {
            return bad(format!(
                "stage gates must be ordered, got {} / {} / {}",
                s.gaussian_gate, s.nonrigid_gate, s.pose_gate
            ));
        }
        let l = &self.loss;
        for (name, v) in [
            ("l1", l.l1),
            ("perc", l.perc),
            ("mask", l.mask),
            ("skin_early", l.skin_early),
            ("skin_late", l.skin_late),
            ("isopos", l.isopos),
            ("isocov", l.isocov),
        ] {
            if !(v >= 0.0) {
                return bad(format!(
                    "loss weight `{name}` must be non-negative, got {v}"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.augment.pose_noise_prob) {
            return bad("augment.pose_noise_prob must lie in [0, 1]".into());
        }
        crate::losses::perceptual_plugin(&self.perceptual)?;
        if self.synth.bones == 0 || self.synth.width == 0 || self.synth.height == 0 {
            return bad("synth needs at least one bone and a non-empty image".into());
        }
        if self.init.gaussians == 0 {
            return bad("init.gaussians must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        match Config::from_toml_str("bogus = 1") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "bogus"),
            other => panic!("{other:?}"),
        }
        match Config::from_toml_str("[loss]\nl2 = 1.0") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "l2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[schedule]\nnonrigid_gate = 10\npose_gate = 5").is_err());
        assert!(Config::from_toml_str("[loss]\nmask = -1.0").is_err());
        assert!(matches!(
            Config::from_toml_str("perceptual = \"vgg\""),
            Err(Error::UnknownPlugin(_))
        ));
        assert!(Config::from_toml_str("precision = \"f32\"").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_toml_str("[loss]\nisopos = 0.0").unwrap();
        assert_eq!(c.loss.isopos, 0.0);
        assert_eq!(c.loss.isocov, 100.0);
        assert_eq!(c.schedule, Schedule::default());
    }
}
