//! Experiment configuration file (TOML).
//!
//! Every key has a default, unknown keys are rejected, and all random
//! streams are derived from the single top-level `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::labeling::PolicyMode;
use crate::model::{NetConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::synthdata::{SamplerConfig, SceneSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub num_classes: usize,
    pub image_size: (u32, u32),
    pub object_size_range: (f64, f64),
    pub context_correlation: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let d = SceneSpec::default();
        SceneSection {
            num_classes: d.num_classes,
            image_size: d.image_size,
            object_size_range: d.object_size_range,
            context_correlation: d.context_correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub context_fraction: f64,
    pub crop_scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub output_size: (u32, u32),
    pub eval_crop_fraction: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection {
            context_fraction: d.context_fraction,
            crop_scale_range: d.crop_scale_range,
            aspect_range: d.aspect_range,
            output_size: d.output_size,
            eval_crop_fraction: d.eval_crop_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = NetConfig::default();
        NetSection {
            channels: d.channels,
            kernel: d.kernel,
            hidden: d.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Bin counts for ECE; the first also drives MCE and the exported bins.
    pub bins: Vec<usize>,
    /// Policies trained by the full experiment, e.g. `"adaptive:1.0"`.
    pub policies: Vec<String>,
    pub scene: SceneSection,
    pub sampler: SamplerSection,
    pub net: NetSection,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            n_train: 5000,
            n_val: 1000,
            bins: vec![100, 15],
            policies: vec!["hard".into(), "uniform:0.1".into(), "adaptive:1.0".into()],
            scene: SceneSection::default(),
            sampler: SamplerSection::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Module configurations with their seeds filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub scene: SceneSpec,
    pub sampler: SamplerConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub policies: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn policy_modes(&self) -> Result<Vec<PolicyMode>> {
        self.policies
            .iter()
            .map(|p| p.parse().map_err(|e: Error| Error::Config(e.to_string())))
            .collect()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let scene = SceneSpec {
            num_classes: self.scene.num_classes,
            image_size: self.scene.image_size,
            object_size_range: self.scene.object_size_range,
            context_correlation: self.scene.context_correlation,
            seed: derive_seed(self.seed, "scene"),
        };
        let sampler = SamplerConfig {
            context_fraction: self.sampler.context_fraction,
            crop_scale_range: self.sampler.crop_scale_range,
            aspect_range: self.sampler.aspect_range,
            output_size: self.sampler.output_size,
            eval_crop_fraction: self.sampler.eval_crop_fraction,
            seed: derive_seed(self.seed, "sampler"),
        };
        let net = NetConfig {
            input_size: self.sampler.output_size,
            channels: self.net.channels.clone(),
            kernel: self.net.kernel,
            hidden: self.net.hidden,
            num_classes: self.scene.num_classes,
            init_seed: derive_seed(self.seed, "init"),
        };
        let conf = |e: Error| Error::Config(e.to_string());
        scene.validate().map_err(conf)?;
        sampler.validate().map_err(conf)?;
        net.validate().map_err(conf)?;
        self.train.validate().map_err(conf)?;
        Ok(Resolved {
            scene,
            sampler,
            net,
            train: self.train.clone(),
            policies: self.policies.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        if self.bins.is_empty() || self.bins.contains(&0) {
            return Err(Error::Config(
                "bins must be a non-empty list of positive counts".into(),
            ));
        }
        self.policy_modes()?;
        self.resolve()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.n_train, 5000);
        assert_eq!(cfg.scene.context_correlation, 0.9);
        assert_eq!(cfg.sampler.context_fraction, 0.15);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.base_lr, 0.1);
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[train]\nlearning_rate = 0.1").is_err());
    }

    #[test]
    fn nested_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\npolicies = [\"hard\"]\n[train]\nepochs = 2\n[scene]\nnum_classes = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.net.num_classes, 4);
        assert_eq!(r.net.input_size, r.sampler.output_size);
    }

    #[test]
    fn seed_reaches_every_stream() {
        let a = ExperimentConfig::default().resolve().unwrap();
        let b = ExperimentConfig {
            seed: 1,
            ..ExperimentConfig::default()
        }
        .resolve()
        .unwrap();
        assert_ne!(a.scene.seed, b.scene.seed);
        assert_ne!(a.sampler.seed, b.sampler.seed);
        assert_ne!(a.net.init_seed, b.net.init_seed);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("policies = [\"soft\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("[sampler]\ncontext_fraction = 1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("bins = []").is_err());
        assert!(ExperimentConfig::from_toml_str("[sampler]\noutput_size = [30, 30]").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }
}
