//! TOML run configuration. Every section is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! hide_label_fraction = 0.8   # selftrain without an unlabeled list
//!
//! [data.synthetic]            # used when no [data.manifest] is given
//! count = 1000
//!
//! [model]
//! dropout_prob = 0.0
//!
//! [train]
//! epochs = 30
//!
//! [selftrain]
//! iterations = 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::io::data::DatasetManifest;
use crate::metrics::CLASS_NAMES;
use crate::nn::{ModelSpec, StageConfig, DEFAULT_SE_RATIO, DEFAULT_SURVIVAL_PROB};
use crate::optim::TrainConfig;
use crate::scaling::{apply_scaling, scale_model_spec, ScalingCoefficients};
use crate::selftrain::SelfTrainConfig;
use crate::synthetic::SyntheticConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Files on disk; the synthetic generator is used when absent.
    pub manifest: Option<DatasetManifest>,
    pub synthetic: SyntheticConfig,
    /// Train/validation split of generated data.
    pub train_fraction: f64,
    /// Share of training labels hidden for self-training when the manifest
    /// has no unlabeled list.
    pub hide_label_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticConfig::default(),
            train_fraction: 0.8,
            hide_label_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub dropout_prob: f64,
    pub survival_prob: f64,
    pub se_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let base = ModelSpec::desk_scale();
        Self {
            stem_channels: base.stem_channels,
            stages: vec![
                StageConfig {
                    repeats: 1,
                    out_channels: 8,
                    expansion_ratio: 2.0,
                    stride: 1,
                },
                StageConfig {
                    repeats: 1,
                    out_channels: 16,
                    expansion_ratio: 4.0,
                    stride: 2,
                },
            ],
            num_classes: CLASS_NAMES.len(),
            input_resolution: base.input_resolution,
            dropout_prob: 0.0,
            survival_prob: DEFAULT_SURVIVAL_PROB,
            se_ratio: DEFAULT_SE_RATIO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Compound coefficient applied to the model; 0 leaves it unscaled.
    pub phi: f64,
    pub grid_step: f64,
    pub tolerance: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            phi: 0.0,
            grid_step: 0.05,
            tolerance: 0.05,
        }
    }
}

impl ScalingConfig {
    pub fn coefficients(&self) -> Result<ScalingCoefficients> {
        ScalingCoefficients::new(self.alpha, self.beta, self.gamma, self.phi)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub scaling: ScalingConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub selftrain: SelfTrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative manifest paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &mut cfg.data.manifest {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut m.labels_csv);
            fix(&mut m.images_dir);
            if let Some(u) = &mut m.unlabeled_csv {
                fix(u);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.data.synthetic.validate()?;
        self.selftrain_config().validate()?;
        self.scaling.coefficients()?;
        for (name, f) in [
            ("data.train_fraction", self.data.train_fraction),
            ("data.hide_label_fraction", self.data.hide_label_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} must lie in [0, 1]")));
            }
        }
        self.model_spec().map(|_| ())
    }

    /// Base spec from `[model]`, then compound-scaled by `[scaling]`.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let mut base = ModelSpec::from_stages(m.stem_channels, &m.stages, m.num_classes, m.input_resolution)
            .with_noise(m.dropout_prob, m.survival_prob);
        for b in &mut base.blocks {
            b.se_ratio = m.se_ratio;
        }
        base.validate()?;
        if self.scaling.phi == 0.0 {
            return Ok(base);
        }
        scale_model_spec(&base, &apply_scaling(&self.scaling.coefficients()?)?)
    }

    /// `[train]` with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn selftrain_config(&self) -> SelfTrainConfig {
        SelfTrainConfig {
            train: self.train_config(),
            ..self.selftrain.clone()
        }
    }

    /// `[augment]` at the model's input resolution.
    pub fn augment_config(&self) -> Result<AugmentConfig> {
        Ok(self.augment.clone().with_target(self.model_spec()?.input_resolution))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        assert_eq!(cfg.model_spec().unwrap().parameter_count(), ModelSpec::desk_scale().parameter_count());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 9\n[train]\nepochs = 3\noptimizer = \"sgd\"\n[scaling]\nphi = 1.0\n[selftrain]\niterations = 1\nlabel_mode = \"hard\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(cfg.selftrain_config().train.epochs, 3);
        assert_eq!(cfg.model_spec().unwrap().input_resolution, 37);
        assert!(RunConfig::from_toml("[train]\nepochs = 0").is_err());
    }
}
