//! The TOML run configuration. Every section is optional and falls back to
//! the library defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use segkit_core::data::SynthConfig;
use segkit_core::experiments::{ExperimentSettings, RoleDatasets};
use segkit_core::losses::TverskyParams;
use segkit_core::trainer::{ModelSpecs, TrainConfig};
use serde::{Deserialize, Serialize};

/// `[train]`: everything in the trainer config except the loss, which has
/// its own `[loss]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub seed: u64,
    pub device_hint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_generator: d.lr_generator,
            lr_discriminator: d.lr_discriminator,
            decay_factor: d.decay_factor,
            decay_interval: d.decay_interval,
            seed: d.seed,
            device_hint: d.device_hint,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

/// Synthetic datasets generated for the experiment roles when no manifest
/// directories are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSynth {
    pub a: SynthConfig,
    pub b: SynthConfig,
    pub c: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub report_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub datasets: Option<RoleDatasets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<RoleSynth>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentSettings::default();
        Self {
            fractions: d.fractions,
            seeds: d.seeds,
            jobs: d.jobs,
            report_samples: d.report_samples,
            datasets: None,
            synthetic: None,
        }
    }
}

impl ExperimentSection {
    pub fn settings(&self, datasets: RoleDatasets) -> ExperimentSettings {
        ExperimentSettings {
            datasets,
            fractions: self.fractions.clone(),
            seeds: self.seeds.clone(),
            jobs: self.jobs,
            report_samples: self.report_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSpecs,
    pub loss: TverskyParams,
    pub train: TrainSection,
    pub data: SynthConfig,
    pub experiment: ExperimentSection,
}

/// Raised for unreadable or invalid configuration files.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_generator: t.lr_generator,
            lr_discriminator: t.lr_discriminator,
            decay_factor: t.decay_factor,
            decay_interval: t.decay_interval,
            loss_params: self.loss.clone(),
            seed: t.seed,
            device_hint: t.device_hint.clone(),
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Writes the resolved config as `resolved_config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(segkit_core::experiments::RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfigFile::default();
        let text = c.to_toml();
        assert_eq!(RunConfigFile::parse(&text, Path::new("x")).unwrap(), c);
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn sections_map_onto_library_types() {
        let text = r#"
            [model.generator]
            in_channels = 3
            depth = 3
            encoder_filters = [8, 16, 16]
            dropout_blocks = ["enc3", "dec1"]

            [model.discriminator]
            image_channels = 3
            layer_filters = [8, 16]
            strides = [2, 1]

            [loss]
            lambda_adv = 0.0
            reduction = "per_sample"

            [train]
            epochs = 2
            seed = 9

            [experiment]
            fractions = [0.5, 1.0]
            [experiment.datasets]
            a = "data/a"
            b = "data/b"
            c = "data/c"
        "#;
        let c = RunConfigFile::parse(text, Path::new("x")).unwrap();
        assert_eq!(c.model.generator.depth, 3);
        assert_eq!(c.model.generator.dropout_blocks.as_ref().unwrap().len(), 2);
        let t = c.train_config();
        assert_eq!((t.epochs, t.seed, t.loss_params.lambda_adv), (2, 9, 0.0));
        assert_eq!(t.batch_size, 16);
        assert_eq!(
            c.experiment.datasets.as_ref().unwrap().b,
            PathBuf::from("data/b")
        );
        let back = RunConfigFile::parse(&c.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[train]\nepoch = 3\n",
            "[model.generator]\nkernel = 5\n",
            "[mystery]\n",
            "[train]\nloss_params = {}\n",
        ] {
            assert!(
                RunConfigFile::parse(text, Path::new("x")).is_err(),
                "{text}"
            );
        }
    }
}
