//! One TOML document that drives every pipeline stage.
//!
//! Users set a single global `seed`; [`ExperimentConfig::resolved`] derives
//! every component seed from it, so a resolved snapshot reloads to the same
//! run. Missing keys take their defaults; `version` must match
//! [`CONFIG_VERSION`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetConfig;
use crate::evalkit::config_hash;
use crate::fingerprint::TrainConfig;
use crate::jamming::JammingConfig;
use crate::loopback::{sample_profile, ChannelConfig, Severity, TransmitterProfile, PRESET_NAMES};
use crate::poisoning::PoisonConfig;
use crate::spoofing::{GanConfig, SpoofGdConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Share of legit pairs the acceptance threshold should accept.
    pub target_tpr: f64,
    pub update_threshold: f64,
    /// Stored references per transmitter.
    pub capacity: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_tpr: 0.95,
            update_threshold: 0.05,
            capacity: 1,
        }
    }
}

/// The attacker's own transmitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackerConfig {
    pub profile_id: u64,
    pub profile_seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            profile_id: 0,
            profile_seed: 42,
        }
    }
}

impl AttackerConfig {
    pub fn profile(&self) -> TransmitterProfile {
        sample_profile(self.profile_id, Severity::Attacker, self.profile_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JammingExperiment {
    pub signal: JammingConfig,
    pub ratio_step_db: f64,
    pub trials_per_ratio: usize,
}

impl Default for JammingExperiment {
    fn default() -> Self {
        Self {
            signal: JammingConfig {
                channel: ChannelConfig::preset("best_case").expect("bundled preset"),
                ..JammingConfig::default()
            },
            ratio_step_db: 5.0,
            trials_per_ratio: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisoningExperiment {
    pub base: PoisonConfig,
    /// Origin/target message pairs, drawn from different transmitters.
    pub pairs: usize,
    pub random_targets: usize,
    pub accept_grid: Vec<f64>,
    pub update_grid: Vec<f64>,
}

impl Default for PoisoningExperiment {
    fn default() -> Self {
        Self {
            base: PoisonConfig::default(),
            pairs: 20,
            random_targets: 10,
            accept_grid: vec![0.2, 0.25, 0.3, 0.4, 0.5],
            update_grid: vec![0.02, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpoofGdExperiment {
    pub gd: SpoofGdConfig,
    /// Channel presets the replays travel through.
    pub channels: Vec<String>,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl Default for SpoofGdExperiment {
    fn default() -> Self {
        Self {
            gd: SpoofGdConfig::default(),
            channels: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
            train_pairs: 128,
            test_pairs: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanExperiment {
    pub train: GanConfig,
    /// Headers of the single legit transmitter the GAN targets.
    pub dataset: DatasetConfig,
    pub train_messages: usize,
}

impl Default for GanExperiment {
    fn default() -> Self {
        Self {
            train: GanConfig::default(),
            dataset: DatasetConfig {
                transmitters: 1,
                messages_per_transmitter: 700,
                first_id: 1_000_000,
                ..DatasetConfig::default()
            },
            train_messages: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub embedder: TrainConfig,
    pub calibration: CalibrationConfig,
    pub attacker: AttackerConfig,
    pub jamming: JammingExperiment,
    pub poisoning: PoisoningExperiment,
    pub spoof_gd: SpoofGdExperiment,
    pub gan: GanExperiment,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: "runs/default".into(),
            dataset: DatasetConfig::default(),
            embedder: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            attacker: AttackerConfig::default(),
            jamming: JammingExperiment::default(),
            poisoning: PoisoningExperiment::default(),
            spoof_gd: SpoofGdExperiment::default(),
            gan: GanExperiment::default(),
        }
    }
}

/// Independent seed streams derived from the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Dataset = 1,
    Profiles,
    Embedder,
    Jamming,
    Poisoning,
    SpoofGd,
    GanData,
    Gan,
    Evaluate,
    Calibrate,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: cfg.version });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.calibration;
        if !(c.target_tpr > 0.0 && c.target_tpr < 1.0) {
            return Err(ConfigError::Invalid("calibration.target_tpr must lie in (0, 1)".into()));
        }
        if !(c.update_threshold >= 0.0) || c.capacity == 0 {
            return Err(ConfigError::Invalid("calibration needs update_threshold >= 0 and capacity >= 1".into()));
        }
        if !(self.jamming.ratio_step_db > 0.0) || self.jamming.trials_per_ratio == 0 {
            return Err(ConfigError::Invalid("jamming needs a positive ratio step and trial count".into()));
        }
        for name in &self.spoof_gd.channels {
            if !PRESET_NAMES.contains(&name.as_str()) {
                return Err(ConfigError::Invalid(format!("unknown channel preset {name:?}")));
            }
        }
        if self.gan.dataset.transmitters != 1 {
            return Err(ConfigError::Invalid("the GAN dataset must hold exactly one transmitter".into()));
        }
        let gan_total = self.gan.dataset.messages_per_transmitter as usize;
        if self.gan.train_messages >= gan_total {
            return Err(ConfigError::Invalid("gan.train_messages must leave held-out headers".into()));
        }
        let main_end = self.dataset.first_id + u64::from(self.dataset.transmitters) * u64::from(self.dataset.messages_per_transmitter);
        let gan_end = self.gan.dataset.first_id + gan_total as u64;
        if self.gan.dataset.first_id < main_end && self.dataset.first_id < gan_end {
            return Err(ConfigError::Invalid("main and GAN message ids overlap".into()));
        }
        Ok(())
    }

    /// Seed for one stage, derived from the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64);
        rng.random()
    }

    /// Copy with every component seed derived from `seed`. The GAN's
    /// transmitter shares the main population's profiles.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.stage_seed(Stage::Dataset);
        c.dataset.profile_seed = self.stage_seed(Stage::Profiles);
        c.embedder.seed = self.stage_seed(Stage::Embedder);
        c.gan.dataset.seed = self.stage_seed(Stage::GanData);
        c.gan.dataset.profile_seed = c.dataset.profile_seed;
        c.gan.train.seed = self.stage_seed(Stage::Gan);
        c
    }

    /// Content hash of the full configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn channel(name: &str) -> Result<ChannelConfig> {
        ChannelConfig::preset(name).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default().resolved();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved(), c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[dataset]\ntransmitters = 4\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.dataset.transmitters, 4);
        assert_eq!(c.dataset.messages_per_transmitter, 200);
        assert_eq!(c.calibration, CalibrationConfig::default());
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.dataset.seed, b.dataset.seed);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.gan.dataset.profile_seed, a.dataset.profile_seed);
    }

    #[test]
    fn bad_documents_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("version = 7"), Err(ConfigError::Version { found: 7 })));
        assert!(matches!(ExperimentConfig::from_toml("seed = \"x\""), Err(ConfigError::Parse(_))));
        let bad = "[spoof_gd]\nchannels = [\"space\"]\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(ConfigError::Invalid(_))));
        let overlap = "[gan.dataset]\nfirst_id = 10\n";
        assert!(matches!(ExperimentConfig::from_toml(overlap), Err(ConfigError::Invalid(_))));
    }
}
