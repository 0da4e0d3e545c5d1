//! Channel models: a wired attenuator or a tapped delay line with per-tap
//! fading and additive white Gaussian noise.

use serde::{Deserialize, Serialize};

use super::LoopError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fading {
    Rayleigh,
    /// `k_db = inf` gives a deterministic tap.
    Rician { k_db: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_samples: usize,
    pub power_db: f64,
    pub fading: Fading,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelConfig {
    Wired { attenuation_db: f64 },
    Tdl { taps: Vec<Tap>, snr_db: f64 },
}

const BEST_CASE: &str = include_str!("../../presets/best_case.toml");
const WORST_CASE: &str = include_str!("../../presets/worst_case.toml");

/// Named channel presets shipped with the crate.
pub const PRESET_NAMES: [&str; 3] = ["wired", "best_case", "worst_case"];

impl ChannelConfig {
    pub fn wired() -> Self {
        ChannelConfig::Wired { attenuation_db: 0.0 }
    }

    pub fn preset(name: &str) -> Result<Self, LoopError> {
        match name {
            "wired" => Ok(Self::wired()),
            "best_case" => Self::from_toml(BEST_CASE),
            "worst_case" => Self::from_toml(WORST_CASE),
            other => Err(LoopError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, LoopError> {
        let cfg: ChannelConfig = toml::from_str(text).map_err(|e| LoopError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        match self {
            ChannelConfig::Wired { attenuation_db } if !attenuation_db.is_finite() => {
                Err(LoopError::Config("attenuation must be finite".into()))
            }
            ChannelConfig::Wired { .. } => Ok(()),
            ChannelConfig::Tdl { taps, snr_db } => {
                let first = taps.first().ok_or_else(|| LoopError::Config("no taps".into()))?;
                if first.delay_samples != 0 {
                    return Err(LoopError::Config("first tap delay must be 0".into()));
                }
                if taps.iter().any(|t| !t.power_db.is_finite()) {
                    return Err(LoopError::Config("tap powers must be finite".into()));
                }
                if snr_db.is_nan() {
                    return Err(LoopError::Config("snr must be a number".into()));
                }
                Ok(())
            }
        }
    }

    /// Linear tap powers rescaled to sum to one.
    pub fn normalized_powers(&self) -> Vec<f64> {
        match self {
            ChannelConfig::Wired { attenuation_db } => vec![10f64.powf(-attenuation_db / 10.0)],
            ChannelConfig::Tdl { taps, .. } => {
                let lin: Vec<f64> = taps.iter().map(|t| 10f64.powf(t.power_db / 10.0)).collect();
                let total: f64 = lin.iter().sum();
                lin.iter().map(|p| p / total).collect()
            }
        }
    }
}
