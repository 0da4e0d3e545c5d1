//! Synthetic legit-transmitter datasets: one fixed header pushed through each
//! transmitter's loop many times, with a stratified train/validation/test
//! manifest.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loopback::{loopback, sample_profile, ChannelConfig, LoopError, LoopSeed, Severity, TransmitterProfile};
use crate::par;
use crate::signal::{synthesize_header, HeaderSpec, IqWaveform, SignalError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset needs at least one transmitter and one message each")]
    Empty,
    #[error("split fractions must be non-negative and sum to at most 1")]
    BadSplit,
    #[error("message {0} appears in more than one split")]
    Overlap(u64),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Record provenance flags, stored as a bit set in dataset files.
pub mod flags {
    pub const CLEAN: u8 = 1;
    pub const LOOPED: u8 = 2;
    pub const ATTACKED: u8 = 4;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub id: u64,
    pub transmitter_id: u32,
    pub flags: u8,
    pub waveform: IqWaveform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub header: HeaderSpec,
    pub transmitters: u32,
    pub messages_per_transmitter: u32,
    pub channel: ChannelConfig,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Seed for transmitter profiles; distinct from the loop seed so the
    /// same population can be re-recorded.
    pub profile_seed: u64,
    pub seed: u64,
    /// Id of the first message, so separately recorded sets stay disjoint.
    pub first_id: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            header: HeaderSpec::default(),
            transmitters: 16,
            messages_per_transmitter: 200,
            channel: ChannelConfig::preset("best_case").expect("bundled preset"),
            train_fraction: 0.6,
            validation_fraction: 0.2,
            profile_seed: 1,
            seed: 0,
            first_id: 0,
        }
    }
}

/// Message ids per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Error if any id is listed twice.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(DatasetError::Overlap(*id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: IqWaveform,
    pub profiles: Vec<TransmitterProfile>,
    /// Ordered by id; `messages[i].id == first_id + i`.
    pub messages: Vec<Message>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Message> {
        self.manifest
            .ids(split)
            .iter()
            .map(|&id| &self.messages[(id - self.first_id()) as usize])
            .collect()
    }

    pub fn first_id(&self) -> u64 {
        self.messages.first().map_or(0, |m| m.id)
    }

    /// Messages of one transmitter, in id order.
    pub fn of_transmitter(&self, transmitter_id: u32) -> Vec<&Message> {
        self.messages.iter().filter(|m| m.transmitter_id == transmitter_id).collect()
    }

    pub fn profile(&self, transmitter_id: u32) -> Option<&TransmitterProfile> {
        self.profiles.iter().find(|p| p.profile_id == transmitter_id as u64)
    }
}

/// Loop seed used for message `id` of a dataset recorded with `seed`.
pub fn message_seed(seed: u64, id: u64) -> LoopSeed {
    LoopSeed::new(seed ^ 0x6461_7461_7365_7400, id)
}

pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.transmitters == 0 || cfg.messages_per_transmitter == 0 {
        return Err(DatasetError::Empty);
    }
    let (tf, vf) = (cfg.train_fraction, cfg.validation_fraction);
    if !(tf >= 0.0 && vf >= 0.0 && tf + vf <= 1.0) {
        return Err(DatasetError::BadSplit);
    }
    cfg.channel.validate()?;
    let header = synthesize_header(&cfg.header)?;
    let profiles: Vec<TransmitterProfile> = (0..cfg.transmitters)
        .map(|t| sample_profile(t as u64, Severity::Legit, cfg.profile_seed))
        .collect();
    let per = cfg.messages_per_transmitter as usize;
    let total = profiles.len() * per;
    let looped = par::map_range(total, |i| {
        loopback(&header, &profiles[i / per], &cfg.channel, message_seed(cfg.seed, cfg.first_id + i as u64))
    });
    let mut messages = Vec::with_capacity(total);
    for (i, w) in looped.into_iter().enumerate() {
        messages.push(Message {
            id: cfg.first_id + i as u64,
            transmitter_id: (i / per) as u32,
            flags: flags::LOOPED,
            waveform: w?,
        });
    }

    // Stratified split: each transmitter contributes the same proportions.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73_706c_6974);
    let n_train = (tf * per as f64).round() as usize;
    let n_val = ((vf * per as f64).round() as usize).min(per - n_train.min(per));
    let mut manifest = Manifest::default();
    for t in 0..profiles.len() {
        let mut ids: Vec<u64> = (0..per).map(|k| cfg.first_id + (t * per + k) as u64).collect();
        ids.shuffle(&mut rng);
        let n_train = n_train.min(per);
        manifest.train.extend_from_slice(&ids[..n_train]);
        manifest.validation.extend_from_slice(&ids[n_train..n_train + n_val]);
        manifest.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    manifest.train.sort_unstable();
    manifest.validation.sort_unstable();
    manifest.test.sort_unstable();
    Ok(Dataset {
        header,
        profiles,
        messages,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            transmitters: 3,
            messages_per_transmitter: 10,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn counts_and_splits() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.messages.len(), 30);
        d.manifest.check_disjoint().unwrap();
        let covered = d.manifest.train.len() + d.manifest.validation.len() + d.manifest.test.len();
        assert_eq!(covered, 30);
        assert_eq!(d.manifest.train.len(), 18);
        assert!(d.messages.iter().enumerate().all(|(i, m)| m.id == i as u64));
    }

    #[test]
    fn offset_ids_give_fresh_realizations() {
        let a = generate(&small()).unwrap();
        let b = generate(&DatasetConfig {
            first_id: 1000,
            ..small()
        })
        .unwrap();
        assert_eq!(b.messages[0].id, 1000);
        assert_eq!(b.split(Split::Test).len(), a.split(Split::Test).len());
        assert_ne!(a.messages[0].waveform, b.messages[0].waveform);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn overlap_detected() {
        let m = Manifest {
            train: vec![1, 2],
            validation: vec![3],
            test: vec![2],
        };
        assert!(matches!(m.check_disjoint(), Err(DatasetError::Overlap(2))));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = small();
        c.transmitters = 0;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.train_fraction = 0.9;
        c.validation_fraction = 0.2;
        assert!(generate(&c).is_err());
    }
}
