use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{distance_on_tape, EmbedderArch, EmbedderModel};
use super::{FingerprintError, Result};
use crate::grad::{Adam, Tape};
use crate::nn;
use crate::signal::{self, IqWaveform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: EmbedderArch,
    pub margin: f64,
    pub epochs: usize,
    /// Distinct transmitters per batch.
    pub transmitters_per_batch: usize,
    /// Messages drawn per transmitter in a batch.
    pub messages_per_transmitter: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: EmbedderArch::default(),
            margin: 0.2,
            epochs: 20,
            transmitters_per_batch: 8,
            messages_per_transmitter: 4,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Triplet-loss training with random in-batch triplets.
pub fn train_embedder(dataset: &[(u32, IqWaveform)], cfg: &TrainConfig) -> Result<(EmbedderModel, TrainingLog)> {
    let mut by_tx: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (id, w)) in dataset.iter().enumerate() {
        if w.len() != cfg.arch.input_len {
            return Err(FingerprintError::LengthMismatch {
                expected: cfg.arch.input_len,
                got: w.len(),
            });
        }
        by_tx.entry(*id).or_default().push(i);
    }
    by_tx.retain(|_, v| v.len() >= 2);
    if by_tx.len() < 2 {
        return Err(FingerprintError::DegenerateDataset(
            "need at least two transmitters with two messages each".into(),
        ));
    }
    if cfg.transmitters_per_batch < 2 || cfg.messages_per_transmitter < 2 {
        return Err(FingerprintError::DegenerateDataset(
            "batches need two transmitters and two messages per transmitter".into(),
        ));
    }

    let mut model = EmbedderModel::init(cfg.arch.clone(), cfg.seed)?;
    let mut opt = Adam::<f32>::new(cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6970);
    let ids: Vec<u32> = by_tx.keys().copied().collect();
    let p = cfg.transmitters_per_batch.min(ids.len());
    let k = cfg.messages_per_transmitter;
    let steps = dataset.len().div_ceil(p * k).max(1);
    let mut log = TrainingLog::default();

    for _ in 0..cfg.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..steps {
            // Assemble p transmitters x k messages.
            let chosen: Vec<u32> = ids.choose_multiple(&mut rng, p).copied().collect();
            let mut members = Vec::with_capacity(p * k);
            let mut labels = Vec::with_capacity(p * k);
            for (slot, id) in chosen.iter().enumerate() {
                let pool = &by_tx[id];
                let mut picks: Vec<usize> = pool.choose_multiple(&mut rng, k.min(pool.len())).copied().collect();
                while picks.len() < k {
                    picks.push(*pool.choose(&mut rng).expect("non-empty"));
                }
                for i in picks {
                    members.push(i);
                    labels.push(slot);
                }
            }
            let n = members.len();
            let (mut pos, mut neg) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for a in 0..n {
                let same: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
                let diff: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
                pos.push(same[rng.random_range(0..same.len())]);
                neg.push(diff[rng.random_range(0..diff.len())]);
            }
            let anchors: Vec<usize> = (0..n).collect();
            let waves: Vec<IqWaveform> = members.iter().map(|&i| dataset[i].1.clone()).collect();

            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, true)?;
            let x = tape.constant(signal::stack(&waves)?)?;
            let e = model.forward(&mut tape, &vars, x)?;
            let ea = tape.gather_rows(e, &anchors)?;
            let ep = tape.gather_rows(e, &pos)?;
            let en = tape.gather_rows(e, &neg)?;
            let dap = distance_on_tape(&mut tape, ea, ep)?;
            let dan = distance_on_tape(&mut tape, ea, en)?;
            let diff = tape.sub(dap, dan)?;
            let shifted = tape.offset(diff, cfg.margin as f32)?;
            let hinge = tape.relu(shifted)?;
            let loss = tape.mean(hinge)?;
            let value = tape.value(loss)?.values()[0] as f64;
            tape.backward(loss)?;
            nn::adam_update(&mut opt, &tape, &vars, model.params_mut())?;
            log.step_losses.push(value);
            epoch_total += value;
        }
        let mean = epoch_total / steps as f64;
        log::debug!("embedder epoch {}: loss {mean:.4}", log.epoch_losses.len());
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}
