//! Impersonation of a legit transmitter by an attacker who records its
//! messages and replays them through their own hardware.
//!
//! Two attacks are provided. The first adds one optimised, filtered burst to
//! every replay so the victim's embedder sees the reference fingerprint. The
//! second trains a waveform generator against a discriminator so that
//! `loop(w + G(w))` on the attacker's hardware looks like the legit `w`.

mod gan;
mod generator;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Message;
use crate::evalkit::{self, config_hash, CsvTable, EvalError, ScoreSet};
use crate::fingerprint::{distance, embed_batch, EmbedderModel, Embedding, FingerprintError};
use crate::grad::GradError;
use crate::jamming::{self, BurstSpec, JammingError};
use crate::loopback::{loopback, ChannelConfig, LoopError, LoopSeed, TransmitterProfile};
use crate::par;
use crate::signal::{IqWaveform, SignalError};

pub use gan::{spoof, train_gan, train_gan_with, GanConfig, GanLog, GanModel, MIN_HEADERS};
pub use generator::{Generator, GeneratorArch};

#[derive(Debug, Error)]
pub enum SpoofError {
    #[error("need at least {need} training headers, got {got}")]
    TooFewHeaders { got: usize, need: usize },
    #[error("training headers must come from a single transmitter")]
    MixedTransmitters,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, checkpoint: Box<GanModel> },
    #[error("message {0} was used for training")]
    Overlap(u64),
    #[error("detection takes 1 to {max} examples, got {got}", max = MAX_EXAMPLES)]
    ExampleCount { got: usize },
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Jamming(#[from] JammingError),
}

pub type Result<T> = std::result::Result<T, SpoofError>;

pub const MAX_EXAMPLES: usize = 16;

/// Plain replays: each message re-transmitted by the attacker.
pub fn simple_replay(messages: &[IqWaveform], attacker: &TransmitterProfile, channel: &ChannelConfig, seeds: &[LoopSeed]) -> Result<Vec<IqWaveform>> {
    if messages.len() != seeds.len() {
        return Err(SpoofError::Mismatch("one loop seed per waveform".into()));
    }
    let out = par::map_range(messages.len(), |i| loopback(&messages[i], attacker, channel, seeds[i]));
    out.into_iter().map(|r| Ok(r?)).collect()
}

fn mean_distance(message: &Embedding, examples: &[Embedding]) -> Result<f64> {
    if examples.is_empty() || examples.len() > MAX_EXAMPLES {
        return Err(SpoofError::ExampleCount { got: examples.len() });
    }
    let mut total = 0.0;
    for e in examples {
        total += distance(message, e)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mean distance from `message` to known-legit `examples` of the claimed
/// transmitter. Higher means more likely a replay.
pub fn detect(model: &EmbedderModel, message: &IqWaveform, examples: &[IqWaveform]) -> Result<f64> {
    if examples.is_empty() || examples.len() > MAX_EXAMPLES {
        return Err(SpoofError::ExampleCount { got: examples.len() });
    }
    let mut all = Vec::with_capacity(examples.len() + 1);
    all.push(message.clone());
    all.extend_from_slice(examples);
    let e = embed_batch(model, &all)?;
    mean_distance(&e[0], &e[1..])
}

/// Detection scores for legit and attack fingerprints, each compared with
/// `n_examples` consecutive entries of `pool` starting at its own index.
pub fn detection_scores(legit: &[Embedding], attacks: &[Embedding], pool: &[Embedding], n_examples: usize) -> Result<ScoreSet> {
    if pool.len() < n_examples {
        return Err(SpoofError::ExampleCount { got: pool.len() });
    }
    let score = |k: usize, e: &Embedding| -> Result<f64> {
        let ex: Vec<Embedding> = (0..n_examples).map(|j| pool[(k + j) % pool.len()].clone()).collect();
        mean_distance(e, &ex)
    };
    let negatives = legit.iter().enumerate().map(|(k, e)| score(k, e)).collect::<Result<_>>()?;
    let positives = attacks.iter().enumerate().map(|(k, e)| score(k, e)).collect::<Result<_>>()?;
    Ok(ScoreSet::new(positives, negatives))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub auc: f64,
    pub eer: f64,
}

impl Separation {
    pub fn of(s: &ScoreSet) -> Result<Self> {
        Ok(Self {
            auc: evalkit::roc_auc(s)?,
            eer: evalkit::eer(s)?,
        })
    }
}

/// Distances to each message's reference, and how well each embedder tells
/// the replays from legit messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoofReport {
    pub condition: String,
    pub legit: Vec<f64>,
    pub simple_replay: Vec<f64>,
    pub gan_replay: Vec<f64>,
    pub victim_simple: Separation,
    pub victim_gan: Separation,
    pub discriminator_simple: Separation,
    pub discriminator_gan: Separation,
    pub attacker_profile_id: u64,
    pub config_hash: String,
}

impl SpoofReport {
    /// Distance rows for histogramming.
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["condition", "kind", "distance", "config_hash"]);
        for (kind, v) in [("legit", &self.legit), ("simple_replay", &self.simple_replay), ("gan_replay", &self.gan_replay)] {
            for d in v.iter() {
                t.push(vec![self.condition.clone(), kind.into(), format!("{d}"), self.config_hash.clone()])
                    .expect("row width matches header");
            }
        }
        t
    }
}

fn check_unseen(train_ids: &[u64], test: &[Message]) -> Result<()> {
    let seen: BTreeSet<u64> = train_ids.iter().copied().collect();
    match test.iter().find(|m| seen.contains(&m.id)) {
        Some(m) => Err(SpoofError::Overlap(m.id)),
        None => Ok(()),
    }
}

fn distances_to(refs: &[Embedding], e: &[Embedding]) -> Result<Vec<f64>> {
    e.iter().zip(refs).map(|(a, b)| Ok(distance(a, b)?)).collect()
}

/// Score legit messages, simple replays and generator replays of held-out
/// messages of the GAN's transmitter. Message `k` is compared with message
/// `k + 1` as its reference.
pub fn evaluate_spoofing(
    victim: &EmbedderModel,
    gan: &GanModel,
    test: &[Message],
    attacker: &TransmitterProfile,
    channel: &ChannelConfig,
    condition: &str,
    seed: u64,
) -> Result<SpoofReport> {
    if test.len() < 2 {
        return Err(SpoofError::Empty);
    }
    check_unseen(&gan.train_ids, test)?;
    if let Some(m) = test.iter().find(|m| m.transmitter_id != gan.transmitter_id) {
        return Err(SpoofError::Mismatch(format!(
            "message {} is from transmitter {}, generator was trained on {}",
            m.id, m.transmitter_id, gan.transmitter_id
        )));
    }
    let waves: Vec<IqWaveform> = test.iter().map(|m| m.waveform.clone()).collect();
    let seeds: Vec<LoopSeed> = test.iter().map(|m| LoopSeed::new(seed, m.id)).collect();
    let simple = simple_replay(&waves, attacker, channel, &seeds)?;
    let faked = spoof(&gan.generator, &waves, attacker, channel, &seeds)?;
    let n = waves.len();

    let score = |model: &EmbedderModel| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let legit = embed_batch(model, &waves)?;
        let refs: Vec<Embedding> = (0..n).map(|k| legit[(k + 1) % n].clone()).collect();
        Ok((
            distances_to(&refs, &legit)?,
            distances_to(&refs, &embed_batch(model, &simple)?)?,
            distances_to(&refs, &embed_batch(model, &faked)?)?,
        ))
    };
    let (legit, simple_d, gan_d) = score(victim)?;
    let (dl, ds, dg) = score(&gan.discriminator)?;
    #[derive(Serialize)]
    struct Key<'a> {
        condition: &'a str,
        channel: &'a ChannelConfig,
        attacker: &'a TransmitterProfile,
        seed: u64,
        n: usize,
    }
    Ok(SpoofReport {
        condition: condition.into(),
        victim_simple: Separation::of(&ScoreSet::new(simple_d.clone(), legit.clone()))?,
        victim_gan: Separation::of(&ScoreSet::new(gan_d.clone(), legit.clone()))?,
        discriminator_simple: Separation::of(&ScoreSet::new(ds, dl.clone()))?,
        discriminator_gan: Separation::of(&ScoreSet::new(dg, dl))?,
        legit,
        simple_replay: simple_d,
        gan_replay: gan_d,
        attacker_profile_id: attacker.profile_id,
        config_hash: config_hash(&Key {
            condition,
            channel,
            attacker,
            seed,
            n,
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpoofGdConfig {
    pub ratios_db: Vec<f64>,
    pub phase_sync: bool,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for SpoofGdConfig {
    fn default() -> Self {
        Self {
            ratios_db: jamming::ratio_sweep(5.0),
            phase_sync: false,
            iterations: 200,
            learning_rate: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoofPoint {
    pub ratio_db: f64,
    pub success_rate: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoofCurve {
    pub points: Vec<SpoofPoint>,
    /// Acceptance of the same replays with nothing added.
    pub replay_success_rate: f64,
    pub phase_sync: bool,
    pub config_hash: String,
}

impl SpoofCurve {
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["ratio_db", "success_rate", "trials", "phase_sync", "replay_success_rate", "config_hash"]);
        for p in &self.points {
            t.push(vec![
                format!("{}", p.ratio_db),
                format!("{}", p.success_rate),
                p.trials.to_string(),
                self.phase_sync.to_string(),
                format!("{}", self.replay_success_rate),
                self.config_hash.clone(),
            ])
            .expect("row width matches header");
        }
        t
    }
}

/// A replayed message and the legit message whose fingerprint it should
/// match. Both must come from the same transmitter.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoofPair {
    pub replayed: Message,
    pub reference: Message,
}

/// Pair each message with the next message of the same transmitter and
/// replay the first through the attacker's loop. Stops after `max` pairs.
pub fn replay_pairs(
    messages: &[&Message],
    attacker: &TransmitterProfile,
    channel: &ChannelConfig,
    seed: u64,
    max: usize,
) -> Result<Vec<SpoofPair>> {
    let chosen: Vec<(&Message, &Message)> = messages
        .windows(2)
        .filter(|w| w[0].transmitter_id == w[1].transmitter_id)
        .map(|w| (w[0], w[1]))
        .take(max)
        .collect();
    let waves: Vec<IqWaveform> = chosen.iter().map(|(m, _)| m.waveform.clone()).collect();
    let seeds: Vec<LoopSeed> = chosen.iter().map(|(m, _)| LoopSeed::new(seed, m.id)).collect();
    let replays = simple_replay(&waves, attacker, channel, &seeds)?;
    Ok(chosen
        .into_iter()
        .zip(replays)
        .map(|((m, r), w)| SpoofPair {
            replayed: Message {
                waveform: w,
                ..m.clone()
            },
            reference: r.clone(),
        })
        .collect())
}

fn check_pairs(model: &EmbedderModel, pairs: &[SpoofPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(SpoofError::Empty);
    }
    for p in pairs {
        if p.replayed.transmitter_id != p.reference.transmitter_id {
            return Err(SpoofError::Mismatch(format!(
                "replay {} is from transmitter {}, reference {} from {}",
                p.replayed.id, p.replayed.transmitter_id, p.reference.id, p.reference.transmitter_id
            )));
        }
        model.check_len(&p.replayed.waveform)?;
        model.check_len(&p.reference.waveform)?;
    }
    Ok(())
}

/// For each ratio, optimise one burst on `train` that pulls the replays'
/// fingerprints onto their references, then report the share of `test`
/// replays accepted (`distance < accept`) with the burst added.
pub fn optimize_spoof_gd(
    model: &EmbedderModel,
    accept: f64,
    train: &[SpoofPair],
    test: &[SpoofPair],
    cfg: &SpoofGdConfig,
    seed: u64,
) -> Result<SpoofCurve> {
    check_pairs(model, train)?;
    check_pairs(model, test)?;
    let train_ids: Vec<u64> = train.iter().map(|p| p.replayed.id).collect();
    let test_msgs: Vec<Message> = test.iter().map(|p| p.replayed.clone()).collect();
    check_unseen(&train_ids, &test_msgs)?;

    let victims: Vec<IqWaveform> = train.iter().map(|p| p.replayed.waveform.clone()).collect();
    let train_refs = embed_batch(model, &train.iter().map(|p| p.reference.waveform.clone()).collect::<Vec<_>>())?;
    let test_waves: Vec<IqWaveform> = test_msgs.iter().map(|m| m.waveform.clone()).collect();
    let test_refs = embed_batch(model, &test.iter().map(|p| p.reference.waveform.clone()).collect::<Vec<_>>())?;
    let accepted = |waves: &[IqWaveform]| -> Result<f64> {
        let e = embed_batch(model, waves)?;
        let d = distances_to(&test_refs, &e)?;
        Ok(d.iter().filter(|&&v| v < accept).count() as f64 / d.len() as f64)
    };
    let replay_success_rate = accepted(&test_waves)?;
    let wired = ChannelConfig::wired();
    let sync_reference = cfg.phase_sync.then_some(&victims[0]);

    let mut points = Vec::with_capacity(cfg.ratios_db.len());
    for (r, &ratio_db) in cfg.ratios_db.iter().enumerate() {
        if !(jamming::RATIO_MIN_DB..=jamming::RATIO_MAX_DB).contains(&ratio_db) {
            return Err(JammingError::RatioOutOfRange(ratio_db).into());
        }
        let spec = BurstSpec {
            ratio_db,
            phase_sync: cfg.phase_sync,
            channel: &wired,
            iterations: cfg.iterations,
            learning_rate: cfg.learning_rate,
            sign: 1.0,
            init: Some(&victims[0]),
            select_below: Some(accept),
        };
        let (burst, _) = jamming::optimize_burst(model, &victims, &train_refs, &spec, seed.wrapping_add(r as u64))?;
        let mixed = par::map_range(test_waves.len(), |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ratio_db.to_bits());
            rng.set_stream(k as u64);
            jamming::add_burst(&test_waves[k], &burst, ratio_db, &wired, sync_reference, &mut rng).map(|(w, _)| w)
        });
        let mixed = mixed.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
        points.push(SpoofPoint {
            ratio_db,
            success_rate: accepted(&mixed)?,
            trials: mixed.len(),
        });
    }
    Ok(SpoofCurve {
        points,
        replay_success_rate,
        phase_sync: cfg.phase_sync,
        config_hash: config_hash(cfg),
    })
}

/// A fresh attacker profile id that differs from `avoid`.
pub fn fresh_profile_id(avoid: u64, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let id: u64 = rng.random_range(1000..1_000_000);
        if id != avoid {
            return id;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::flags;
    use crate::fingerprint::EmbedderArch;
    use crate::loopback::{sample_profile, Severity};
    use crate::signal::{synthesize_header, HeaderSpec};

    fn tiny_model() -> EmbedderModel {
        EmbedderModel::init(
            EmbedderArch {
                channels: vec![4, 4],
                embedding_dim: 8,
                ..EmbedderArch::default()
            },
            0,
        )
        .unwrap()
    }

    fn messages(n: usize, tx: u32, first: u64) -> Vec<Message> {
        let h = synthesize_header(&HeaderSpec::default()).unwrap();
        let p = sample_profile(tx as u64, Severity::Legit, 1);
        (0..n)
            .map(|i| Message {
                id: first + i as u64,
                transmitter_id: tx,
                flags: flags::LOOPED,
                waveform: loopback(&h, &p, &ChannelConfig::wired(), LoopSeed::new(2, first + i as u64)).unwrap(),
            })
            .collect()
    }

    fn pairs(msgs: &[Message]) -> Vec<SpoofPair> {
        msgs.windows(2)
            .map(|w| SpoofPair {
                replayed: w[0].clone(),
                reference: w[1].clone(),
            })
            .collect()
    }

    #[test]
    fn detect_bounds_example_count() {
        let m = tiny_model();
        let w = messages(1, 0, 0)[0].waveform.clone();
        assert!(matches!(detect(&m, &w, &[]), Err(SpoofError::ExampleCount { got: 0 })));
        let many = vec![w.clone(); MAX_EXAMPLES + 1];
        assert!(detect(&m, &w, &many).is_err());
        assert!(detect(&m, &w, &many[..MAX_EXAMPLES]).unwrap() < 1e-3);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let m = tiny_model();
        let mut p = pairs(&messages(3, 0, 0));
        p[0].reference.transmitter_id = 7;
        let cfg = SpoofGdConfig {
            ratios_db: vec![-20.0],
            iterations: 1,
            ..SpoofGdConfig::default()
        };
        assert!(matches!(optimize_spoof_gd(&m, 0.5, &p, &p, &cfg, 0), Err(SpoofError::Mismatch(_))));
    }

    #[test]
    fn vanishing_burst_matches_plain_replay() {
        let m = tiny_model();
        let msgs = messages(12, 0, 0);
        let (train, test) = (pairs(&msgs[..5]), pairs(&msgs[5..]));
        let cfg = SpoofGdConfig {
            ratios_db: vec![-75.0, 0.0],
            iterations: 2,
            ..SpoofGdConfig::default()
        };
        let c = optimize_spoof_gd(&m, 0.05, &train, &test, &cfg, 0).unwrap();
        assert_eq!(c.points.len(), 2);
        assert!((c.points[0].success_rate - c.replay_success_rate).abs() <= 0.25);
        assert_eq!(c.to_table().rows.len(), 2);
    }

    #[test]
    fn training_messages_cannot_be_tested() {
        let m = tiny_model();
        let p = pairs(&messages(4, 0, 0));
        let cfg = SpoofGdConfig {
            ratios_db: vec![-20.0],
            iterations: 1,
            ..SpoofGdConfig::default()
        };
        assert!(matches!(optimize_spoof_gd(&m, 0.5, &p, &p[1..], &cfg, 0), Err(SpoofError::Overlap(_))));
    }

    #[test]
    fn report_on_identity_generator() {
        let m = tiny_model();
        let gan = GanModel::init(
            &GanConfig {
                discriminator: m.arch().clone(),
                ..GanConfig::default()
            },
            0,
        )
        .unwrap();
        let test = messages(6, 0, 100);
        let attacker = sample_profile(0, Severity::Attacker, 3);
        let r = evaluate_spoofing(&m, &gan, &test, &attacker, &ChannelConfig::wired(), "wired", 1).unwrap();
        // Identity generator: both replays are the same waveform.
        assert_eq!(r.simple_replay, r.gan_replay);
        assert_eq!(r.victim_simple, r.victim_gan);
        assert_eq!(r.to_table().rows.len(), 18);
        let other = messages(3, 1, 200);
        assert!(evaluate_spoofing(&m, &gan, &other, &attacker, &ChannelConfig::wired(), "wired", 1).is_err());
    }

    #[test]
    fn detection_scores_shape() {
        let m = tiny_model();
        let w: Vec<IqWaveform> = messages(5, 0, 0).into_iter().map(|m| m.waveform).collect();
        let e = embed_batch(&m, &w).unwrap();
        let s = detection_scores(&e[..2], &e[2..], &e, 3).unwrap();
        assert_eq!((s.negatives.len(), s.positives.len()), (2, 3));
        assert!(detection_scores(&e, &e, &e[..2], 3).is_err());
    }
}
