use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorArch};
use super::{Result, SpoofError};
use crate::dataset::Message;
use crate::fingerprint::{distance_on_tape, EmbedderArch, EmbedderModel};
use crate::grad::{Adam, Scalar, Tape, Var};
use crate::loopback::{loopback, loopback_on_tape, ChannelConfig, LoopMode, LoopSeed, TransmitterProfile};
use crate::nn;
use crate::par;
use crate::signal::{self, IqWaveform};

pub const MIN_HEADERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub generator: GeneratorArch,
    pub discriminator: EmbedderArch,
    pub epochs: usize,
    /// Discriminator-only epochs on plain replays with the generator frozen,
    /// run after the adversarial epochs with the discriminator step size
    /// decaying linearly to zero. Turns the discriminator into a stable
    /// replay detector.
    pub refine_epochs: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// First-moment decay of both Adam optimisers.
    pub adam_beta1: f64,
    /// How generator gradients cross the attacker's loop.
    pub loop_mode: LoopMode,
    /// Weight of plain replays (the untrained generator's output) among the
    /// discriminator's fakes; `0` trains on current generator output only.
    pub plain_replay_weight: f64,
    pub channel: ChannelConfig,
    pub min_headers: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorArch::default(),
            discriminator: EmbedderArch::default(),
            epochs: 2,
            refine_epochs: 6,
            batch_size: 16,
            generator_lr: 1e-4,
            discriminator_lr: 1e-3,
            adam_beta1: 0.9,
            loop_mode: LoopMode::Differentiable,
            plain_replay_weight: 1.0,
            channel: ChannelConfig::preset("best_case").expect("bundled preset"),
            min_headers: MIN_HEADERS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub discriminator_losses: Vec<f64>,
    pub generator_losses: Vec<f64>,
}

/// A trained generator and the discriminator it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub generator: Generator,
    pub discriminator: EmbedderModel,
    pub transmitter_id: u32,
    /// Header ids seen during training.
    pub train_ids: Vec<u64>,
    pub log: GanLog,
}

impl GanModel {
    pub fn init(cfg: &GanConfig, transmitter_id: u32) -> Result<Self> {
        if cfg.generator.input_len != cfg.discriminator.input_len {
            return Err(SpoofError::Architecture("generator and discriminator lengths differ".into()));
        }
        Ok(Self {
            generator: Generator::init(cfg.generator.clone(), cfg.seed)?,
            discriminator: EmbedderModel::init(cfg.discriminator.clone(), cfg.seed ^ 0xd15c)?,
            transmitter_id,
            train_ids: Vec::new(),
            log: GanLog::default(),
        })
    }
}

/// Replay `w + G(w)` through the attacker's loop.
pub fn spoof(generator: &Generator, waves: &[IqWaveform], attacker: &TransmitterProfile, channel: &ChannelConfig, seeds: &[LoopSeed]) -> Result<Vec<IqWaveform>> {
    if waves.len() != seeds.len() {
        return Err(SpoofError::Mismatch("one loop seed per waveform".into()));
    }
    let modified = generator.apply(waves)?;
    let out = par::map_range(modified.len(), |i| loopback(&modified[i], attacker, channel, seeds[i]));
    out.into_iter().map(|r| Ok(r?)).collect()
}

fn pair_distance<S: Scalar>(tape: &mut Tape<S>, model: &EmbedderModel, params: &[Var], a: Var, b: Var) -> Result<Var> {
    let ea = model.forward(tape, params, a)?;
    let eb = model.forward(tape, params, b)?;
    Ok(distance_on_tape(tape, ea, eb)?)
}

fn finite(v: f64, epoch: usize, last: &GanModel) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SpoofError::Diverged {
            epoch,
            checkpoint: Box::new(last.clone()),
        })
    }
}

/// Alternating 1:1 training on headers of one legit transmitter.
///
/// The discriminator learns to keep legit pairs close and push the replay of
/// a header away from that header; the generator learns to pull the replay
/// back. Generator gradients cross the attacker's loop on the tape.
pub fn train_gan(headers: &[Message], attacker: &TransmitterProfile, cfg: &GanConfig) -> Result<GanModel> {
    train_gan_with(headers, attacker, cfg, |_, _| Ok(()))
}

/// [`train_gan`] with a hook called after every epoch.
pub fn train_gan_with<F>(headers: &[Message], attacker: &TransmitterProfile, cfg: &GanConfig, mut on_epoch: F) -> Result<GanModel>
where
    F: FnMut(usize, &GanModel) -> Result<()>,
{
    if headers.len() < cfg.min_headers.max(2) {
        return Err(SpoofError::TooFewHeaders {
            got: headers.len(),
            need: cfg.min_headers.max(2),
        });
    }
    let tx = headers[0].transmitter_id;
    if headers.iter().any(|m| m.transmitter_id != tx) {
        return Err(SpoofError::MixedTransmitters);
    }
    for m in headers {
        if m.waveform.len() != cfg.generator.input_len {
            return Err(SpoofError::Architecture(format!(
                "header {} has {} samples, generator expects {}",
                m.id,
                m.waveform.len(),
                cfg.generator.input_len
            )));
        }
    }
    if cfg.batch_size == 0 {
        return Err(SpoofError::Architecture("batch size must be positive".into()));
    }
    cfg.channel.validate()?;

    let mut model = GanModel::init(cfg, tx)?;
    model.train_ids = headers.iter().map(|m| m.id).collect();
    let mut d_opt = Adam::<f32>::with_betas(cfg.discriminator_lr, cfg.adam_beta1, 0.999, 1e-8)?;
    let mut g_opt = Adam::<f32>::with_betas(cfg.generator_lr, cfg.adam_beta1, 0.999, 1e-8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = headers.len();
    let mut checkpoint = model.clone();

    for epoch in 0..cfg.epochs + cfg.refine_epochs {
        let adversarial = epoch < cfg.epochs;
        let n_batches = n.div_ceil(cfg.batch_size);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut d_sum, mut g_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if !adversarial {
                let done = ((epoch - cfg.epochs) * n_batches + bi) as f64;
                let total = (cfg.refine_epochs * n_batches) as f64;
                d_opt.set_learning_rate(cfg.discriminator_lr * (1.0 - done / total))?;
            }
            let partners: Vec<usize> = batch
                .iter()
                .map(|&a| {
                    let b = rng.random_range(0..n - 1);
                    if b >= a { b + 1 } else { b }
                })
                .collect();
            let wa: Vec<IqWaveform> = batch.iter().map(|&i| headers[i].waveform.clone()).collect();
            let wb: Vec<IqWaveform> = partners.iter().map(|&i| headers[i].waveform.clone()).collect();
            let xa = signal::stack::<f32>(&wa)?;

            // Discriminator step on fresh replays.
            let seeds: Vec<LoopSeed> = batch.iter().map(|_| LoopSeed::new(rng.random(), 0)).collect();
            let mut fakes: Vec<(Vec<IqWaveform>, f64)> = Vec::with_capacity(2);
            if adversarial {
                fakes.push((spoof(&model.generator, &wa, attacker, &cfg.channel, &seeds)?, 1.0));
            }
            let plain_weight = if adversarial { cfg.plain_replay_weight } else { 1.0 };
            if plain_weight > 0.0 {
                fakes.push((super::simple_replay(&wa, attacker, &cfg.channel, &seeds)?, plain_weight));
            }
            let mut tape = Tape::<f32>::new();
            let dp = model.discriminator.bind(&mut tape, true)?;
            let a = tape.constant(xa.clone())?;
            let b = tape.constant(signal::stack(&wb)?)?;
            let ea = model.discriminator.forward(&mut tape, &dp, a)?;
            let eb = model.discriminator.forward(&mut tape, &dp, b)?;
            let d_real = distance_on_tape(&mut tape, ea, eb)?;
            let mut per = tape.square(d_real)?;
            for (waves, weight) in &fakes {
                let g = tape.constant(signal::stack(waves)?)?;
                let eg = model.discriminator.forward(&mut tape, &dp, g)?;
                let d_fake = distance_on_tape(&mut tape, ea, eg)?;
                let miss = tape.scale(d_fake, -1.0)?;
                let miss = tape.offset(miss, 1.0)?;
                let miss = tape.square(miss)?;
                let miss = tape.scale(miss, *weight as f32)?;
                per = tape.add(per, miss)?;
            }
            let d_loss = tape.mean(per)?;
            let dl = finite(tape.value(d_loss)?.values()[0] as f64, epoch, &checkpoint)?;
            tape.backward(d_loss)?;
            nn::adam_update(&mut d_opt, &tape, &dp, model.discriminator.params_mut())?;
            if model.discriminator.params().iter().any(|p| !p.is_finite()) {
                return Err(SpoofError::Diverged {
                    epoch,
                    checkpoint: Box::new(checkpoint),
                });
            }

            d_sum += dl;
            batches += 1;
            if !adversarial {
                continue;
            }

            // Generator step through the loop.
            let seeds: Vec<LoopSeed> = batch.iter().map(|_| LoopSeed::new(rng.random(), 0)).collect();
            let mut tape = Tape::<f32>::new();
            let gp = model.generator.bind(&mut tape, true)?;
            let dp = model.discriminator.bind(&mut tape, false)?;
            let x = tape.constant(xa)?;
            let m = model.generator.forward(&mut tape, &gp, x)?;
            let y = tape.add(x, m)?;
            let z = loopback_on_tape(&mut tape, y, attacker, &cfg.channel, &seeds, cfg.loop_mode)?;
            let d = pair_distance(&mut tape, &model.discriminator, &dp, x, z)?;
            let g_loss = tape.mean(d)?;
            let gl = finite(tape.value(g_loss)?.values()[0] as f64, epoch, &checkpoint)?;
            tape.backward(g_loss)?;
            nn::adam_update(&mut g_opt, &tape, &gp, model.generator.params_mut())?;

            if model.generator.params().iter().any(|p| !p.is_finite()) {
                return Err(SpoofError::Diverged {
                    epoch,
                    checkpoint: Box::new(checkpoint),
                });
            }
            g_sum += gl;
        }
        model.log.discriminator_losses.push(d_sum / batches as f64);
        if adversarial {
            model.log.generator_losses.push(g_sum / batches as f64);
        }
        log::info!(
            "gan epoch {epoch}: discriminator {:.4}, generator {:.4}",
            d_sum / batches as f64,
            g_sum / batches as f64
        );
        checkpoint = model.clone();
        on_epoch(epoch, &model)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::flags;
    use crate::loopback::{sample_profile, Severity};
    use crate::signal::{synthesize_header, HeaderSpec};

    fn tiny_cfg() -> GanConfig {
        GanConfig {
            generator: GeneratorArch {
                channels: 4,
                kernel: 3,
                blocks: 2,
                ..GeneratorArch::default()
            },
            discriminator: EmbedderArch {
                channels: vec![4, 4],
                embedding_dim: 8,
                ..EmbedderArch::default()
            },
            epochs: 1,
            refine_epochs: 1,
            batch_size: 4,
            channel: ChannelConfig::wired(),
            min_headers: 8,
            ..GanConfig::default()
        }
    }

    fn headers(n: usize, tx: u32) -> Vec<Message> {
        let h = synthesize_header(&HeaderSpec::default()).unwrap();
        let p = sample_profile(tx as u64, Severity::Legit, 1);
        (0..n)
            .map(|i| Message {
                id: i as u64,
                transmitter_id: tx,
                flags: flags::LOOPED,
                waveform: loopback(&h, &p, &ChannelConfig::wired(), LoopSeed::new(9, i as u64)).unwrap(),
            })
            .collect()
    }

    #[test]
    fn untrained_spoof_equals_plain_replay() {
        let g = Generator::init(GeneratorArch::default(), 0).unwrap();
        let hs = headers(2, 0);
        let waves: Vec<IqWaveform> = hs.iter().map(|m| m.waveform.clone()).collect();
        let attacker = sample_profile(0, Severity::Attacker, 5);
        let chan = ChannelConfig::preset("best_case").unwrap();
        let seeds = [LoopSeed::new(1, 0), LoopSeed::new(1, 1)];
        let s = spoof(&g, &waves, &attacker, &chan, &seeds).unwrap();
        for i in 0..2 {
            assert_eq!(s[i], loopback(&waves[i], &attacker, &chan, seeds[i]).unwrap());
        }
    }

    #[test]
    fn too_few_or_mixed_headers_rejected() {
        let attacker = sample_profile(0, Severity::Attacker, 5);
        let cfg = tiny_cfg();
        assert!(matches!(
            train_gan(&headers(4, 0), &attacker, &cfg),
            Err(SpoofError::TooFewHeaders { got: 4, need: 8 })
        ));
        let mut mixed = headers(8, 0);
        mixed[3].transmitter_id = 1;
        assert!(matches!(train_gan(&mixed, &attacker, &cfg), Err(SpoofError::MixedTransmitters)));
    }

    #[test]
    fn one_epoch_trains_and_logs() {
        let attacker = sample_profile(0, Severity::Attacker, 5);
        for mode in [LoopMode::Differentiable, LoopMode::StraightThrough] {
            let cfg = GanConfig {
                loop_mode: mode,
                ..tiny_cfg()
            };
            let m = train_gan(&headers(8, 0), &attacker, &cfg).unwrap();
            assert_eq!(m.log.generator_losses.len(), 1);
            assert_eq!(m.log.discriminator_losses.len(), 2);
            assert!(m.log.discriminator_losses[0].is_finite());
            assert_eq!(m.train_ids.len(), 8);
            // The output layer has moved away from zero.
            assert!(m.generator.params().last().unwrap().values().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn divergence_reports_checkpoint() {
        let attacker = sample_profile(0, Severity::Attacker, 5);
        let cfg = GanConfig {
            generator_lr: f64::MAX,
            discriminator_lr: f64::MAX,
            epochs: 2,
            ..tiny_cfg()
        };
        match train_gan(&headers(8, 0), &attacker, &cfg) {
            Err(SpoofError::Diverged { checkpoint, .. }) => {
                assert!(checkpoint.generator.params().iter().all(|p| p.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
