//! Fingerprint jamming: a reusable low-power burst optimised to push
//! received fingerprints away from their clean values, a filtered Gaussian
//! baseline, and false-rejection sweeps over the attacker-to-victim ratio.

use std::collections::BTreeSet;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Message;
use crate::evalkit::{config_hash, CsvTable, EvalError};
use crate::fingerprint::{distance, distance_on_tape, embed_batch, AuthPolicy, EmbedderModel, Embedding, FingerprintError};
use crate::grad::{Adam, GradError, Tape, Tensor};
use crate::loopback::{apply_channel, loopback_on_tape, ChannelConfig, LoopError, LoopMode, LoopSeed, TransmitterProfile};
use crate::par;
use crate::signal::{self, IqWaveform, SignalError};

#[derive(Debug, Error)]
pub enum JammingError {
    #[error("no victim messages")]
    NoVictims,
    #[error("ratio {0} dB outside [{RATIO_MIN_DB}, {RATIO_MAX_DB}]")]
    RatioOutOfRange(f64),
    #[error("training sets must contain 1, 10 or 100 messages, got {0}")]
    TrainCount(usize),
    #[error("learning rate must be positive")]
    LearningRate,
    #[error("message {0} is in both the training and the test set")]
    Overlap(u64),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error("burst init has {got} samples, victims have {want}")]
    InitLength { got: usize, want: usize },
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, JammingError>;

pub const RATIO_MIN_DB: f64 = -75.0;
pub const RATIO_MAX_DB: f64 = 5.0;
pub const TRAIN_COUNTS: [usize; 3] = [1, 10, 100];
pub const FILTER_TAPS: usize = 128;
pub const FILTER_CUTOFF_HZ: f64 = 0.333e6;
/// Cutoff as a fraction of the sample rate.
pub const NORMALIZED_CUTOFF: f64 = FILTER_CUTOFF_HZ / 25e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JammingConfig {
    pub ratio_db: f64,
    pub n_train_messages: usize,
    /// Align the burst carrier with each victim instead of a random phase.
    pub phase_sync: bool,
    pub channel: ChannelConfig,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for JammingConfig {
    fn default() -> Self {
        Self {
            ratio_db: -30.0,
            n_train_messages: 10,
            phase_sync: false,
            channel: ChannelConfig::wired(),
            iterations: 300,
            learning_rate: 0.01,
        }
    }
}

impl JammingConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio_db)?;
        if !TRAIN_COUNTS.contains(&self.n_train_messages) {
            return Err(JammingError::TrainCount(self.n_train_messages));
        }
        if !(self.learning_rate > 0.0) {
            return Err(JammingError::LearningRate);
        }
        self.channel.validate()?;
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if (RATIO_MIN_DB..=RATIO_MAX_DB).contains(&r) {
        Ok(())
    } else {
        Err(JammingError::RatioOutOfRange(r))
    }
}

/// A filtered burst normalised to `config.ratio_db` against the mean
/// training-victim energy.
#[derive(Clone, Debug, PartialEq)]
pub struct JammingSignal {
    pub waveform: IqWaveform,
    pub config: JammingConfig,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    /// Messages used to build the signal.
    pub train_ids: Vec<u64>,
    /// Recorded header the attacker aligns its carrier to; set iff
    /// `config.phase_sync`.
    pub phase_reference: Option<IqWaveform>,
}

/// Low-pass taps for a given sample rate.
pub fn jamming_filter(sample_rate_hz: f64) -> Result<Vec<f64>> {
    Ok(signal::design_fir_lowpass(
        NORMALIZED_CUTOFF * sample_rate_hz,
        sample_rate_hz,
        FILTER_TAPS,
    )?)
}

fn check_victims(model: &EmbedderModel, victims: &[Message]) -> Result<()> {
    if victims.is_empty() {
        return Err(JammingError::NoVictims);
    }
    for v in victims {
        model.check_len(&v.waveform)?;
    }
    Ok(())
}

fn complex_gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<Complex64> {
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * (std * std::f64::consts::FRAC_1_SQRT_2)
        })
        .collect()
}

/// Filter then scale to `ratio_db` against `reference_energy`.
fn shape_burst(raw: &IqWaveform, ratio_db: f64, reference_energy: f64) -> Result<IqWaveform> {
    let f = signal::apply_fir(raw, &jamming_filter(raw.sample_rate_hz())?)?;
    Ok(signal::scale_to_energy(&f, reference_energy * signal::db_to_linear(ratio_db), "victim")?)
}

/// Largest mixing offset jitter: a quarter symbol.
pub(crate) fn max_jitter(w: &IqWaveform) -> isize {
    w.samples_per_symbol().map_or(0, |s| (s / 4) as isize)
}

/// Settings shared by every optimised additive burst.
pub(crate) struct BurstSpec<'a> {
    pub ratio_db: f64,
    pub phase_sync: bool,
    pub channel: &'a ChannelConfig,
    pub iterations: usize,
    pub learning_rate: f64,
    /// `+1` pulls fingerprints towards the anchors, `-1` pushes them away.
    pub sign: f64,
    /// Starting waveform; filtered noise when absent.
    pub init: Option<&'a IqWaveform>,
    /// Keep the iterate accepting the most victims below this distance,
    /// ties broken by loss; by loss alone when absent.
    pub select_below: Option<f64>,
}

/// Gradient descent on the raw samples of one burst added to every victim.
/// The loss is `sign * mean distance(embed(victim + burst), anchor)`.
/// Returns the best burst (filtered and normalised against the mean victim
/// energy) and the per-iteration losses.
pub(crate) fn optimize_burst(
    model: &EmbedderModel,
    victims: &[IqWaveform],
    anchors: &[Embedding],
    spec: &BurstSpec,
    seed: u64,
) -> Result<(IqWaveform, Vec<f64>)> {
    let template = &victims[0];
    let len = template.len();
    let mean_energy = victims.iter().map(|v| v.energy()).sum::<f64>() / victims.len() as f64;
    let taps = jamming_filter(template.sample_rate_hz())?;
    let target = mean_energy * signal::db_to_linear(spec.ratio_db);
    let jitter = max_jitter(template);
    let rms = (mean_energy / len as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = template.with_samples(complex_gaussian(&mut rng, len, 0.01 * rms))?;
    let init = match spec.init {
        Some(w) if w.len() != len => return Err(JammingError::InitLength { got: w.len(), want: len }),
        Some(w) => signal::scale_to_energy(w, noise.energy(), "burst init")?,
        None => noise,
    };
    let mut raw: Tensor<f32> = init.to_tensor();
    let anchor_t: Tensor<f32> = Tensor::new(
        vec![anchors.len(), anchors[0].dim()],
        anchors.iter().flat_map(|e| e.values().iter().map(|&v| v as f32)).collect(),
    )?;
    let victims_t: Tensor<f32> = signal::stack(victims)?;
    let relay = TransmitterProfile::identity(0);
    let mut opt = Adam::<f32>::new(spec.learning_rate * 0.01 * rms)?;

    let sync_thetas: Option<Vec<f64>> = spec
        .phase_sync
        .then(|| victims.iter().map(|v| sync_phase(v, template)).collect());

    let mut losses = Vec::with_capacity(spec.iterations);
    let mut best = ((0usize, f64::INFINITY), raw.clone());
    for it in 0..spec.iterations {
        let theta = if spec.phase_sync { 0.0 } else { rng.random_range(0.0..std::f64::consts::TAU) };
        let offset = rng.random_range(-(jitter as i64)..=jitter as i64) as isize;
        let chan_seed = LoopSeed::new(seed, it as u64);

        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false)?;
        let j = tape.param(raw.clone())?;
        let f = signal::fir_on_tape(&mut tape, j, &taps)?;
        let s = signal::scale_to_energy_on_tape(&mut tape, f, target)?;
        let r = signal::rotate_on_tape(&mut tape, s, theta)?;
        let mut c = loopback_on_tape(&mut tape, r, &relay, spec.channel, &[chan_seed], LoopMode::Differentiable)?;
        if let Some(thetas) = &sync_thetas {
            // Rotation commutes with the linear channel, so aligning after it
            // matches aligning before transmission.
            let aligned = thetas
                .iter()
                .map(|&t| signal::rotate_on_tape(&mut tape, c, t))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            c = tape.concat(&aligned, 0)?;
        }
        let x = tape.constant(victims_t.clone())?;
        let m = signal::mix_on_tape(&mut tape, x, c, offset)?;
        let e = model.forward(&mut tape, &params, m)?;
        let an = tape.constant(anchor_t.clone())?;
        let d = distance_on_tape(&mut tape, e, an)?;
        let mean = tape.mean(d)?;
        let loss = tape.scale(mean, spec.sign as f32)?;
        let value = tape.value(loss)?.values()[0] as f64;
        if !value.is_finite() {
            return Err(JammingError::NonFinite(it));
        }
        let hits = match spec.select_below {
            Some(a) => tape.value(d)?.values().iter().filter(|&&v| (v as f64) < a).count(),
            None => 0,
        };
        if hits > best.0 .0 || (hits == best.0 .0 && value < best.0 .1) {
            best = ((hits, value), raw.clone());
        }
        losses.push(value);
        tape.backward(loss)?;
        let g = tape.grad(j)?;
        opt.step(vec![raw.values_mut()], &[g])?;
    }
    let chosen = if spec.iterations == 0 { raw } else { best.1 };
    let burst = shape_burst(&template.from_channels(chosen.values())?, spec.ratio_db, mean_energy)?;
    Ok((burst, losses))
}

/// Gradient descent on the raw burst samples, maximising the mean distance
/// between jammed and clean fingerprints of the training victims.
pub fn optimize_jamming(model: &EmbedderModel, victims: &[Message], cfg: &JammingConfig, seed: u64) -> Result<JammingSignal> {
    cfg.validate()?;
    check_victims(model, victims)?;
    let waves: Vec<IqWaveform> = victims.iter().map(|v| v.waveform.clone()).collect();
    let clean = embed_batch(model, &waves)?;
    let spec = BurstSpec {
        ratio_db: cfg.ratio_db,
        phase_sync: cfg.phase_sync,
        channel: &cfg.channel,
        iterations: cfg.iterations,
        learning_rate: cfg.learning_rate,
        sign: -1.0,
        init: None,
        select_below: None,
    };
    let (waveform, losses) = optimize_burst(model, &waves, &clean, &spec, seed)?;
    Ok(JammingSignal {
        waveform,
        config: cfg.clone(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        train_ids: victims.iter().map(|v| v.id).collect(),
        phase_reference: cfg.phase_sync.then(|| victims[0].waveform.clone()),
    })
}

/// Filtered complex Gaussian noise normalised exactly like the optimised
/// burst.
pub fn gaussian_baseline(victims: &[Message], cfg: &JammingConfig, seed: u64) -> Result<JammingSignal> {
    check_ratio(cfg.ratio_db)?;
    if victims.is_empty() {
        return Err(JammingError::NoVictims);
    }
    let template = &victims[0].waveform;
    if let Some(v) = victims.iter().find(|v| v.waveform.len() != template.len()) {
        return Err(SignalError::LengthMismatch(template.len(), v.waveform.len()).into());
    }
    let mean_energy = victims.iter().map(|v| v.waveform.energy()).sum::<f64>() / victims.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_7573_73);
    let raw = template.with_samples(complex_gaussian(&mut rng, template.len(), 1.0))?;
    Ok(JammingSignal {
        waveform: shape_burst(&raw, cfg.ratio_db, mean_energy)?,
        config: cfg.clone(),
        final_loss: f64::NAN,
        losses: Vec::new(),
        train_ids: victims.iter().map(|v| v.id).collect(),
        phase_reference: cfg.phase_sync.then(|| victims[0].waveform.clone()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrrPoint {
    pub ratio_db: f64,
    pub frr: f64,
    /// Authentications performed at this ratio.
    pub trials: usize,
    /// Worst relative error of the measured jam/victim energy ratio.
    pub power_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrrCurve {
    pub points: Vec<FrrPoint>,
    pub config_hash: String,
}

impl FrrCurve {
    /// Ratio at which the FRR first reaches `level`, interpolated linearly
    /// between sweep points; `None` if it never does.
    pub fn crossing(&self, level: f64) -> Option<f64> {
        let p = &self.points;
        if p.first()?.frr >= level {
            return Some(p[0].ratio_db);
        }
        p.windows(2).find(|w| w[1].frr >= level).map(|w| {
            let f = (level - w[0].frr) / (w[1].frr - w[0].frr);
            w[0].ratio_db + f * (w[1].ratio_db - w[0].ratio_db)
        })
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["ratio_db", "frr", "trials", "config_hash"]);
        for p in &self.points {
            t.rows.push(vec![
                p.ratio_db.to_string(),
                p.frr.to_string(),
                p.trials.to_string(),
                self.config_hash.clone(),
            ]);
        }
        t
    }
}

fn check_disjoint(train_ids: &[u64], test: &[Message]) -> Result<()> {
    let train: BTreeSet<u64> = train_ids.iter().copied().collect();
    match test.iter().find(|m| train.contains(&m.id)) {
        Some(m) => Err(JammingError::Overlap(m.id)),
        None => Ok(()),
    }
}

/// Carrier phase of `victim` relative to a recorded `reference` header: the
/// argument of their correlation, or 0 when they are orthogonal.
pub fn sync_phase(victim: &IqWaveform, reference: &IqWaveform) -> f64 {
    let c: Complex64 = victim.samples().iter().zip(reference.samples()).map(|(v, r)| v * r.conj()).sum();
    if c.norm() > 0.0 {
        c.arg()
    } else {
        0.0
    }
}

/// One use of the burst on one victim: rescale, rotate (to a random phase,
/// or by the victim's carrier phase against `sync_reference` when given),
/// pass through the attacker channel and add at a jittered offset. Also returns the relative power error.
pub(crate) fn add_burst(
    victim: &IqWaveform,
    burst: &IqWaveform,
    ratio_db: f64,
    channel: &ChannelConfig,
    sync_reference: Option<&IqWaveform>,
    rng: &mut ChaCha8Rng,
) -> Result<(IqWaveform, f64)> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let jitter = max_jitter(victim);
    let offset = rng.random_range(-(jitter as i64)..=jitter as i64) as isize;
    let chan_seed = LoopSeed::new(rng.random(), 0);
    if burst.energy() == 0.0 {
        return Ok((victim.clone(), 0.0));
    }
    let scaled = signal::scale_to_power_ratio(burst, victim, ratio_db)?;
    let theta = sync_reference.map_or(theta, |r| sync_phase(victim, r));
    let want = signal::db_to_linear(ratio_db);
    let err = (scaled.energy() / victim.energy() / want - 1.0).abs();
    let rotated = signal::rotate_phase(&scaled, theta)?;
    let received = apply_channel(&rotated, channel, chan_seed)?;
    Ok((signal::mix(victim, &received, offset)?, err))
}

/// Build every jammed message for one ratio; per-(trial, victim) randomness.
fn jammed_set(signal: &JammingSignal, test: &[Message], ratio_db: f64, trials: usize, seed: u64) -> Result<(Vec<IqWaveform>, f64)> {
    let n = test.len();
    let results = par::map_range(trials * n, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ratio_db.to_bits());
        rng.set_stream(k as u64);
        add_burst(&test[k % n].waveform, &signal.waveform, ratio_db, &signal.config.channel, signal.phase_reference.as_ref(), &mut rng)
    });
    let mut waves = Vec::with_capacity(results.len());
    let mut worst = 0.0f64;
    for r in results {
        let (w, e) = r?;
        waves.push(w);
        worst = worst.max(e);
    }
    Ok((waves, worst))
}

/// False-rejection rate of the jammed test victims at each ratio.
///
/// Each jammed message is authenticated against its transmitter's stored
/// references on a private copy of `policy`, so trials never influence one
/// another.
pub fn evaluate_jamming(
    model: &EmbedderModel,
    policy: &AuthPolicy,
    signal: &JammingSignal,
    test: &[Message],
    ratio_sweep: &[f64],
    trials_per_ratio: usize,
    seed: u64,
) -> Result<FrrCurve> {
    if test.is_empty() || trials_per_ratio == 0 {
        return Err(JammingError::NoVictims);
    }
    check_disjoint(&signal.train_ids, test)?;
    let mut points = Vec::with_capacity(ratio_sweep.len());
    for &ratio in ratio_sweep {
        check_ratio(ratio)?;
        let (waves, power_error) = jammed_set(signal, test, ratio, trials_per_ratio, seed)?;
        let emb = embed_batch(model, &waves)?;
        let mut rejected = 0;
        for (k, e) in emb.iter().enumerate() {
            let mut p = policy.clone();
            if !p.authenticate_embedding(e, test[k % test.len()].transmitter_id)?.accepted {
                rejected += 1;
            }
        }
        points.push(FrrPoint {
            ratio_db: ratio,
            frr: rejected as f64 / emb.len() as f64,
            trials: emb.len(),
            power_error,
        });
    }
    Ok(FrrCurve {
        points,
        config_hash: config_hash(&signal.config),
    })
}

/// Mean distance between jammed and clean fingerprints of `test` at one
/// ratio, over `trials` independent uses per victim.
pub fn mean_displacement(
    model: &EmbedderModel,
    signal: &JammingSignal,
    test: &[Message],
    ratio_db: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() || trials == 0 {
        return Err(JammingError::NoVictims);
    }
    check_ratio(ratio_db)?;
    let (waves, _) = jammed_set(signal, test, ratio_db, trials, seed)?;
    let clean: Vec<IqWaveform> = test.iter().map(|m| m.waveform.clone()).collect();
    let a = embed_batch(model, &waves)?;
    let b = embed_batch(model, &clean)?;
    let mut total = 0.0;
    for (k, x) in a.iter().enumerate() {
        total += distance(x, &b[k % b.len()])?;
    }
    Ok(total / a.len() as f64)
}

/// The usual sweep: `RATIO_MIN_DB..=RATIO_MAX_DB` in `step` dB increments.
pub fn ratio_sweep(step_db: f64) -> Vec<f64> {
    let n = ((RATIO_MAX_DB - RATIO_MIN_DB) / step_db).floor() as usize;
    (0..=n).map(|k| RATIO_MIN_DB + k as f64 * step_db).collect()
}
