//! The virtual transmit-receive loop: transmitter impairments followed by a
//! channel. Every random quantity of one pass (phase-noise path, fading taps,
//! noise) is drawn up front into a [`Realization`], so the same pass can be
//! replayed on a tape with the randomness frozen.

pub mod channel;
pub mod profile;
pub mod service;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Scalar, Tape, Tensor, Var};
use crate::signal::{self, IqWaveform, SignalError};

pub use channel::{ChannelConfig, Fading, Tap, PRESET_NAMES};
pub use profile::{sample_profile, Range, Severity, SeverityRanges, TransmitterProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("unknown channel preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid channel config: {0}")]
    Config(String),
    #[error("batch of {batch} waveforms but {seeds} seeds")]
    BatchMismatch { batch: usize, seeds: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, LoopError>;

/// Seed plus a draw counter; each `(rng_seed, draw_index)` pair is an
/// independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopSeed {
    pub rng_seed: u64,
    pub draw_index: u64,
}

const PHASE_STREAM: u64 = 1;
const FADING_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

impl LoopSeed {
    pub fn new(rng_seed: u64, draw_index: u64) -> Self {
        Self { rng_seed, draw_index }
    }

    pub fn next(self) -> Self {
        Self {
            draw_index: self.draw_index + 1,
            ..self
        }
    }

    fn rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(self.draw_index);
        rng
    }
}

/// How gradients cross the loop on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Exact gradients through the loop with the randomness frozen.
    Differentiable,
    /// Forward through the loop, identity gradient (hardware-like).
    StraightThrough,
}

/// Frozen randomness of a single loop pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    /// Accumulated phase-noise walk, one entry per sample.
    pub phase_walk: Vec<f64>,
    /// `(delay, complex gain)` per channel tap.
    pub taps: Vec<(usize, Complex64)>,
    /// Absolute noise samples; empty for a noiseless channel.
    pub noise: Vec<Complex64>,
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn draw_phase_walk(p: &TransmitterProfile, len: usize, seed: LoopSeed) -> Vec<f64> {
    let mut rng = seed.rng(PHASE_STREAM);
    let mut acc = 0.0;
    let mut walk = Vec::with_capacity(len);
    walk.push(0.0);
    for _ in 1..len {
        let z: f64 = rng.sample(StandardNormal);
        acc += p.phase_noise_std_rad * z;
        walk.push(acc);
    }
    walk
}

fn draw_taps(c: &ChannelConfig, seed: LoopSeed) -> Vec<(usize, Complex64)> {
    let powers = c.normalized_powers();
    match c {
        ChannelConfig::Wired { .. } => vec![(0, Complex64::new(powers[0].sqrt(), 0.0))],
        ChannelConfig::Tdl { taps, .. } => {
            let mut rng = seed.rng(FADING_STREAM);
            taps.iter()
                .zip(&powers)
                .map(|(t, &p)| {
                    let z = complex_normal(&mut rng);
                    let amp = p.sqrt();
                    let h = match t.fading {
                        Fading::Rayleigh => z * amp,
                        Fading::Rician { k_db } if k_db == f64::INFINITY => Complex64::new(amp, 0.0),
                        Fading::Rician { k_db } => {
                            let k = 10f64.powf(k_db / 10.0);
                            // Line-of-sight component at phase 0.
                            (Complex64::new((k / (k + 1.0)).sqrt(), 0.0) + z * (1.0 / (k + 1.0)).sqrt()) * amp
                        }
                    };
                    (t.delay_samples, h)
                })
                .collect()
        }
    }
}

fn draw_unit_noise(c: &ChannelConfig, len: usize, seed: LoopSeed) -> Option<(Vec<Complex64>, f64)> {
    match c {
        ChannelConfig::Wired { .. } => None,
        ChannelConfig::Tdl { snr_db, .. } => {
            let mut rng = seed.rng(NOISE_STREAM);
            let noise = (0..len).map(|_| complex_normal(&mut rng)).collect();
            Some((noise, 10f64.powf(snr_db / 10.0)))
        }
    }
}

// ---- plain path ----

fn transmit(x: &[Complex64], p: &TransmitterProfile, walk: &[f64]) -> Vec<Complex64> {
    let (gi, gq) = p.iq_gains();
    let skew = p.quadrature_error_deg.to_radians();
    let (cs, ss) = (skew.cos(), skew.sin());
    let dc = p.dc();
    let [a3, a5] = p.pa_am_am;
    let b = p.pa_am_pm;
    x.iter()
        .enumerate()
        .map(|(n, s)| {
            let i = s.re * gi;
            let q = s.im * gq;
            let q = q * cs + i * ss;
            let v = Complex64::new(i, q) + dc;
            let theta = 2.0 * PI * p.carrier_offset * n as f64 + walk[n];
            let v = v * Complex64::new(theta.cos(), theta.sin());
            let m = v.norm_sqr();
            let gain = 1.0 + a3 * m + a5 * m * m;
            let ph = b * m;
            Complex64::new(v.re * ph.cos() - v.im * ph.sin(), v.re * ph.sin() + v.im * ph.cos()) * gain
        })
        .collect()
}

fn transmit_waveform(w: &IqWaveform, p: &TransmitterProfile, walk: &[f64]) -> Result<IqWaveform> {
    let out = w.with_samples(transmit(w.samples(), p, walk))?;
    if p.ripple_depth == 0.0 {
        return Ok(out);
    }
    Ok(signal::apply_fir(&out, &p.ripple_taps())?)
}

fn fade(x: &[Complex64], taps: &[(usize, Complex64)]) -> Vec<Complex64> {
    (0..x.len())
        .map(|n| {
            taps.iter()
                .filter(|(d, _)| *d <= n)
                .map(|&(d, h)| x[n - d] * h)
                .sum()
        })
        .collect()
}

fn scaled_noise(faded: &[Complex64], unit: Option<(Vec<Complex64>, f64)>) -> Vec<Complex64> {
    match unit {
        None => Vec::new(),
        Some((noise, snr)) => {
            let power = faded.iter().map(|s| s.norm_sqr()).sum::<f64>() / faded.len() as f64;
            let sigma = (power / snr).sqrt();
            noise.into_iter().map(|z| z * sigma).collect()
        }
    }
}

fn add_noise(mut y: Vec<Complex64>, noise: &[Complex64]) -> Vec<Complex64> {
    y.iter_mut().zip(noise).for_each(|(a, &b)| *a += b);
    y
}

/// Transmitter impairments in fixed order: IQ gain imbalance, quadrature
/// skew, DC offset, carrier offset, phase-noise walk, polynomial PA, ripple.
pub fn apply_transmitter(w: &IqWaveform, p: &TransmitterProfile, seed: LoopSeed) -> Result<IqWaveform> {
    transmit_waveform(w, p, &draw_phase_walk(p, w.len(), seed))
}

/// Tapped-delay-line convolution with fresh fading, then noise at the
/// configured SNR relative to the faded signal. Wired is pure scaling.
pub fn apply_channel(w: &IqWaveform, c: &ChannelConfig, seed: LoopSeed) -> Result<IqWaveform> {
    c.validate()?;
    let faded = fade(w.samples(), &draw_taps(c, seed));
    let noise = scaled_noise(&faded, draw_unit_noise(c, w.len(), seed));
    Ok(w.with_samples(add_noise(faded, &noise))?)
}

/// Draw every random quantity of one pass of `w` through the loop.
pub fn realize(w: &IqWaveform, p: &TransmitterProfile, c: &ChannelConfig, seed: LoopSeed) -> Result<Realization> {
    c.validate()?;
    let phase_walk = draw_phase_walk(p, w.len(), seed);
    let taps = draw_taps(c, seed);
    let tx = transmit_waveform(w, p, &phase_walk)?;
    let noise = scaled_noise(&fade(tx.samples(), &taps), draw_unit_noise(c, w.len(), seed));
    Ok(Realization {
        phase_walk,
        taps,
        noise,
    })
}

/// Replay a frozen pass on a new input.
pub fn apply_realization(w: &IqWaveform, p: &TransmitterProfile, r: &Realization) -> Result<IqWaveform> {
    let tx = transmit_waveform(w, p, &r.phase_walk)?;
    Ok(w.with_samples(add_noise(fade(tx.samples(), &r.taps), &r.noise))?)
}

/// Transmitter then channel; a pure function of its arguments.
pub fn loopback(w: &IqWaveform, p: &TransmitterProfile, c: &ChannelConfig, seed: LoopSeed) -> Result<IqWaveform> {
    apply_realization(w, p, &realize(w, p, c, seed)?)
}

// ---- tape path ----

fn transmit_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &TransmitterProfile, walks: &[&[f64]]) -> Result<Var> {
    let len = tape.shape(x)?[2];
    let (i, q) = signal::split_iq(tape, x)?;
    let (gi, gq) = p.iq_gains();
    let i = tape.scale(i, S::of(gi))?;
    let q = tape.scale(q, S::of(gq))?;
    let skew = p.quadrature_error_deg.to_radians();
    let qc = tape.scale(q, S::of(skew.cos()))?;
    let is = tape.scale(i, S::of(skew.sin()))?;
    let q = tape.add(qc, is)?;
    let i = tape.offset(i, S::of(p.dc_offset[0]))?;
    let q = tape.offset(q, S::of(p.dc_offset[1]))?;
    let v = tape.concat(&[i, q], 1)?;

    let (mut re, mut im) = (Vec::with_capacity(walks.len() * len), Vec::with_capacity(walks.len() * len));
    for walk in walks {
        for (n, &phi) in walk.iter().enumerate() {
            let theta = 2.0 * PI * p.carrier_offset * n as f64 + phi;
            re.push(theta.cos());
            im.push(theta.sin());
        }
    }
    let v = signal::complex_mul_const(tape, v, &re, &im)?;

    let [a3, a5] = p.pa_am_am;
    let b = p.pa_am_pm;
    let mut v = v;
    if a3 != 0.0 || a5 != 0.0 || b != 0.0 {
        let (i, q) = signal::split_iq(tape, v)?;
        let i2 = tape.square(i)?;
        let q2 = tape.square(q)?;
        let m = tape.add(i2, q2)?;
        let (i, q) = if b != 0.0 {
            let ph = tape.scale(m, S::of(b))?;
            let c = tape.cos(ph)?;
            let s = tape.sin(ph)?;
            let ic = tape.mul(i, c)?;
            let qs = tape.mul(q, s)?;
            let is = tape.mul(i, s)?;
            let qc = tape.mul(q, c)?;
            (tape.sub(ic, qs)?, tape.add(is, qc)?)
        } else {
            (i, q)
        };
        let m3 = tape.scale(m, S::of(a3))?;
        let m2 = tape.square(m)?;
        let m5 = tape.scale(m2, S::of(a5))?;
        let poly = tape.add(m3, m5)?;
        let gain = tape.offset(poly, S::one())?;
        let i = tape.mul(i, gain)?;
        let q = tape.mul(q, gain)?;
        v = tape.concat(&[i, q], 1)?;
    }
    if p.ripple_depth != 0.0 {
        v = signal::fir_on_tape(tape, v, &p.ripple_taps())?;
    }
    Ok(v)
}

/// Replay frozen passes on a `[batch, 2, len]` variable, one realization per
/// batch element.
pub fn realization_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &TransmitterProfile,
    rs: &[Realization],
) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let (batch, len) = (shape[0], shape[2]);
    if rs.len() != batch {
        return Err(LoopError::BatchMismatch { batch, seeds: rs.len() });
    }
    let walks: Vec<&[f64]> = rs.iter().map(|r| r.phase_walk.as_slice()).collect();
    let tx = transmit_on_tape(tape, x, p, &walks)?;

    let mut acc: Option<Var> = None;
    for k in 0..rs[0].taps.len() {
        let delay = rs[0].taps[k].0;
        let shifted = signal::shift_on_tape(tape, tx, delay as isize)?;
        let mut re = Vec::with_capacity(batch * len);
        let mut im = Vec::with_capacity(batch * len);
        for r in rs {
            let h = r.taps[k].1;
            re.extend(std::iter::repeat_n(h.re, len));
            im.extend(std::iter::repeat_n(h.im, len));
        }
        let term = signal::complex_mul_const(tape, shifted, &re, &im)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let mut y = acc.expect("channel has at least one tap");
    if rs.iter().any(|r| !r.noise.is_empty()) {
        let mut values = Vec::with_capacity(batch * 2 * len);
        for r in rs {
            values.extend(r.noise.iter().map(|z| S::of(z.re)));
            values.extend(r.noise.iter().map(|z| S::of(z.im)));
        }
        let noise = tape.constant(Tensor::new(shape.clone(), values)?)?;
        y = tape.add(y, noise)?;
    }
    Ok(y)
}

fn waveforms_of<S: Scalar>(t: &Tensor<S>) -> Result<Vec<IqWaveform>> {
    let len = t.shape()[2];
    t.values()
        .chunks(2 * len)
        .map(|c| {
            let samples = (0..len)
                .map(|n| Complex64::new(c[n].as_f64(), c[len + n].as_f64()))
                .collect();
            Ok(IqWaveform::new(samples, 1.0)?)
        })
        .collect()
}

/// Pass each batch element of `x` through the loop with its own seed.
pub fn loopback_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &TransmitterProfile,
    c: &ChannelConfig,
    seeds: &[LoopSeed],
    mode: LoopMode,
) -> Result<Var> {
    let waves = waveforms_of(tape.value(x)?)?;
    if waves.len() != seeds.len() {
        return Err(LoopError::BatchMismatch {
            batch: waves.len(),
            seeds: seeds.len(),
        });
    }
    let rs = waves
        .iter()
        .zip(seeds)
        .map(|(w, &s)| realize(w, p, c, s))
        .collect::<Result<Vec<_>>>()?;
    match mode {
        LoopMode::Differentiable => realization_on_tape(tape, x, p, &rs),
        LoopMode::StraightThrough => {
            let shape = tape.shape(x)?.to_vec();
            let xv = tape.value(x)?.values().to_vec();
            let len = shape[2];
            let mut delta = Vec::with_capacity(xv.len());
            for (e, (w, r)) in waves.iter().zip(&rs).enumerate() {
                let y = apply_realization(w, p, r)?;
                let base = &xv[e * 2 * len..(e + 1) * 2 * len];
                delta.extend(y.samples().iter().enumerate().map(|(n, s)| S::of(s.re) - base[n]));
                delta.extend(y.samples().iter().enumerate().map(|(n, s)| S::of(s.im) - base[len + n]));
            }
            let d = tape.constant(Tensor::new(shape, delta)?)?;
            Ok(tape.add(x, d)?)
        }
    }
}
