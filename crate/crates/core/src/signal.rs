//! Baseband waveforms, header synthesis and the DSP primitives shared by
//! every attack: FIR filtering, phase rotation, power-ratio scaling and
//! mixing.
//!
//! Each primitive exists twice: a plain version on [`IqWaveform`] and a
//! differentiable version (`*_on_tape`) on `[batch, 2, len]` tape variables.
//! The two are kept numerically identical so the plain path can act as the
//! reference for the tape path in tests.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{Conv1dSpec, GradError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("waveform has no samples")]
    Empty,
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidSampleRate(f64),
    #[error("sample rate {sample_rate} is not an integer multiple (>= 2) of symbol rate {symbol_rate}")]
    InvalidSymbolRate { sample_rate: f64, symbol_rate: f64 },
    #[error("sample rates differ: {0} vs {1}")]
    SampleRateMismatch(f64, f64),
    #[error("waveform lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("roll-off must lie in (0, 1], got {0}")]
    RolloffOutOfRange(f64),
    #[error("invalid header spec: {0}")]
    InvalidHeader(String),
    #[error("cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("filter needs at least 2 taps, got {0}")]
    TooFewTaps(usize),
    #[error("filter coefficients are empty")]
    EmptyCoefficients,
    #[error("filter of {taps} taps is longer than the {len}-sample waveform")]
    FilterTooLong { taps: usize, len: usize },
    #[error("{0} waveform has zero energy")]
    ZeroEnergy(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Complex baseband samples plus rate metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct IqWaveform {
    samples: Vec<Complex64>,
    sample_rate_hz: f64,
    symbol_rate_hz: Option<f64>,
}

impl IqWaveform {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(SignalError::InvalidSampleRate(sample_rate_hz));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            symbol_rate_hz: None,
        })
    }

    pub fn with_symbol_rate(mut self, symbol_rate_hz: f64) -> Result<Self> {
        let ratio = self.sample_rate_hz / symbol_rate_hz;
        if !(symbol_rate_hz > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 2.0 {
            return Err(SignalError::InvalidSymbolRate {
                sample_rate: self.sample_rate_hz,
                symbol_rate: symbol_rate_hz,
            });
        }
        self.symbol_rate_hz = Some(symbol_rate_hz);
        Ok(self)
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<Complex64>) -> Result<Self> {
        let mut out = Self::new(samples, self.sample_rate_hz)?;
        out.symbol_rate_hz = self.symbol_rate_hz;
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            samples: vec![Complex64::new(0.0, 0.0); self.len()],
            sample_rate_hz: self.sample_rate_hz,
            symbol_rate_hz: self.symbol_rate_hz,
        }
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn symbol_rate_hz(&self) -> Option<f64> {
        self.symbol_rate_hz
    }

    pub fn samples_per_symbol(&self) -> Option<usize> {
        self.symbol_rate_hz
            .map(|r| (self.sample_rate_hz / r).round() as usize)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    /// Stacked-channel tensor `[1, 2, len]`: I samples, then Q samples.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        stack(std::slice::from_ref(self)).expect("single waveform always stacks")
    }

    /// Rebuild from a stacked `[2 * len]` channel slice, reusing this
    /// waveform's metadata.
    pub fn from_channels<S: Scalar>(&self, channels: &[S]) -> Result<Self> {
        let len = channels.len() / 2;
        let samples = (0..len)
            .map(|i| Complex64::new(channels[i].as_f64(), channels[len + i].as_f64()))
            .collect();
        self.with_samples(samples)
    }
}

/// Stack equal-length waveforms into a `[n, 2, len]` tensor.
pub fn stack<S: Scalar>(waves: &[IqWaveform]) -> Result<Tensor<S>> {
    let first = waves.first().ok_or(SignalError::Empty)?;
    let len = first.len();
    let mut values = Vec::with_capacity(waves.len() * 2 * len);
    for w in waves {
        if w.len() != len {
            return Err(SignalError::LengthMismatch(len, w.len()));
        }
        values.extend(w.samples.iter().map(|s| S::of(s.re)));
        values.extend(w.samples.iter().map(|s| S::of(s.im)));
    }
    Ok(Tensor::new(vec![waves.len(), 2, len], values)?)
}

/// Split a `[n, 2, len]` tensor back into waveforms carrying `template`'s
/// metadata.
pub fn unstack<S: Scalar>(tensor: &Tensor<S>, template: &IqWaveform) -> Result<Vec<IqWaveform>> {
    let per = 2 * tensor.shape()[2];
    tensor
        .values()
        .chunks(per)
        .map(|c| template.from_channels(c))
        .collect()
}

// ---- header synthesis ----

/// A fixed burst header: QPSK symbols shaped by a root-raised-cosine filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeaderSpec {
    /// QPSK symbol indices in `0..4`.
    pub symbol_pattern: Vec<u8>,
    pub differential: bool,
    pub samples_per_symbol: usize,
    pub rrc_rolloff: f64,
    pub rrc_span_symbols: usize,
    pub sample_rate_hz: f64,
}

impl Default for HeaderSpec {
    /// 64 symbols at 8 samples per symbol (512 samples) and 25 MS/s.
    fn default() -> Self {
        Self {
            symbol_pattern: default_pattern(64),
            differential: true,
            samples_per_symbol: 8,
            rrc_rolloff: 0.4,
            rrc_span_symbols: 8,
            sample_rate_hz: 25e6,
        }
    }
}

/// Deterministic pseudo-random symbol pattern from a 7-bit LFSR.
pub fn default_pattern(symbols: usize) -> Vec<u8> {
    let mut state: u8 = 0x5b;
    let mut next_bit = || {
        let bit = ((state >> 6) ^ (state >> 5)) & 1;
        state = ((state << 1) | bit) & 0x7f;
        bit
    };
    (0..symbols).map(|_| (next_bit() << 1) | next_bit()).collect()
}

impl HeaderSpec {
    pub fn total_samples(&self) -> usize {
        self.symbol_pattern.len() * self.samples_per_symbol
    }

    pub fn symbol_rate_hz(&self) -> f64 {
        self.sample_rate_hz / self.samples_per_symbol as f64
    }

    fn validate(&self) -> Result<()> {
        if !(self.rrc_rolloff > 0.0 && self.rrc_rolloff <= 1.0) {
            return Err(SignalError::RolloffOutOfRange(self.rrc_rolloff));
        }
        if self.symbol_pattern.is_empty() {
            return Err(SignalError::InvalidHeader("empty symbol pattern".into()));
        }
        if self.symbol_pattern.iter().any(|&s| s > 3) {
            return Err(SignalError::InvalidHeader("QPSK symbols must be in 0..4".into()));
        }
        if self.samples_per_symbol < 2 {
            return Err(SignalError::InvalidHeader("need at least 2 samples per symbol".into()));
        }
        if self.rrc_span_symbols == 0 {
            return Err(SignalError::InvalidHeader("filter span must be positive".into()));
        }
        Ok(())
    }
}

/// Root-raised-cosine impulse response with unit energy, `span * sps + 1` taps.
pub fn rrc_taps(rolloff: f64, span_symbols: usize, sps: usize) -> Vec<f64> {
    let n = span_symbols * sps;
    let b = rolloff;
    let mut taps: Vec<f64> = (0..=n)
        .map(|i| {
            let t = (i as f64 - n as f64 / 2.0) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - b + 4.0 * b / PI
            } else if (t.abs() - 1.0 / (4.0 * b)).abs() < 1e-9 {
                b / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin() + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
                num / den
            }
        })
        .collect();
    let norm = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|v| *v /= norm);
    taps
}

/// Unit-average-power RRC-shaped QPSK burst; identical specs give identical
/// samples.
pub fn synthesize_header(spec: &HeaderSpec) -> Result<IqWaveform> {
    spec.validate()?;
    let sps = spec.samples_per_symbol;
    let mut phase = 0u8;
    let symbols: Vec<Complex64> = spec
        .symbol_pattern
        .iter()
        .map(|&s| {
            let idx = if spec.differential {
                phase = (phase + s) % 4;
                phase
            } else {
                s
            };
            let angle = PI / 4.0 + idx as f64 * PI / 2.0;
            Complex64::from_polar(1.0, angle)
        })
        .collect();

    let taps = rrc_taps(spec.rrc_rolloff, spec.rrc_span_symbols, sps);
    let delay = taps.len() / 2;
    let total = spec.total_samples();
    // Full convolution of the impulse train with the pulse, trimmed so the
    // first output sample is centred on the first symbol.
    let mut samples = vec![Complex64::new(0.0, 0.0); total];
    for (k, &sym) in symbols.iter().enumerate() {
        for (j, &h) in taps.iter().enumerate() {
            let pos = (k * sps + j) as isize - delay as isize;
            if pos >= 0 && (pos as usize) < total {
                samples[pos as usize] += sym * h;
            }
        }
    }
    let power = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / total as f64;
    let scale = power.sqrt().recip();
    samples.iter_mut().for_each(|s| *s *= scale);
    IqWaveform::new(samples, spec.sample_rate_hz)?.with_symbol_rate(spec.symbol_rate_hz())
}

// ---- filtering ----

/// Hamming-windowed sinc low-pass, normalised to unit DC gain.
pub fn design_fir_lowpass(cutoff_hz: f64, sample_rate_hz: f64, num_taps: usize) -> Result<Vec<f64>> {
    let nyquist = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(SignalError::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    if num_taps < 2 {
        return Err(SignalError::TooFewTaps(num_taps));
    }
    let fc = cutoff_hz / sample_rate_hz;
    let m = (num_taps - 1) as f64;
    let mut h: Vec<f64> = (0..num_taps)
        .map(|i| {
            let x = i as f64 - m / 2.0;
            let sinc = if x.abs() < 1e-12 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos();
            sinc * window
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    // Enforce exact symmetry against rounding in the window evaluation.
    for i in 0..num_taps / 2 {
        let avg = 0.5 * (h[i] + h[num_taps - 1 - i]);
        h[i] = avg;
        h[num_taps - 1 - i] = avg;
    }
    Ok(h)
}

/// Taps before the filter's alignment point; output sample `n` is
/// `sum_k h[k] x[n + fir_delay - k]`.
pub fn fir_delay(num_taps: usize) -> usize {
    (num_taps - 1) / 2
}

fn fir_spec(num_taps: usize) -> Conv1dSpec {
    let delay = fir_delay(num_taps);
    Conv1dSpec {
        stride: 1,
        pad_left: num_taps - 1 - delay,
        pad_right: delay,
    }
}

/// Same-length, zero-padded convolution with the group delay removed.
pub fn apply_fir(w: &IqWaveform, coeffs: &[f64]) -> Result<IqWaveform> {
    if coeffs.is_empty() {
        return Err(SignalError::EmptyCoefficients);
    }
    if coeffs.len() > w.len() {
        return Err(SignalError::FilterTooLong {
            taps: coeffs.len(),
            len: w.len(),
        });
    }
    let delay = fir_delay(coeffs.len()) as isize;
    let x = w.samples();
    let n = x.len() as isize;
    let out = (0..n)
        .map(|i| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &h) in coeffs.iter().enumerate() {
                let j = i + delay - k as isize;
                if j >= 0 && j < n {
                    acc += x[j as usize] * h;
                }
            }
            acc
        })
        .collect();
    w.with_samples(out)
}

/// Multiply every sample by `e^{j theta}`.
pub fn rotate_phase(w: &IqWaveform, theta_rad: f64) -> Result<IqWaveform> {
    let rot = Complex64::from_polar(1.0, theta_rad);
    w.with_samples(w.samples().iter().map(|&s| s * rot).collect())
}

/// Scale `attacker` so its energy is `10^(ratio_db/10)` times `victim`'s.
pub fn scale_to_power_ratio(attacker: &IqWaveform, victim: &IqWaveform, ratio_db: f64) -> Result<IqWaveform> {
    scale_to_energy(attacker, victim.energy() * db_to_linear(ratio_db), "victim")
}

/// Scale `w` to a given total energy.
pub fn scale_to_energy(w: &IqWaveform, target_energy: f64, reference: &'static str) -> Result<IqWaveform> {
    if !(target_energy > 0.0) {
        return Err(SignalError::ZeroEnergy(reference));
    }
    let e = w.energy();
    if !(e > 0.0) {
        return Err(SignalError::ZeroEnergy("attacker"));
    }
    let k = (target_energy / e).sqrt();
    w.with_samples(w.samples().iter().map(|&s| s * k).collect())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// `victim[n] + attacker[n - offset]` wherever the shifted attacker overlaps
/// the victim.
pub fn mix(victim: &IqWaveform, attacker: &IqWaveform, sample_offset: isize) -> Result<IqWaveform> {
    if victim.sample_rate_hz() != attacker.sample_rate_hz() {
        return Err(SignalError::SampleRateMismatch(
            victim.sample_rate_hz(),
            attacker.sample_rate_hz(),
        ));
    }
    let a = attacker.samples();
    let out = victim
        .samples()
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let j = n as isize - sample_offset;
            if j >= 0 && (j as usize) < a.len() {
                v + a[j as usize]
            } else {
                v
            }
        })
        .collect();
    victim.with_samples(out)
}

// ---- differentiable counterparts on `[batch, 2, len]` variables ----

/// [`apply_fir`] on a tape variable.
pub fn fir_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, coeffs: &[f64]) -> Result<Var> {
    if coeffs.is_empty() {
        return Err(SignalError::EmptyCoefficients);
    }
    let shape = tape.shape(x)?.to_vec();
    let flat = tape.reshape(x, &[shape[0] * shape[1], 1, shape[2]])?;
    // conv1d correlates, so the kernel is reversed to get a convolution.
    let kernel: Vec<S> = coeffs.iter().rev().map(|&c| S::of(c)).collect();
    let w = tape.constant(Tensor::new(vec![1, 1, coeffs.len()], kernel)?)?;
    let y = tape.conv1d(flat, w, None, fir_spec(coeffs.len()))?;
    Ok(tape.reshape(y, &shape)?)
}

/// Split a `[batch, 2, len]` variable into its I and Q channels.
pub fn split_iq<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<(Var, Var)> {
    Ok((tape.slice(x, 1, 0, 1)?, tape.slice(x, 1, 1, 1)?))
}

/// Multiply by complex constants `re + j im`, given either one row of `len`
/// values shared by the batch or `batch * len` values, one row per element.
pub fn complex_mul_const<S: Scalar>(tape: &mut Tape<S>, x: Var, re: &[f64], im: &[f64]) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let (batch, len) = (shape[0], shape[2]);
    let cshape = if re.len() == len {
        vec![len]
    } else if re.len() == batch * len {
        vec![batch, 1, len]
    } else {
        return Err(SignalError::LengthMismatch(len, re.len()));
    };
    if im.len() != re.len() {
        return Err(SignalError::LengthMismatch(re.len(), im.len()));
    }
    let (i, q) = split_iq(tape, x)?;
    let cr = tape.constant(Tensor::new(cshape.clone(), re.iter().map(|&v| S::of(v)).collect())?)?;
    let ci = tape.constant(Tensor::new(cshape, im.iter().map(|&v| S::of(v)).collect())?)?;
    let ir = tape.mul(i, cr)?;
    let qi = tape.mul(q, ci)?;
    let ii = tape.mul(i, ci)?;
    let qr = tape.mul(q, cr)?;
    let out_i = tape.sub(ir, qi)?;
    let out_q = tape.add(ii, qr)?;
    Ok(tape.concat(&[out_i, out_q], 1)?)
}

/// [`rotate_phase`] on a tape variable.
pub fn rotate_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, theta_rad: f64) -> Result<Var> {
    let (c, s) = (theta_rad.cos(), theta_rad.sin());
    let (i, q) = split_iq(tape, x)?;
    let ic = tape.scale(i, S::of(c))?;
    let qs = tape.scale(q, S::of(s))?;
    let is = tape.scale(i, S::of(s))?;
    let qc = tape.scale(q, S::of(c))?;
    let out_i = tape.sub(ic, qs)?;
    let out_q = tape.add(is, qc)?;
    Ok(tape.concat(&[out_i, out_q], 1)?)
}

/// Total energy of a variable as a `[1]` variable.
pub fn energy_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    Ok(tape.sum(sq)?)
}

/// Rescale `x` to the given total energy (gradient flows through the
/// normalisation).
pub fn scale_to_energy_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, target_energy: f64) -> Result<Var> {
    if !(target_energy > 0.0) {
        return Err(SignalError::ZeroEnergy("victim"));
    }
    let e = energy_on_tape(tape, x)?;
    if tape.value(e)?.values()[0] <= S::zero() {
        return Err(SignalError::ZeroEnergy("attacker"));
    }
    let norm = tape.sqrt(e)?;
    let unit = tape.div(x, norm)?;
    Ok(tape.scale(unit, S::of(target_energy.sqrt()))?)
}

/// Shift a `[batch, 2, len]` variable by `offset` samples along time,
/// zero-filling.
pub fn shift_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, offset: isize) -> Result<Var> {
    if offset == 0 {
        return Ok(x);
    }
    let shape = tape.shape(x)?.to_vec();
    let len = shape[2];
    let k = offset.unsigned_abs().min(len);
    if k == len {
        return Ok(tape.constant(Tensor::zeros(&shape))?);
    }
    let zeros = tape.constant(Tensor::zeros(&[shape[0], shape[1], k]))?;
    if offset > 0 {
        let body = tape.slice(x, 2, 0, len - k)?;
        Ok(tape.concat(&[zeros, body], 2)?)
    } else {
        let body = tape.slice(x, 2, k, len - k)?;
        Ok(tape.concat(&[body, zeros], 2)?)
    }
}

/// [`mix`] on tape variables; `attacker` may have batch 1 and is broadcast
/// over the victims.
pub fn mix_on_tape<S: Scalar>(tape: &mut Tape<S>, victim: Var, attacker: Var, offset: isize) -> Result<Var> {
    let shifted = shift_on_tape(tape, attacker, offset)?;
    let vs = tape.shape(victim)?.to_vec();
    let as_ = tape.shape(shifted)?.to_vec();
    if vs[1..] != as_[1..] {
        return Err(SignalError::LengthMismatch(vs[2], as_[2]));
    }
    let rhs = if as_[0] == 1 && vs[0] != 1 {
        tape.reshape(shifted, &as_[1..])?
    } else {
        shifted
    };
    Ok(tape.add(victim, rhs)?)
}
