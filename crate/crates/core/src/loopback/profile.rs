//! Parametric transmitter fingerprints and the per-severity ranges they are
//! drawn from.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Legit,
    Attacker,
}

/// Hardware impairments of one transmitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitterProfile {
    pub profile_id: u64,
    pub gain_imbalance_db: f64,
    pub quadrature_error_deg: f64,
    /// `[re, im]` relative to unit power.
    pub dc_offset: [f64; 2],
    /// Cycles per sample.
    pub carrier_offset: f64,
    /// Random-walk step standard deviation per sample.
    pub phase_noise_std_rad: f64,
    /// Third- and fifth-order AM/AM coefficients.
    pub pa_am_am: [f64; 2],
    /// Radians per unit instantaneous power.
    pub pa_am_pm: f64,
    pub ripple_seed: u64,
    /// Scale of the off-centre ripple taps; 0 disables the ripple filter.
    pub ripple_depth: f64,
}

/// Closed interval a parameter magnitude is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Magnitude ranges per parameter; signs and DC angle are uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRanges {
    pub gain_imbalance_db: Range,
    pub quadrature_error_deg: Range,
    pub dc_offset_mag: Range,
    pub carrier_offset: Range,
    pub phase_noise_std_rad: Range,
    /// Magnitude of the (compressive, negative) third-order term.
    pub pa_am_am3: Range,
    pub pa_am_am5: Range,
    pub pa_am_pm: Range,
    pub ripple_depth: Range,
}

impl SeverityRanges {
    pub const LEGIT: SeverityRanges = SeverityRanges {
        gain_imbalance_db: Range::new(0.05, 1.0),
        quadrature_error_deg: Range::new(0.2, 5.0),
        dc_offset_mag: Range::new(0.0, 0.05),
        carrier_offset: Range::new(0.0, 2e-4),
        phase_noise_std_rad: Range::new(1e-3, 5e-3),
        pa_am_am3: Range::new(0.01, 0.08),
        pa_am_am5: Range::new(0.0, 0.01),
        pa_am_pm: Range::new(0.0, 0.05),
        ripple_depth: Range::new(0.005, 0.03),
    };

    /// Attacker SDRs: milder, with a small carrier offset, so a bounded
    /// pre-distortion can in principle cancel them.
    pub const ATTACKER: SeverityRanges = SeverityRanges {
        gain_imbalance_db: Range::new(0.2, 0.6),
        quadrature_error_deg: Range::new(0.5, 2.0),
        dc_offset_mag: Range::new(0.0, 0.02),
        carrier_offset: Range::new(0.0, 2e-5),
        phase_noise_std_rad: Range::new(5e-4, 2e-3),
        pa_am_am3: Range::new(0.01, 0.05),
        pa_am_am5: Range::new(0.0, 0.005),
        pa_am_pm: Range::new(0.0, 0.03),
        ripple_depth: Range::new(0.005, 0.02),
    };

    pub fn of(severity: Severity) -> &'static SeverityRanges {
        match severity {
            Severity::Legit => &Self::LEGIT,
            Severity::Attacker => &Self::ATTACKER,
        }
    }

    pub fn contains(&self, p: &TransmitterProfile) -> bool {
        let dc = p.dc_offset[0].hypot(p.dc_offset[1]);
        self.gain_imbalance_db.contains(p.gain_imbalance_db.abs())
            && self.quadrature_error_deg.contains(p.quadrature_error_deg.abs())
            && self.dc_offset_mag.contains(dc)
            && self.carrier_offset.contains(p.carrier_offset.abs())
            && self.phase_noise_std_rad.contains(p.phase_noise_std_rad)
            && self.pa_am_am3.contains(-p.pa_am_am[0])
            && self.pa_am_am5.contains(p.pa_am_am[1])
            && self.pa_am_pm.contains(p.pa_am_pm)
            && self.ripple_depth.contains(p.ripple_depth)
    }
}

fn signed(rng: &mut ChaCha8Rng, magnitude: f64) -> f64 {
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Deterministic draw: the same `(id, severity, seed)` always yields the same
/// profile.
pub fn sample_profile(transmitter_id: u64, severity: Severity, seed: u64) -> TransmitterProfile {
    let r = SeverityRanges::of(severity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(transmitter_id.wrapping_mul(2) + matches!(severity, Severity::Attacker) as u64);
    let gain = r.gain_imbalance_db.draw(&mut rng);
    let gain_imbalance_db = signed(&mut rng, gain);
    let quad = r.quadrature_error_deg.draw(&mut rng);
    let quadrature_error_deg = signed(&mut rng, quad);
    let dc_mag = r.dc_offset_mag.draw(&mut rng);
    let dc_angle = rng.random_range(0.0..2.0 * PI);
    let cfo = r.carrier_offset.draw(&mut rng);
    let carrier_offset = signed(&mut rng, cfo);
    TransmitterProfile {
        profile_id: transmitter_id,
        gain_imbalance_db,
        quadrature_error_deg,
        dc_offset: [dc_mag * dc_angle.cos(), dc_mag * dc_angle.sin()],
        carrier_offset,
        phase_noise_std_rad: r.phase_noise_std_rad.draw(&mut rng),
        pa_am_am: [-r.pa_am_am3.draw(&mut rng), r.pa_am_am5.draw(&mut rng)],
        pa_am_pm: r.pa_am_pm.draw(&mut rng),
        ripple_seed: rng.random(),
        ripple_depth: r.ripple_depth.draw(&mut rng),
    }
}

pub const RIPPLE_TAPS: usize = 5;

impl TransmitterProfile {
    /// No impairments at all.
    pub fn identity(profile_id: u64) -> Self {
        Self {
            profile_id,
            gain_imbalance_db: 0.0,
            quadrature_error_deg: 0.0,
            dc_offset: [0.0, 0.0],
            carrier_offset: 0.0,
            phase_noise_std_rad: 0.0,
            pa_am_am: [0.0, 0.0],
            pa_am_pm: 0.0,
            ripple_seed: 0,
            ripple_depth: 0.0,
        }
    }

    pub fn dc(&self) -> Complex64 {
        Complex64::new(self.dc_offset[0], self.dc_offset[1])
    }

    /// `(I gain, Q gain)`, split symmetrically so the I/Q power ratio is
    /// `10^(gain_imbalance_db / 10)`.
    pub fn iq_gains(&self) -> (f64, f64) {
        let g = 10f64.powf(self.gain_imbalance_db / 40.0);
        (g, g.recip())
    }

    /// Centre tap 1, outer taps `ripple_depth * N(0, 1)`.
    pub fn ripple_taps(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.ripple_seed);
        (0..RIPPLE_TAPS)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                if k == RIPPLE_TAPS / 2 {
                    1.0
                } else {
                    self.ripple_depth * z
                }
            })
            .collect()
    }
}
