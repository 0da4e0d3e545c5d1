//! Reference-update poisoning: a chain of crafted messages, each accepted
//! and stored as the new reference, that walks the stored fingerprint from a
//! victim's message to a target fingerprint.
//!
//! The generator and the verifier are deliberately separate: the verifier
//! only replays waveforms through [`AuthPolicy::authenticate`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Message;
use crate::evalkit::{config_hash, CsvTable};
use crate::fingerprint::{distance, distance_on_tape, embed, AuthPolicy, EmbedderModel, Embedding, FingerprintError};
use crate::grad::{Adam, GradError, Tape, Tensor};
use crate::par;
use crate::signal::{IqWaveform, SignalError};

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("thresholds must satisfy 0 <= u < a <= 1 (a = {accept}, u = {update})")]
    Thresholds { accept: f64, update: f64 },
    #[error("learning rate must be positive")]
    LearningRate,
    #[error("only successful outcomes can be verified")]
    NotSuccess,
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, PoisonError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisonConfig {
    pub accept: f64,
    pub update: f64,
    pub inclusive: bool,
    pub max_steps: usize,
    pub max_iters_per_step: usize,
    /// Adam step size relative to the RMS amplitude of the first message.
    pub learning_rate: f64,
    /// Hinge margin as a fraction of `accept - update`.
    pub margin_fraction: f64,
    pub band_weight: f64,
    pub target_weight: f64,
    pub origin_weight: f64,
    /// Optional cap on each crafted message's energy.
    pub max_energy: Option<f64>,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            accept: 0.8,
            update: 0.05,
            inclusive: false,
            max_steps: 50,
            max_iters_per_step: 1000,
            learning_rate: 0.01,
            margin_fraction: 0.1,
            band_weight: 1.0,
            target_weight: 1.0,
            origin_weight: 1.0,
            max_energy: None,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, u) = (self.accept, self.update);
        if !(0.0 <= u && u < a && a <= 1.0) {
            return Err(PoisonError::Thresholds { accept: a, update: u });
        }
        if !(self.learning_rate > 0.0) {
            return Err(PoisonError::LearningRate);
        }
        Ok(())
    }
}

/// What the stored reference should end up accepting.
#[derive(Clone, Debug, PartialEq)]
pub enum PoisonTarget {
    /// A message whose fingerprint should be accepted.
    Message(IqWaveform),
    /// An arbitrary unit-norm fingerprint.
    Fingerprint(Embedding),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Transmitter,
    RandomFingerprint,
}

impl PoisonTarget {
    pub fn kind(&self) -> TargetKind {
        match self {
            Self::Message(_) => TargetKind::Transmitter,
            Self::Fingerprint(_) => TargetKind::RandomFingerprint,
        }
    }

    fn embedding(&self, model: &EmbedderModel) -> Result<Embedding> {
        Ok(match self {
            Self::Message(w) => embed(model, w)?,
            Self::Fingerprint(e) => e.clone(),
        })
    }
}

/// A uniformly random point on the unit sphere of the model's embedding
/// space.
pub fn random_fingerprint(dim: usize, seed: u64) -> Result<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Embedding::normalized(v)?)
}

/// `n` random (origin, target message) pairs from different transmitters.
pub fn cross_transmitter_pairs(messages: &[&Message], n: usize, seed: u64) -> Vec<(IqWaveform, PoisonTarget)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let Some(first) = messages.first() else {
        return out;
    };
    if messages.iter().all(|m| m.transmitter_id == first.transmitter_id) {
        return out;
    }
    while out.len() < n {
        let o = messages[rng.random_range(0..messages.len())];
        let t = messages[rng.random_range(0..messages.len())];
        if o.transmitter_id != t.transmitter_id {
            out.push((o.waveform.clone(), PoisonTarget::Message(t.waveform.clone())));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoisonStep {
    pub waveform: IqWaveform,
    /// Distance to the previous reference.
    pub d_prev: f64,
    pub d_target: f64,
    /// Distance to the original message.
    pub d_origin: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoisonStatus {
    Success { steps: usize },
    FailMaxSteps,
    FailNoStep { at_step: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoisonOutcome {
    pub status: PoisonStatus,
    pub origin: IqWaveform,
    pub sequence: Vec<PoisonStep>,
    pub accept: f64,
    pub update: f64,
    pub inclusive: bool,
    pub target: PoisonTarget,
    /// Distance from the original message to the target.
    pub initial_distance: f64,
}

impl PoisonOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self.status, PoisonStatus::Success { .. })
    }
}

/// Most steps a successful run can need: every step closes more than `u`
/// of the gap and the run ends once the gap is below `a`.
pub fn step_bound(initial_distance: f64, accept: f64, update: f64) -> usize {
    if initial_distance < accept {
        return 0;
    }
    1 + ((initial_distance - accept) / update).ceil() as usize
}

struct StepCheck {
    d_prev: f64,
    d_target: f64,
    d_origin: f64,
}

impl StepCheck {
    fn holds(&self, cfg: &PoisonConfig, prev_target: f64) -> bool {
        let band = cfg.update < self.d_prev && self.d_prev < cfg.accept;
        let progress = prev_target - self.d_target > cfg.update;
        let origin = !cfg.inclusive || self.d_origin < cfg.accept;
        band && progress && origin
    }
}

fn embedding_tensor(e: &Embedding) -> Result<Tensor<f32>> {
    Ok(Tensor::new(vec![1, e.dim()], e.values().iter().map(|&v| v as f32).collect())?)
}

/// Scale `x` down in place if its energy exceeds `cap`.
fn clamp_energy(x: &mut Tensor<f32>, cap: Option<f64>) {
    if let Some(cap) = cap {
        let e: f64 = x.values().iter().map(|&v| (v as f64) * (v as f64)).sum();
        if e > cap && e > 0.0 {
            let k = (cap / e).sqrt() as f32;
            x.values_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Search for the next message of the chain starting from `current`.
#[allow(clippy::too_many_arguments)]
fn next_step(
    model: &EmbedderModel,
    cfg: &PoisonConfig,
    current: &Tensor<f32>,
    e_prev: &Embedding,
    e_target: &Embedding,
    e_origin: &Embedding,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Tensor<f32>, StepCheck, usize)>> {
    let prev_target = distance(e_prev, e_target)?;
    let margin = cfg.margin_fraction * (cfg.accept - cfg.update);
    let (lo, hi) = (cfg.update + margin, cfg.accept - margin);
    let mut x = current.clone();
    // Nudge off the previous message so the distance gradient is defined.
    x.values_mut()
        .iter_mut()
        .for_each(|v| *v += (lr * rng.sample::<f64, _>(StandardNormal)) as f32);
    let prev_t = embedding_tensor(e_prev)?;
    let target_t = embedding_tensor(e_target)?;
    let origin_t = embedding_tensor(e_origin)?;
    let mut opt = Adam::<f32>::new(lr)?;
    for it in 0..cfg.max_iters_per_step {
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false)?;
        let xv = tape.param(x.clone())?;
        let e = model.forward(&mut tape, &params, xv)?;
        let ev = Embedding::new(tape.value(e)?.values().iter().map(|&v| v as f64).collect())?;
        let check = StepCheck {
            d_prev: distance(&ev, e_prev)?,
            d_target: distance(&ev, e_target)?,
            d_origin: distance(&ev, e_origin)?,
        };
        if check.holds(cfg, prev_target) {
            return Ok(Some((x, check, it)));
        }

        let pv = tape.constant(prev_t.clone())?;
        let d_prev = distance_on_tape(&mut tape, e, pv)?;
        let below = tape.scale(d_prev, -1.0)?;
        let below = tape.offset(below, lo as f32)?;
        let below = tape.relu(below)?;
        let above = tape.offset(d_prev, -hi as f32)?;
        let above = tape.relu(above)?;
        let band = tape.add(below, above)?;
        let mut loss = tape.scale(band, cfg.band_weight as f32)?;

        let tv = tape.constant(target_t.clone())?;
        let d_target = distance_on_tape(&mut tape, e, tv)?;
        let t_term = tape.scale(d_target, cfg.target_weight as f32)?;
        loss = tape.add(loss, t_term)?;

        if cfg.inclusive {
            let ov = tape.constant(origin_t.clone())?;
            let d_origin = distance_on_tape(&mut tape, e, ov)?;
            let over = tape.offset(d_origin, -hi as f32)?;
            let over = tape.relu(over)?;
            let o_term = tape.scale(over, cfg.origin_weight as f32)?;
            loss = tape.add(loss, o_term)?;
        }
        let loss = tape.sum(loss)?;
        if !tape.value(loss)?.values()[0].is_finite() {
            log::debug!("non-finite poisoning loss at iteration {it}");
            return Ok(None);
        }
        tape.backward(loss)?;
        let g = tape.grad(xv)?;
        opt.step(vec![x.values_mut()], &[g])?;
        clamp_energy(&mut x, cfg.max_energy);
    }
    Ok(None)
}

/// Build a poisoning chain from `origin` towards `target`.
pub fn generate_poison_sequence(
    model: &EmbedderModel,
    origin: &IqWaveform,
    target: &PoisonTarget,
    cfg: &PoisonConfig,
    seed: u64,
) -> Result<PoisonOutcome> {
    cfg.validate()?;
    model.check_len(origin)?;
    if let PoisonTarget::Message(w) = target {
        model.check_len(w)?;
    }
    let e_origin = embed(model, origin)?;
    let e_target = target.embedding(model)?;
    let initial_distance = distance(&e_origin, &e_target)?;
    let lr = cfg.learning_rate * (origin.mean_power()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut outcome = PoisonOutcome {
        status: PoisonStatus::FailMaxSteps,
        origin: origin.clone(),
        sequence: Vec::new(),
        accept: cfg.accept,
        update: cfg.update,
        inclusive: cfg.inclusive,
        target: target.clone(),
        initial_distance,
    };
    let mut current: Tensor<f32> = origin.to_tensor();
    let mut e_current = e_origin.clone();
    for step in 0..=cfg.max_steps {
        if distance(&e_current, &e_target)? < cfg.accept {
            outcome.status = PoisonStatus::Success { steps: step };
            return Ok(outcome);
        }
        if step == cfg.max_steps {
            break;
        }
        match next_step(model, cfg, &current, &e_current, &e_target, &e_origin, lr, &mut rng)? {
            Some((x, check, iterations)) => {
                let waveform = origin.from_channels(x.values())?;
                e_current = embed(model, &waveform)?;
                current = x;
                outcome.sequence.push(PoisonStep {
                    waveform,
                    d_prev: check.d_prev,
                    d_target: check.d_target,
                    d_origin: check.d_origin,
                    iterations,
                });
            }
            None => {
                outcome.status = PoisonStatus::FailNoStep { at_step: step };
                return Ok(outcome);
            }
        }
    }
    outcome.status = PoisonStatus::FailMaxSteps;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyFailure {
    /// Index into the sequence, or `sequence.len()` for the final checks.
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyTrace {
    pub distances: Vec<f64>,
    pub failure: Option<VerifyFailure>,
}

impl VerifyTrace {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Replay a successful chain through a fresh single-reference store.
///
/// Every crafted message must be accepted and stored; afterwards the target
/// must be accepted against the poisoned reference, and in inclusive mode so
/// must the original message.
pub fn verify_sequence(model: &EmbedderModel, outcome: &PoisonOutcome, inclusive: bool) -> Result<VerifyTrace> {
    if !outcome.is_success() {
        return Err(PoisonError::NotSuccess);
    }
    const ID: u32 = 0;
    let mut policy = AuthPolicy::new(outcome.accept, outcome.update, 1)?;
    policy.enroll(ID, embed(model, &outcome.origin)?);
    let mut trace = VerifyTrace {
        distances: Vec::new(),
        failure: None,
    };
    for (i, s) in outcome.sequence.iter().enumerate() {
        let d = policy.authenticate(model, &s.waveform, ID)?;
        trace.distances.push(d.distance);
        let reason = if !d.accepted {
            Some(format!("distance {} is not below a = {}", d.distance, outcome.accept))
        } else if !d.updated {
            Some(format!("distance {} is not above u = {}", d.distance, outcome.update))
        } else {
            None
        };
        if let Some(reason) = reason {
            trace.failure = Some(VerifyFailure { step: i, reason });
            return Ok(trace);
        }
    }
    let end = outcome.sequence.len();
    let mut probe = policy.clone();
    let target = match &outcome.target {
        PoisonTarget::Message(w) => probe.authenticate(model, w, ID)?,
        PoisonTarget::Fingerprint(e) => probe.authenticate_embedding(e, ID)?,
    };
    trace.distances.push(target.distance);
    if !target.accepted {
        trace.failure = Some(VerifyFailure {
            step: end,
            reason: format!("target rejected at distance {}", target.distance),
        });
        return Ok(trace);
    }
    if inclusive {
        let mut probe = policy.clone();
        let back = probe.authenticate(model, &outcome.origin, ID)?;
        trace.distances.push(back.distance);
        if !back.accepted {
            trace.failure = Some(VerifyFailure {
                step: end,
                reason: format!("original message rejected at distance {}", back.distance),
            });
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub accept: f64,
    pub update: f64,
    pub inclusive: bool,
    /// Mean step count over successful pairs; `NaN` if none succeeded.
    pub mean_steps: f64,
    pub fail_fraction: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub cells: Vec<HeatCell>,
    pub config_hash: String,
}

impl Heatmap {
    pub fn cell(&self, accept: f64, update: f64) -> Option<&HeatCell> {
        self.cells.iter().find(|c| c.accept == accept && c.update == update)
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["a", "u", "inclusive", "mean_steps", "fail_fraction", "n_pairs", "config_hash"]);
        for c in &self.cells {
            t.rows.push(vec![
                c.accept.to_string(),
                c.update.to_string(),
                c.inclusive.to_string(),
                c.mean_steps.to_string(),
                c.fail_fraction.to_string(),
                c.n_pairs.to_string(),
                self.config_hash.clone(),
            ]);
        }
        t
    }
}

/// Run every `(a, u)` cell with `u < a` on every pair.
pub fn threshold_sweep(
    model: &EmbedderModel,
    pairs: &[(IqWaveform, PoisonTarget)],
    accept_grid: &[f64],
    update_grid: &[f64],
    base: &PoisonConfig,
    seed: u64,
) -> Result<Heatmap> {
    let cells: Vec<(f64, f64)> = update_grid
        .iter()
        .flat_map(|&u| accept_grid.iter().filter(move |&&a| u < a).map(move |&a| (a, u)))
        .collect();
    let jobs = cells.len() * pairs.len();
    let results = par::map_range(jobs, |k| {
        let (a, u) = cells[k / pairs.len()];
        let (origin, target) = &pairs[k % pairs.len()];
        let cfg = PoisonConfig {
            accept: a,
            update: u,
            ..base.clone()
        };
        generate_poison_sequence(model, origin, target, &cfg, seed.wrapping_add(k as u64)).map(|o| o.status)
    });
    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(cells.len());
    for &(a, u) in &cells {
        let mut steps = Vec::new();
        let mut fails = 0;
        for r in results.by_ref().take(pairs.len()) {
            match r? {
                PoisonStatus::Success { steps: s } => steps.push(s as f64),
                _ => fails += 1,
            }
        }
        out.push(HeatCell {
            accept: a,
            update: u,
            inclusive: base.inclusive,
            mean_steps: if steps.is_empty() {
                f64::NAN
            } else {
                steps.iter().sum::<f64>() / steps.len() as f64
            },
            fail_fraction: fails as f64 / pairs.len().max(1) as f64,
            n_pairs: pairs.len(),
        });
    }
    Ok(Heatmap {
        cells: out,
        config_hash: config_hash(base),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::EmbedderArch;
    use crate::signal::{rotate_phase, synthesize_header, HeaderSpec};

    fn model() -> EmbedderModel {
        EmbedderModel::init(
            EmbedderArch {
                channels: vec![4, 8],
                embedding_dim: 8,
                ..EmbedderArch::default()
            },
            11,
        )
        .unwrap()
    }

    fn header() -> IqWaveform {
        synthesize_header(&HeaderSpec::default()).unwrap()
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(step_bound(0.3, 0.5, 0.05), 0);
        assert_eq!(step_bound(0.5, 0.5, 0.05), 1);
        assert_eq!(step_bound(0.61, 0.5, 0.05), 4);
    }

    #[test]
    fn thresholds_checked_first() {
        let cfg = PoisonConfig {
            accept: 0.2,
            update: 0.2,
            ..PoisonConfig::default()
        };
        let h = header();
        assert!(matches!(
            generate_poison_sequence(&model(), &h, &PoisonTarget::Message(h.clone()), &cfg, 0),
            Err(PoisonError::Thresholds { .. })
        ));
    }

    #[test]
    fn already_close_is_zero_steps() {
        let h = header();
        let out = generate_poison_sequence(&model(), &h, &PoisonTarget::Message(h.clone()), &PoisonConfig::default(), 0).unwrap();
        assert_eq!(out.status, PoisonStatus::Success { steps: 0 });
        assert!(verify_sequence(&model(), &out, true).unwrap().passed());
    }

    #[test]
    fn chain_reaches_target_and_verifies() {
        let m = model();
        let h = header();
        let target = PoisonTarget::Fingerprint(random_fingerprint(8, 4).unwrap());
        let cfg = PoisonConfig {
            accept: 0.3,
            update: 0.02,
            max_iters_per_step: 300,
            ..PoisonConfig::default()
        };
        let out = generate_poison_sequence(&m, &rotate_phase(&h, 0.3).unwrap(), &target, &cfg, 1).unwrap();
        if let PoisonStatus::Success { steps } = out.status {
            assert!(steps <= step_bound(out.initial_distance, cfg.accept, cfg.update));
            assert!(out.sequence.iter().all(|s| cfg.update < s.d_prev && s.d_prev < cfg.accept));
            let trace = verify_sequence(&m, &out, false).unwrap();
            assert!(trace.passed(), "{:?}", trace.failure);
        } else {
            assert!(verify_sequence(&m, &out, false).is_err());
        }
    }

    #[test]
    fn verifier_catches_boundary_step() {
        let m = model();
        let h = header();
        let step = rotate_phase(&h, 0.5).unwrap();
        let d = distance(&embed(&m, &h).unwrap(), &embed(&m, &step).unwrap()).unwrap();
        // A step whose distance equals the update threshold is never stored.
        let out = PoisonOutcome {
            status: PoisonStatus::Success { steps: 1 },
            origin: h.clone(),
            sequence: vec![PoisonStep {
                waveform: step.clone(),
                d_prev: d,
                d_target: 0.0,
                d_origin: d,
                iterations: 0,
            }],
            accept: (d + 0.5).min(1.0),
            update: d,
            inclusive: false,
            target: PoisonTarget::Message(step),
            initial_distance: d,
        };
        let trace = verify_sequence(&m, &out, false).unwrap();
        let f = trace.failure.expect("must fail");
        assert_eq!(f.step, 0);
        assert!(f.reason.contains("not above u"));
    }

    #[test]
    fn sweep_skips_invalid_cells() {
        let m = model();
        let h = header();
        let pairs = vec![(h.clone(), PoisonTarget::Message(h.clone()))];
        let map = threshold_sweep(&m, &pairs, &[0.1, 0.5], &[0.05, 0.2], &PoisonConfig::default(), 0).unwrap();
        let cells: Vec<(f64, f64)> = map.cells.iter().map(|c| (c.accept, c.update)).collect();
        assert_eq!(cells, vec![(0.1, 0.05), (0.5, 0.05), (0.5, 0.2)]);
        assert!(map.cells.iter().all(|c| c.mean_steps == 0.0 && c.fail_fraction == 0.0));
        assert_eq!(map.to_table().rows.len(), 3);
    }
}
