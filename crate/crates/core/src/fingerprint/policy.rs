use std::collections::{BTreeMap, VecDeque};

use super::model::{distance, embed, embed_batch, EmbedderModel, Embedding};
use super::{FingerprintError, Result};
use crate::signal::IqWaveform;

/// Outcome of one authentication attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuthDecision {
    pub accepted: bool,
    pub updated: bool,
    pub distance: f64,
}

/// Acceptance threshold `a`, update threshold `u` and the per-transmitter
/// reference store.
///
/// The score is the mean angular distance to the stored references. A
/// message is accepted iff `score < a`; it replaces the oldest reference iff
/// `u < score < a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthPolicy {
    accept: f64,
    update: f64,
    capacity: usize,
    store: BTreeMap<u32, VecDeque<Embedding>>,
}

impl AuthPolicy {
    pub fn new(accept: f64, update: f64, capacity: usize) -> Result<Self> {
        if !(0.0 <= update && update < accept && accept <= 1.0) {
            return Err(FingerprintError::InvalidThresholds { accept, update });
        }
        if capacity == 0 {
            return Err(FingerprintError::ZeroCapacity);
        }
        Ok(Self {
            accept,
            update,
            capacity,
            store: BTreeMap::new(),
        })
    }

    pub fn accept_threshold(&self) -> f64 {
        self.accept
    }

    pub fn update_threshold(&self) -> f64 {
        self.update
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append a reference, dropping the oldest beyond capacity.
    pub fn enroll(&mut self, transmitter_id: u32, reference: Embedding) {
        let refs = self.store.entry(transmitter_id).or_default();
        refs.push_back(reference);
        while refs.len() > self.capacity {
            refs.pop_front();
        }
    }

    pub fn references(&self, transmitter_id: u32) -> Option<&VecDeque<Embedding>> {
        self.store.get(&transmitter_id)
    }

    /// Mean distance to the stored references, without side effects.
    pub fn score(&self, transmitter_id: u32, e: &Embedding) -> Result<f64> {
        let refs = self
            .store
            .get(&transmitter_id)
            .filter(|r| !r.is_empty())
            .ok_or(FingerprintError::UnknownTransmitter(transmitter_id))?;
        let mut total = 0.0;
        for r in refs {
            total += distance(e, r)?;
        }
        Ok(total / refs.len() as f64)
    }

    pub fn authenticate_embedding(&mut self, e: &Embedding, transmitter_id: u32) -> Result<AuthDecision> {
        let d = self.score(transmitter_id, e)?;
        let accepted = d < self.accept;
        let updated = accepted && d > self.update;
        if updated {
            let refs = self.store.get_mut(&transmitter_id).expect("scored above");
            refs.pop_front();
            refs.push_back(e.clone());
        }
        Ok(AuthDecision {
            accepted,
            updated,
            distance: d,
        })
    }

    pub fn authenticate(&mut self, model: &EmbedderModel, message: &IqWaveform, transmitter_id: u32) -> Result<AuthDecision> {
        if !self.store.contains_key(&transmitter_id) {
            return Err(FingerprintError::UnknownTransmitter(transmitter_id));
        }
        let e = embed(model, message)?;
        self.authenticate_embedding(&e, transmitter_id)
    }
}

/// Smallest threshold accepting at least `target_tpr` of the distances: the
/// `ceil(target * n)`-th smallest value.
pub fn threshold_from_distances(distances: &[f64], target_tpr: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(FingerprintError::EmptyPairs);
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(FingerprintError::InvalidTarget(target_tpr));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((target_tpr * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// Calibrate the acceptance threshold on same-transmitter pairs.
pub fn calibrate_threshold(model: &EmbedderModel, legit_pairs: &[(IqWaveform, IqWaveform)], target_tpr: f64) -> Result<f64> {
    if legit_pairs.is_empty() {
        return Err(FingerprintError::EmptyPairs);
    }
    let (a, b): (Vec<_>, Vec<_>) = legit_pairs.iter().cloned().unzip();
    let ea = embed_batch(model, &a)?;
    let eb = embed_batch(model, &b)?;
    let d = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| distance(x, y))
        .collect::<Result<Vec<_>>>()?;
    threshold_from_distances(&d, target_tpr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(angle: f64) -> Embedding {
        Embedding::new(vec![angle.cos(), angle.sin()]).unwrap()
    }

    /// Embedding at angular distance `d` from `unit(0)`.
    fn at(d: f64) -> Embedding {
        unit(d * std::f64::consts::PI)
    }

    #[test]
    fn thresholds_validated() {
        assert!(AuthPolicy::new(0.5, 0.5, 1).is_err());
        assert!(AuthPolicy::new(0.5, -0.1, 1).is_err());
        assert!(AuthPolicy::new(1.1, 0.1, 1).is_err());
        assert!(AuthPolicy::new(0.5, 0.1, 0).is_err());
        assert!(AuthPolicy::new(0.5, 0.0, 1).is_ok());
    }

    #[test]
    fn decision_bands() {
        let (a, u) = (0.4, 0.1);
        let mut p = AuthPolicy::new(a, u, 1).unwrap();
        p.enroll(7, unit(0.0));
        let d0 = p.authenticate_embedding(&unit(0.0), 7).unwrap();
        assert!(d0.accepted && !d0.updated);

        let mid = at((u + a) / 2.0);
        let d1 = p.authenticate_embedding(&mid, 7).unwrap();
        assert!(d1.accepted && d1.updated);
        assert_eq!(p.references(7).unwrap()[0], mid);

        let mut p = AuthPolicy::new(a, u, 1).unwrap();
        p.enroll(7, unit(0.0));
        // Probe exactly at the boundary by comparing against the measured score.
        let probe = at(a);
        let d = p.score(7, &probe).unwrap();
        let mut exact = AuthPolicy::new(d, u, 1).unwrap();
        exact.enroll(7, unit(0.0));
        let r = exact.authenticate_embedding(&probe, 7).unwrap();
        assert!(!r.accepted && !r.updated);
    }

    #[test]
    fn unknown_transmitter_is_an_error() {
        let mut p = AuthPolicy::new(0.5, 0.1, 2).unwrap();
        assert_eq!(
            p.authenticate_embedding(&unit(0.0), 3),
            Err(FingerprintError::UnknownTransmitter(3))
        );
    }

    #[test]
    fn store_never_exceeds_capacity() {
        let mut p = AuthPolicy::new(0.9, 0.0, 3).unwrap();
        for k in 0..10 {
            p.enroll(1, unit(k as f64 * 0.01));
        }
        assert_eq!(p.references(1).unwrap().len(), 3);
        for k in 0..10 {
            p.authenticate_embedding(&unit(0.2 + k as f64 * 0.01), 1).unwrap();
            assert_eq!(p.references(1).unwrap().len(), 3);
        }
    }

    #[test]
    fn quantile_oracle() {
        let mut d = vec![0.1; 95];
        d.extend(vec![0.9; 5]);
        assert_eq!(threshold_from_distances(&d, 0.95).unwrap(), 0.1);
        let v = [0.3, 0.05, 0.7, 0.2];
        assert!(threshold_from_distances(&v, 1.0).unwrap() >= 0.7);
        assert!(threshold_from_distances(&[], 0.9).is_err());
        assert!(threshold_from_distances(&v, 0.0).is_err());
    }
}
