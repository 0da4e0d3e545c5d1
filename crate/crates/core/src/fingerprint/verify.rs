use std::collections::BTreeMap;

use super::model::{distance, embed_batch, EmbedderModel};
use super::policy::AuthPolicy;
use super::Result;
use crate::dataset::Message;
use crate::evalkit::ScoreSet;
use crate::signal::IqWaveform;

/// Distances over every unordered message pair, split by whether both
/// messages come from the same transmitter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDistances {
    pub same: Vec<f64>,
    pub different: Vec<f64>,
}

impl PairDistances {
    /// Cross-transmitter distances as positives, same-transmitter as
    /// negatives.
    pub fn score_set(&self) -> ScoreSet {
        ScoreSet::new(self.different.clone(), self.same.clone())
    }

    /// Share of same-transmitter pairs a threshold accepts (`d < a`).
    pub fn acceptance(&self, accept: f64) -> f64 {
        if self.same.is_empty() {
            return 0.0;
        }
        self.same.iter().filter(|&&d| d < accept).count() as f64 / self.same.len() as f64
    }
}

pub fn pair_distances(model: &EmbedderModel, messages: &[&Message]) -> Result<PairDistances> {
    let waves: Vec<IqWaveform> = messages.iter().map(|m| m.waveform.clone()).collect();
    let e = embed_batch(model, &waves)?;
    let mut out = PairDistances::default();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let d = distance(&e[i], &e[j])?;
            if messages[i].transmitter_id == messages[j].transmitter_id {
                out.same.push(d);
            } else {
                out.different.push(d);
            }
        }
    }
    Ok(out)
}

/// The first message of each transmitter, in order of appearance.
pub fn first_per_transmitter<'a>(messages: &[&'a Message]) -> BTreeMap<u32, &'a Message> {
    let mut refs = BTreeMap::new();
    for m in messages {
        refs.entry(m.transmitter_id).or_insert(*m);
    }
    refs
}

/// Enrol each transmitter's first message and return the enrolled ids.
pub fn enroll_first(policy: &mut AuthPolicy, model: &EmbedderModel, messages: &[&Message]) -> Result<Vec<u64>> {
    let refs = first_per_transmitter(messages);
    let waves: Vec<IqWaveform> = refs.values().map(|m| m.waveform.clone()).collect();
    let e = embed_batch(model, &waves)?;
    for ((&t, _), emb) in refs.iter().zip(e) {
        policy.enroll(t, emb);
    }
    Ok(refs.values().map(|m| m.id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::flags;
    use crate::fingerprint::EmbedderArch;
    use crate::signal::{synthesize_header, HeaderSpec};

    fn messages() -> Vec<Message> {
        let h = synthesize_header(&HeaderSpec::default()).unwrap();
        (0..5u64)
            .map(|k| {
                let s = h.samples().iter().map(|v| v * (1.0 + 0.3 * k as f64)).collect();
                Message {
                    id: k,
                    transmitter_id: (k % 2) as u32,
                    flags: flags::LOOPED,
                    waveform: h.with_samples(s).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn pairs_are_partitioned() {
        let arch = EmbedderArch {
            channels: vec![4, 4],
            embedding_dim: 8,
            ..EmbedderArch::default()
        };
        let model = EmbedderModel::init(arch, 1).unwrap();
        let msgs = messages();
        let refs: Vec<&Message> = msgs.iter().collect();
        let p = pair_distances(&model, &refs).unwrap();
        // Transmitter 0 has 3 messages, transmitter 1 has 2.
        assert_eq!(p.same.len(), 3 + 1);
        assert_eq!(p.different.len(), 3 * 2);
        assert_eq!(p.acceptance(1.01), 1.0);

        let mut policy = AuthPolicy::new(0.5, 0.1, 1).unwrap();
        let ids = enroll_first(&mut policy, &model, &refs).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert!(policy.references(1).is_some());
    }
}
