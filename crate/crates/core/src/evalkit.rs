//! Verification metrics and CSV output.
//!
//! Scores are distances: higher means "more likely an attack / a different
//! transmitter". A score is accepted iff it is strictly below the threshold,
//! so at threshold `t` the false-reject rate is the share of legit scores
//! `>= t` and the false-accept rate the share of attack scores `< t`.
//!
//! The EER is read off the convex hull of the (FAR, FRR) operating points,
//! i.e. the best error balance reachable by mixing two thresholds.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} score list is empty")]
    EmptySide(&'static str),
    #[error("scores must be finite")]
    NonFinite,
    #[error("histogram needs at least one bin and lo < hi")]
    BadHistogram,
    #[error("row has {got} fields, header has {expected}")]
    RowWidth { expected: usize, got: usize },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Attack (positive) and legit (negative) scores with row metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
    pub condition: String,
    pub config_hash: String,
}

impl ScoreSet {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Self {
        Self {
            positives,
            negatives,
            ..Self::default()
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            positives: self.negatives.clone(),
            negatives: self.positives.clone(),
            ..self.clone()
        }
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(EvalError::EmptySide("positive"));
        }
        if self.negatives.is_empty() {
            return Err(EvalError::EmptySide("negative"));
        }
        if self.positives.iter().chain(&self.negatives).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(())
    }
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn roc_auc(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let mut all: Vec<(f64, bool)> = s
        .positives
        .iter()
        .map(|&v| (v, true))
        .chain(s.negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += mid_rank * pos_in_group as f64;
        i = j;
    }
    let (np, nn) = (s.positives.len() as f64, s.negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// `(FAR, FRR)` at every distinct score plus `+inf`, thresholds ascending.
pub fn operating_points(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    s.check()?;
    let mut pos = s.positives.clone();
    let mut neg = s.negatives.clone();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut ip, mut ineg) = (0, 0);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            while ip < pos.len() && pos[ip] < t {
                ip += 1;
            }
            while ineg < neg.len() && neg[ineg] < t {
                ineg += 1;
            }
            (ip as f64 / np, (neg.len() - ineg) as f64 / nn)
        })
        .collect())
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Equal error rate on the convex hull of the operating points.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    let mut pts = operating_points(s)?;
    // FAR ascends and FRR descends along the sweep; sort to break ties.
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    // Lower hull (monotone chain).
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for p in pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da == 0.0 {
            return Ok(a.0);
        }
        if da < 0.0 && db >= 0.0 {
            let f = da / (da - db);
            return Ok(a.0 + f * (b.0 - a.0));
        }
    }
    let last = *hull.last().expect("at least one point");
    Ok(last.0.max(last.1).min(0.5))
}

/// Share of legit scores at or above `threshold`.
pub fn frr_at(threshold: f64, legit_scores: &[f64]) -> f64 {
    if legit_scores.is_empty() {
        return 0.0;
    }
    legit_scores.iter().filter(|&&v| v >= threshold).count() as f64 / legit_scores.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[lo, hi]`; out-of-range scores fall in the end
/// bins so the counts always sum to the number of scores.
pub fn histogram(scores: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if n_bins == 0 || !(lo < hi) {
        return Err(EvalError::BadHistogram);
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; n_bins];
    for &s in scores {
        let b = ((s - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(n_bins - 1) };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// First 16 hex digits of the SHA-256 of `value` rendered as TOML.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).unwrap_or_else(|e| format!("unserializable: {e}"));
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// A header plus string rows, written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(EvalError::RowWidth {
                expected: self.header.len(),
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))
    }
}

/// Write `table` to `path`, creating parent directories.
pub fn export_csv(table: &CsvTable, path: &Path) -> Result<()> {
    let bytes = table.to_bytes()?;
    let wrap = |source| EvalError::Write {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    fs::write(path, bytes).map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(neg: &[f64], pos: &[f64]) -> ScoreSet {
        ScoreSet::new(pos.to_vec(), neg.to_vec())
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(roc_auc(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(roc_auc(&set(&[0.3, 0.6], &[0.3, 0.6])).unwrap(), 0.5);
        assert_eq!(roc_auc(&set(&[0.1, 0.4], &[0.3, 0.5])).unwrap(), 0.75);
    }

    #[test]
    fn eer_reference_values() {
        assert_eq!(eer(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 0.0);
        assert!((eer(&set(&[0.3, 0.6, 0.7], &[0.3, 0.6, 0.7])).unwrap() - 0.5).abs() < 1e-12);
        assert!((eer(&set(&[0.1, 0.4], &[0.3, 0.5])).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_side_rejected() {
        assert!(roc_auc(&set(&[], &[0.1])).is_err());
        assert!(eer(&set(&[0.1], &[])).is_err());
    }

    #[test]
    fn frr_edges() {
        let s = [0.1, 0.2, 0.3];
        assert_eq!(frr_at(0.31, &s), 0.0);
        assert_eq!(frr_at(0.0, &s), 1.0);
        assert!((frr_at(0.2, &s) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.1, 0.5, 0.9, 1.5, -1.0], 1, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![5]);
        let h = histogram(&[0.1, 0.5, 0.9, 1.0], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(h.edges.len(), 5);
        assert!(histogram(&[], 0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        #[derive(Serialize)]
        struct C {
            a: f64,
        }
        assert_eq!(config_hash(&C { a: 1.0 }), config_hash(&C { a: 1.0 }));
        assert_ne!(config_hash(&C { a: 1.0 }), config_hash(&C { a: 2.0 }));
        assert_eq!(config_hash(&C { a: 1.0 }).len(), 16);
    }

    #[test]
    fn csv_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CsvTable::new(["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        let p1 = dir.path().join("one.csv");
        let p2 = dir.path().join("sub/two.csv");
        export_csv(&t, &p1).unwrap();
        export_csv(&t, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read_to_string(&p1).unwrap(), "a,b\n1,\"x,y\"\n");
    }
}
