//! Brute-force metric oracles shared by the test targets.

use rfpa::evalkit::ScoreSet;

/// AUC by counting every (positive, negative) pair; ties count half.
pub fn auc_oracle(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    for &p in &s.positives {
        for &n in &s.negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (s.positives.len() * s.negatives.len()) as f64
}

/// EER by exhaustive enumeration: FAR/FRR at every candidate threshold
/// (accept iff score < t), then the lowest point where any chord between
/// two operating points meets FAR = FRR.
pub fn eer_oracle(s: &ScoreSet) -> f64 {
    let mut ts: Vec<f64> = s.positives.iter().chain(&s.negatives).copied().collect();
    ts.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let far = s.positives.iter().filter(|&&p| p < t).count() as f64 / s.positives.len() as f64;
            let frr = s.negatives.iter().filter(|&&n| n >= t).count() as f64 / s.negatives.len() as f64;
            (far, frr)
        })
        .collect();
    let mut best = f64::INFINITY;
    for p in &pts {
        for q in &pts {
            let (dp, dq) = (p.0 - p.1, q.0 - q.1);
            if dp <= 0.0 && dq >= 0.0 {
                let v = if dp == dq {
                    p.0
                } else {
                    let f = dp / (dp - dq);
                    p.0 + f * (q.0 - p.0)
                };
                best = best.min(v);
            }
        }
    }
    best
}
