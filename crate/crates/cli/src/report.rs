//! Collate a run's CSVs into a markdown summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use crate::run::Run;

/// A CSV as header plus string rows.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(String::from).collect()))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Some(Self { header, rows }))
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Rows restricted to `cols`, dropping the hash column everywhere.
    fn markdown(&self, cols: &[&str]) -> String {
        let idx: Vec<usize> = cols.iter().filter_map(|c| self.col(c)).collect();
        let mut s = String::new();
        let names: Vec<&str> = idx.iter().map(|&i| self.header[i].as_str()).collect();
        let _ = writeln!(s, "| {} |", names.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(idx.len()));
        for r in &self.rows {
            let cells: Vec<String> = idx.iter().map(|&i| short(&r[i])).collect();
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s
    }
}

/// Numbers to four decimals, anything else unchanged.
fn short(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) if v.contains('.') => format!("{x:.4}"),
        _ => v.to_string(),
    }
}

/// Ratio at which an FRR column first reaches one half.
fn crossing(t: &Table) -> Option<f64> {
    let (r, f) = (t.col("ratio_db")?, t.col("frr")?);
    let pts: Vec<(f64, f64)> = t
        .rows
        .iter()
        .filter_map(|row| Some((row[r].parse().ok()?, row[f].parse().ok()?)))
        .collect();
    if pts.first()?.1 >= 0.5 {
        return Some(pts[0].0);
    }
    pts.windows(2)
        .find(|w| w[1].1 >= 0.5)
        .map(|w| w[0].0 + (0.5 - w[0].1) / (w[1].1 - w[0].1) * (w[1].0 - w[0].0))
}

/// PASS/FAIL lines of a captured acceptance run.
fn acceptance_table(text: &str) -> String {
    let mut s = String::from("| criterion | result | check | measured |\n|---|---|---|---|\n");
    for line in text.lines().filter(|l| l.starts_with("criterion ")) {
        let rest = line["criterion ".len()..].trim_start();
        let mut parts = rest.splitn(3, ' ');
        let (Some(id), Some(tag), Some(tail)) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let (name, detail) = tail.split_once(": ").unwrap_or((tail, ""));
        let name = name.split(" [").next().unwrap_or(name);
        let _ = writeln!(s, "| {id} | {tag} | {name} | {} |", detail.replace('|', "/"));
    }
    s
}

pub fn report(run: &Run, acceptance: Option<&Path>) -> Result<()> {
    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n\nConfig hash `{}`, seed {}.\n", run.hash, run.config.seed);
    let load = |name: &str| Table::load(&run.path(name));

    if let Some(t) = load("eval_verification.csv")? {
        let _ = writeln!(md, "## Verification\n\n{}", t.markdown(&["metric", "value"]));
    }

    let (opt, gauss) = (load("jam_frr.csv")?, load("jam_frr_gaussian.csv")?);
    if opt.is_some() || gauss.is_some() {
        let _ = writeln!(md, "## Jamming\n\n| signal | 50% FRR crossing (dB) |\n|---|---|");
        for (name, t) in [("optimised", &opt), ("gaussian", &gauss)] {
            if let Some(t) = t {
                let c = crossing(t).map_or("not reached".into(), |c| format!("{c:.1}"));
                let _ = writeln!(md, "| {name} | {c} |");
            }
        }
        md.push('\n');
        if let Some(t) = &opt {
            let _ = writeln!(md, "Optimised signal FRR by ratio:\n\n{}", t.markdown(&["ratio_db", "frr", "trials"]));
        }
    }

    if let Some(t) = load("poison_outcomes.csv")? {
        let ok = t.col("verified").map_or(0, |c| t.rows.iter().filter(|r| r[c] == "true").count());
        let _ = writeln!(md, "## Poisoning\n\n{ok} of {} runs succeeded and verified.\n", t.rows.len());
        let _ = writeln!(md, "{}", t.markdown(&["pair", "target", "status", "steps", "step_bound", "verified"]));
    }
    if let Some(t) = load("poison_heatmap.csv")? {
        let _ = writeln!(
            md,
            "Threshold sweep:\n\n{}",
            t.markdown(&["a", "u", "inclusive", "mean_steps", "fail_fraction", "n_pairs"])
        );
    }

    if let Some(t) = load("spoof_gd.csv")? {
        let _ = writeln!(
            md,
            "## Gradient-descent spoofing\n\n{}",
            t.markdown(&["channel", "phase_sync", "ratio_db", "success_rate", "replay_success_rate"])
        );
    }

    if let Some(t) = load("eval_spoof.csv")? {
        let _ = writeln!(
            md,
            "## Replay attacks against the victim and the discriminator\n\n{}",
            t.markdown(&["condition", "embedder", "attack", "auc", "eer"])
        );
    }

    if let Some(p) = acceptance {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let _ = writeln!(md, "## Acceptance\n\n{}", acceptance_table(&text));
    }
    run.write("report.md", md.as_bytes())?;
    println!("wrote {}", run.path("report.md").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_lines_parsed() {
        let log = "noise\ncriterion  3 PASS jamming effectiveness ordering [12s]: gap 12.1 dB | more\n\
                   criterion 11 FAIL metrics oracle equivalence [0s]: bad\n";
        let t = acceptance_table(log);
        assert!(t.contains("| 3 | PASS | jamming effectiveness ordering | gap 12.1 dB / more |"));
        assert!(t.contains("| 11 | FAIL | metrics oracle equivalence | bad |"));
    }

    #[test]
    fn crossing_interpolates() {
        let t = Table {
            header: vec!["ratio_db".into(), "frr".into()],
            rows: vec![vec!["-10".into(), "0.2".into()], vec!["0".into(), "0.8".into()]],
        };
        assert!((crossing(&t).unwrap() + 5.0).abs() < 1e-12);
    }
}
