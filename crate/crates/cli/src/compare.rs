//! Paired-seed comparison of two run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::run::RunSummary;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub accuracy_delta: Option<f64>,
    pub worst_class_delta: Option<f64>,
    pub worst_group_delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub accuracy: Option<MeanStd>,
    pub worst_class: Option<MeanStd>,
    pub worst_group: Option<MeanStd>,
}

/// Candidate minus baseline, per seed.
pub fn compare(baseline: &[RunSummary], candidate: &[RunSummary]) -> Result<CompareReport, CliError> {
    let index = |v: &[RunSummary]| -> Result<BTreeMap<u64, RunSummary>, CliError> {
        let mut m = BTreeMap::new();
        for s in v {
            if m.insert(s.seed, s.clone()).is_some() {
                return Err(CliError::Config(format!("seed {} appears twice", s.seed)));
            }
        }
        Ok(m)
    };
    let (b, c) = (index(baseline)?, index(candidate)?);
    let (bs, cs): (Vec<u64>, Vec<u64>) = (b.keys().copied().collect(), c.keys().copied().collect());
    if bs != cs {
        return Err(CliError::Config(format!("seed sets differ: baseline {bs:?}, candidate {cs:?}")));
    }
    if bs.is_empty() {
        return Err(CliError::Config("no runs to compare".into()));
    }
    let diff = |x: Option<f64>, y: Option<f64>| Some(y? - x?);
    let rows: Vec<CompareRow> = bs
        .iter()
        .map(|s| {
            let (x, y) = (&b[s], &c[s]);
            CompareRow {
                seed: *s,
                accuracy_delta: diff(x.accuracy, y.accuracy),
                worst_class_delta: diff(x.worst_class_recall, y.worst_class_recall),
                worst_group_delta: diff(x.worst_group_accuracy, y.worst_group_accuracy),
            }
        })
        .collect();
    let stat = |f: fn(&CompareRow) -> Option<f64>| MeanStd::of(&rows.iter().filter_map(f).collect::<Vec<_>>());
    Ok(CompareReport {
        accuracy: stat(|r| r.accuracy_delta),
        worst_class: stat(|r| r.worst_class_delta),
        worst_group: stat(|r| r.worst_group_delta),
        rows,
    })
}

/// Reads `seed-*/summary.json` under a run directory.
pub fn load_summaries(run_dir: &Path) -> Result<Vec<RunSummary>, CliError> {
    let entries = fs::read_dir(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(run_dir, e))?.path();
        let is_seed = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-"));
        if !is_seed {
            continue;
        }
        let file = path.join("summary.json");
        let text = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
        out.push(serde_json::from_str(&text).map_err(|e| CliError::io(&file, e))?);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("no seed-*/summary.json under {}", run_dir.display())));
    }
    out.sort_by_key(|s: &RunSummary| s.seed);
    Ok(out)
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.4}", x));
        let mut s = format!("{:>6} {:>10} {:>12} {:>12}\n", "seed", "accuracy", "worst_class", "worst_group");
        for r in &self.rows {
            s += &format!(
                "{:>6} {:>10} {:>12} {:>12}\n",
                r.seed,
                cell(r.accuracy_delta),
                cell(r.worst_class_delta),
                cell(r.worst_group_delta)
            );
        }
        let agg = |m: Option<MeanStd>| m.map_or("-".to_string(), |m| format!("{:+.4}±{:.4}", m.mean, m.std));
        s += &format!("{:>6} {:>10} {:>12} {:>12}\n", "mean", agg(self.accuracy), agg(self.worst_class), agg(self.worst_group));
        s
    }
}
