//! Training runs and α sweeps.
//!
//! Layout under the output root:
//!
//! ```text
//! <output_dir>/config.toml            resolved config, all seeds
//! <output_dir>/seed-<s>/config.toml   resolved config for this seed alone
//! <output_dir>/seed-<s>/metrics.csv   one row per epoch
//! <output_dir>/seed-<s>/summary.json  final evaluation and tail statistics
//! <output_dir>/seed-<s>/classifier.ckpt
//! <output_dir>/seed-<s>/perturb.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use iada::metrics::{mean_present, Evaluation, MetricsLog};
use iada::{ClassifierParams64, MetaTrainer64, PerturbNet64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::scenario::{self, Scenario};
use crate::verify::{self, VerifyOptions};
use crate::CliError;

/// Share of final epochs the tail statistics average over.
pub const TAIL_FRACTION: f64 = 0.2;

pub const ALPHA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub iterations: usize,
    pub epochs: usize,
    pub train_class_counts: Vec<usize>,
    pub accuracy: Option<f64>,
    pub worst_class_recall: Option<f64>,
    pub worst_group_accuracy: Option<f64>,
    pub evaluation: Option<Evaluation>,
    pub tail_fraction: f64,
    pub tail_adversarial_ratio_per_class: Vec<Option<f64>>,
    pub tail_eps_mean_per_class: Vec<Option<f64>>,
    pub tail_noisy_eps_mean: Option<f64>,
    pub tail_clean_eps_mean: Option<f64>,
    pub skipped_meta_updates: usize,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub summary: RunSummary,
    pub log: MetricsLog,
    pub classifier: ClassifierParams64,
    pub perturb: PerturbNet64,
}

/// Trains one seed in memory.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedOutcome, CliError> {
    let Scenario { train, test, meta } = scenario::build(&cfg.data, seed)?;
    let mut trainer = MetaTrainer64::new(cfg.trainer_config(seed), &train, &meta)?;
    let log = trainer.run(test.as_ref())?;
    let summary = summarize(cfg, seed, &train.class_counts(), &log);
    Ok(SeedOutcome { summary, log, classifier: trainer.classifier().clone(), perturb: trainer.perturb().clone() })
}

fn summarize(cfg: &RunConfig, seed: u64, counts: &[usize], log: &MetricsLog) -> RunSummary {
    let tail = log.tail(TAIL_FRACTION);
    let last = log.last();
    let eval = last.and_then(|r| r.test.clone());
    let per_class = |f: fn(&iada::metrics::EpochMetrics) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
        (0..log.num_classes).map(|c| mean_present(tail.iter().map(|r| f(r).get(c).copied().flatten()))).collect()
    };
    RunSummary {
        scenario: cfg.scenario().name().into(),
        seed,
        iterations: last.map_or(0, |r| r.iteration),
        epochs: log.rows.len(),
        train_class_counts: counts.to_vec(),
        accuracy: eval.as_ref().map(|e| e.accuracy),
        worst_class_recall: eval.as_ref().and_then(Evaluation::worst_class_recall),
        worst_group_accuracy: eval.as_ref().and_then(Evaluation::worst_group_accuracy),
        evaluation: eval,
        tail_fraction: TAIL_FRACTION,
        tail_adversarial_ratio_per_class: per_class(|r| &r.adversarial_ratio_per_class),
        tail_eps_mean_per_class: per_class(|r| &r.eps_mean_per_class),
        tail_noisy_eps_mean: mean_present(tail.iter().map(|r| r.noisy_eps_mean)),
        tail_clean_eps_mean: mean_present(tail.iter().map(|r| r.clean_eps_mean)),
        skipped_meta_updates: last.map_or(0, |r| r.skipped_meta_updates),
    }
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_outcome(run_dir: &Path, cfg: &RunConfig, outcome: &SeedOutcome) -> Result<PathBuf, CliError> {
    let dir = seed_dir(run_dir, outcome.summary.seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join("config.toml"), &cfg.with_seeds(vec![outcome.summary.seed]).to_toml_string())?;
    outcome.log.save_csv(&dir.join("metrics.csv"))?;
    let json = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    write(&dir.join("summary.json"), &json)?;
    outcome.classifier.save(&dir.join("classifier.ckpt"))?;
    outcome.perturb.save(&dir.join("perturb.ckpt"))?;
    Ok(dir)
}

/// Runs every configured seed and writes artifacts under `root/output_dir`.
pub fn run_config(cfg: &RunConfig, root: &Path) -> Result<Vec<RunSummary>, CliError> {
    if cfg.oracle.enabled {
        let opts = VerifyOptions { seed: cfg.oracle.seed, quick: cfg.oracle.quick, flip_rho_sign: false };
        let failed: Vec<String> = verify::run_suites(&opts)?.into_iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        if !failed.is_empty() {
            return Err(CliError::Verify(format!("refusing to train, suites failed: {}", failed.join(", "))));
        }
    }
    let run_dir = root.join(&cfg.output_dir);
    fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    write(&run_dir.join("config.toml"), &cfg.to_toml_string())?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed)?;
        write_outcome(&run_dir, cfg, &outcome)?;
        out.push(outcome.summary);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub worst_class_recall: Option<f64>,
    pub worst_group_accuracy: Option<f64>,
}

fn alpha_label(alpha: f64) -> String {
    format!("alpha-{alpha}")
}

/// One run per (α, seed), in parallel; each member is written to
/// `output_dir/alpha-<α>/` and the table to `output_dir/sweep.csv`.
pub fn sweep(cfg: &RunConfig, alphas: &[f64], root: &Path) -> Result<Vec<SweepRow>, CliError> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a >= 0.0)) {
        return Err(CliError::Config(format!("α grid {alphas:?} must be non-empty and non-negative")));
    }
    let members: Vec<RunConfig> = alphas
        .iter()
        .map(|&a| {
            let mut m = cfg.clone();
            m.loss.alpha = a;
            m.output_dir = cfg.output_dir.join(alpha_label(a));
            m
        })
        .collect();
    let jobs: Vec<(usize, u64)> = (0..members.len()).flat_map(|k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<Result<SweepRow, CliError>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let m = &members[k];
            let outcome = run_seed(m, seed)?;
            let run_dir = root.join(&m.output_dir);
            write_outcome(&run_dir, m, &outcome)?;
            let s = outcome.summary;
            Ok(SweepRow {
                alpha: m.loss.alpha,
                seed,
                accuracy: s.accuracy,
                worst_class_recall: s.worst_class_recall,
                worst_group_accuracy: s.worst_group_accuracy,
            })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    for m in &members {
        let dir = root.join(&m.output_dir);
        write(&dir.join("config.toml"), &m.to_toml_string())?;
    }
    let table = root.join(&cfg.output_dir).join("sweep.csv");
    write(&table, &sweep_csv(&rows))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("alpha,seed,accuracy,worst_class_recall,worst_group_accuracy\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{}\n",
            r.alpha,
            r.seed,
            cell(r.accuracy),
            cell(r.worst_class_recall),
            cell(r.worst_group_accuracy)
        );
    }
    s
}

/// Mean final accuracy per α, in grid order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, Option<f64>, Option<f64>)> {
    let mut alphas: Vec<f64> = Vec::new();
    for r in rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    alphas
        .into_iter()
        .map(|a| {
            let of = rows.iter().filter(|r| r.alpha == a);
            (a, mean_present(of.clone().map(|r| r.accuracy)), mean_present(of.map(|r| r.worst_class_recall)))
        })
        .collect()
}
