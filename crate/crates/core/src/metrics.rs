//! Per-epoch training records and held-out evaluation.
//!
//! CSV layout (columns never reorder; per-class and per-group blocks expand
//! with the class and group counts):
//!
//! ```text
//! epoch,iteration,phase,lr,train_loss,test_loss,test_accuracy,
//! worst_class_recall,worst_group_accuracy,eps_mean,noisy_eps_mean,
//! clean_eps_mean,reg_g,reg_r,reg_f,skipped_meta_updates,
//! recall_c0..,eps_mean_c0..,adv_ratio_c0..,group_acc_g0..
//! ```
//!
//! Missing values (no test set, warm-up epochs without ε, absent classes)
//! are empty cells.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, cross_entropy_per_sample, ClassifierParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub per_group_accuracy: Vec<Option<f64>>,
}

impl Evaluation {
    pub fn worst_class_recall(&self) -> Option<f64> {
        min_present(&self.per_class_recall)
    }

    pub fn worst_group_accuracy(&self) -> Option<f64> {
        min_present(&self.per_group_accuracy)
    }
}

fn min_present(v: &[Option<f64>]) -> Option<f64> {
    v.iter().flatten().copied().reduce(f64::min)
}

pub fn evaluate<T: Scalar>(model: &ClassifierParams<T>, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let z = model.forward(&data.features.cast::<T>())?;
    let loss = cross_entropy_per_sample(&z, &data.labels).iter().map(|l| l.as_f64()).sum::<f64>() / data.len() as f64;
    let c = data.num_classes;
    let g = data.num_groups().unwrap_or(0);
    let (mut hit_c, mut tot_c) = (vec![0usize; c], vec![0usize; c]);
    let (mut hit_g, mut tot_g) = (vec![0usize; g], vec![0usize; g]);
    let mut hits = 0;
    for (i, &y) in data.labels.iter().enumerate() {
        let ok = argmax(z.row(i)) == y;
        hits += ok as usize;
        tot_c[y] += 1;
        hit_c[y] += ok as usize;
        if let Some(groups) = &data.groups {
            tot_g[groups[i]] += 1;
            hit_g[groups[i]] += ok as usize;
        }
    }
    let ratio = |h: &[usize], t: &[usize]| -> Vec<Option<f64>> {
        h.iter().zip(t).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect()
    };
    Ok(Evaluation {
        loss,
        accuracy: hits as f64 / data.len() as f64,
        per_class_recall: ratio(&hit_c, &tot_c),
        per_group_accuracy: ratio(&hit_g, &tot_g),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Iterations completed at the end of this epoch.
    pub iteration: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub test: Option<Evaluation>,
    pub eps_mean: Option<f64>,
    pub eps_mean_per_class: Vec<Option<f64>>,
    /// Fraction of samples with ε > 0, per class.
    pub adversarial_ratio_per_class: Vec<Option<f64>>,
    pub noisy_eps_mean: Option<f64>,
    pub clean_eps_mean: Option<f64>,
    /// Per-sample means of `α𝒢`, `ℛ` and `β𝓕` as they enter the loss.
    pub reg_g: Option<f64>,
    pub reg_r: Option<f64>,
    pub reg_f: Option<f64>,
    pub skipped_meta_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub num_classes: usize,
    pub num_groups: usize,
    pub rows: Vec<EpochMetrics>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn new(num_classes: usize, num_groups: usize) -> Self {
        Self { num_classes, num_groups, rows: Vec::new() }
    }

    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "iteration",
            "phase",
            "lr",
            "train_loss",
            "test_loss",
            "test_accuracy",
            "worst_class_recall",
            "worst_group_accuracy",
            "eps_mean",
            "noisy_eps_mean",
            "clean_eps_mean",
            "reg_g",
            "reg_r",
            "reg_f",
            "skipped_meta_updates",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for prefix in ["recall_c", "eps_mean_c", "adv_ratio_c"] {
            h.extend((0..self.num_classes).map(|c| format!("{prefix}{c}")));
        }
        h.extend((0..self.num_groups).map(|g| format!("group_acc_g{g}")));
        h
    }

    fn record(&self, r: &EpochMetrics) -> Vec<String> {
        let t = r.test.as_ref();
        let mut out = vec![
            r.epoch.to_string(),
            r.iteration.to_string(),
            match r.phase {
                Phase::Warmup => "warmup".into(),
                Phase::Meta => "meta".into(),
            },
            r.lr.to_string(),
            r.train_loss.to_string(),
            cell(t.map(|e| e.loss)),
            cell(t.map(|e| e.accuracy)),
            cell(t.and_then(Evaluation::worst_class_recall)),
            cell(t.and_then(Evaluation::worst_group_accuracy)),
            cell(r.eps_mean),
            cell(r.noisy_eps_mean),
            cell(r.clean_eps_mean),
            cell(r.reg_g),
            cell(r.reg_r),
            cell(r.reg_f),
            r.skipped_meta_updates.to_string(),
        ];
        let padded = |v: &[Option<f64>], n: usize| (0..n).map(|k| cell(v.get(k).copied().flatten())).collect::<Vec<_>>();
        out.extend(padded(t.map_or(&[][..], |e| &e.per_class_recall), self.num_classes));
        out.extend(padded(&r.eps_mean_per_class, self.num_classes));
        out.extend(padded(&r.adversarial_ratio_per_class, self.num_classes));
        out.extend(padded(t.map_or(&[][..], |e| &e.per_group_accuracy), self.num_groups));
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Csv { row: 0, detail: e.to_string() };
        w.write_record(self.header()).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(self.record(r)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv { row: 0, detail: e.to_string() })
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Rows in the final `fraction` of epochs (at least one when non-empty).
    pub fn tail(&self, fraction: f64) -> &[EpochMetrics] {
        let n = self.rows.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(n.min(1), n);
        &self.rows[n - k..]
    }
}

/// Mean of the present entries.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}
