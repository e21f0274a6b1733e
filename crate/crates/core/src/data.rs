//! Synthetic biased datasets, CSV ingestion and metadata construction.
//!
//! Three scenario families are generated here: long-tailed Gaussian blobs,
//! label noise (uniform or pair-flip) injected on top of any dataset, and a
//! two-class spurious-correlation task with four (class × attribute) groups.
//! Everything is deterministic under its seed.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Labelled feature matrix.
///
/// `clean_labels` and `noise_mask` exist only after [`inject_label_noise`];
/// they are diagnostics and are never handed to a trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub groups: Option<Vec<usize>>,
    pub noise_mask: Option<Vec<bool>>,
    pub clean_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self { features, labels, num_classes, groups: None, noise_mask: None, clean_labels: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn num_groups(&self) -> Option<usize> {
        self.groups.as_ref().map(|g| g.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Subset by row index, carrying every optional column along.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            groups: self.groups.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
            noise_mask: self.noise_mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            clean_labels: self.clean_labels.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Label before corruption; equals the observed label when no noise was injected.
    pub fn true_label(&self, i: usize) -> usize {
        self.clean_labels.as_ref().map_or(self.labels[i], |c| c[i])
    }
}

/// Small, clean, class-balanced set used only by the meta-updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub per_class: usize,
    pub num_classes: usize,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gaussian blobs with centres evenly spaced on a circle in the first two
/// dimensions; any further dimensions are pure nuisance noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGeometry {
    pub radius: f64,
    pub spread: f64,
    pub nuisance_std: f64,
}

impl Default for ClassGeometry {
    fn default() -> Self {
        Self { radius: 2.0, spread: 1.0, nuisance_std: 1.0 }
    }
}

impl ClassGeometry {
    pub fn center(&self, class: usize, num_classes: usize) -> [f64; 2] {
        let angle = 2.0 * PI * class as f64 / num_classes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    fn sample(&self, class: usize, num_classes: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        let c = self.center(class, num_classes);
        (0..dim)
            .map(|d| {
                let z: f64 = StandardNormal.sample(rng);
                if d < 2 {
                    c[d] + self.spread * z
                } else {
                    self.nuisance_std * z
                }
            })
            .collect()
    }
}

/// Class sizes `round(n_max · ratio^(−c/(C−1)))`.
pub fn longtail_counts(num_classes: usize, n_max: usize, imbalance_ratio: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| {
            let frac = if num_classes > 1 { c as f64 / (num_classes - 1) as f64 } else { 0.0 };
            (n_max as f64 * imbalance_ratio.powf(-frac)).round() as usize
        })
        .collect()
}

pub fn make_longtail(
    seed: u64,
    num_classes: usize,
    n_max: usize,
    imbalance_ratio: f64,
    dim: usize,
    geometry: ClassGeometry,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !(imbalance_ratio >= 1.0) {
        return Err(Error::invalid(format!("imbalance ratio {imbalance_ratio} must be at least 1")));
    }
    if dim < 2 {
        return Err(Error::invalid("class geometry needs at least two feature dimensions"));
    }
    let counts = longtail_counts(num_classes, n_max, imbalance_ratio);
    let smallest = *counts.last().expect("C >= 2");
    if smallest < 2 {
        return Err(Error::invalid(format!(
            "smallest class would have {smallest} samples; at least 2 are needed"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            data.extend(geometry.sample(c, num_classes, dim, &mut rng));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_vec(total, dim, data)?, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Relabel to one of the other `C − 1` classes uniformly.
    Uniform,
    /// Relabel `c` to `c + 1 mod C`.
    Flip,
}

pub fn inject_label_noise(dataset: &Dataset, kind: NoiseKind, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} must lie in [0, 1)")));
    }
    if dataset.noise_mask.is_some() {
        return Err(Error::invalid("dataset already carries injected noise"));
    }
    let c = dataset.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let mut mask = vec![false; dataset.len()];
    for (i, y) in out.labels.iter_mut().enumerate() {
        if !rng.random_bool(rate) {
            continue;
        }
        let new = match kind {
            NoiseKind::Flip => (*y + 1) % c,
            NoiseKind::Uniform => {
                let k = rng.random_range(0..c - 1);
                if k >= *y {
                    k + 1
                } else {
                    k
                }
            }
        };
        mask[i] = new != *y;
        *y = new;
    }
    out.clean_labels = Some(dataset.labels.clone());
    out.noise_mask = Some(mask);
    Ok(out)
}

/// Spurious-correlation task: two classes, a binary nuisance attribute, and
/// four groups. Group ids are ordered aligned-first:
/// `0 = (y0, a0)`, `1 = (y1, a1)`, `2 = (y0, a1)`, `3 = (y1, a0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubpopConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub core_dims: usize,
    pub spurious_dims: usize,
    pub noise_std: f64,
    pub core_sep: f64,
    pub spurious_sep: f64,
    pub group_balance_train: [f64; 4],
    pub group_balance_test: [f64; 4],
}

impl Default for SubpopConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 2000,
            core_dims: 2,
            spurious_dims: 2,
            noise_std: 1.0,
            core_sep: 1.5,
            spurious_sep: 4.0,
            group_balance_train: [0.45, 0.45, 0.05, 0.05],
            group_balance_test: [0.25; 4],
        }
    }
}

pub const SUBPOP_GROUPS: [(usize, usize); 4] = [(0, 0), (1, 1), (0, 1), (1, 0)];

fn group_counts(n: usize, balance: &[f64; 4]) -> Result<[usize; 4]> {
    let total: f64 = balance.iter().sum();
    if balance.iter().any(|&b| !(b >= 0.0)) || !(total > 0.0) {
        return Err(Error::invalid(format!("group balance {balance:?} is not a distribution")));
    }
    // Largest-remainder rounding so counts sum to n exactly.
    let exact: Vec<f64> = balance.iter().map(|b| b / total * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &g in order.iter().take(n - assigned) {
        counts[g] += 1;
    }
    Ok(counts)
}

fn sample_subpop(cfg: &SubpopConfig, n: usize, balance: &[f64; 4], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let counts = group_counts(n, balance)?;
    let dim = cfg.core_dims + cfg.spurious_dims;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (g, &count) in counts.iter().enumerate() {
        let (y, a) = SUBPOP_GROUPS[g];
        let core_mean = if y == 1 { cfg.core_sep / 2.0 } else { -cfg.core_sep / 2.0 };
        let spur_mean = if a == 1 { cfg.spurious_sep / 2.0 } else { -cfg.spurious_sep / 2.0 };
        for _ in 0..count {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                let mean = if d < cfg.core_dims { core_mean } else { spur_mean };
                data.push(mean + cfg.noise_std * z);
            }
            labels.push(y);
            groups.push(g);
        }
    }
    let mut ds = Dataset::new(Tensor::from_vec(n, dim, data)?, labels, 2)?;
    ds.groups = Some(groups);
    Ok(ds)
}

pub fn make_subpop_shift(seed: u64, cfg: &SubpopConfig) -> Result<(Dataset, Dataset)> {
    if cfg.core_dims == 0 {
        return Err(Error::invalid("need at least one core dimension"));
    }
    let train_counts = group_counts(cfg.n_train, &cfg.group_balance_train)?;
    if let Some(g) = train_counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("training group {g} would be empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample_subpop(cfg, cfg.n_train, &cfg.group_balance_train, &mut rng)?;
    let test = sample_subpop(cfg, cfg.n_test, &cfg.group_balance_test, &mut rng)?;
    Ok((train, test))
}

/// Draws `per_class` clean samples of every class into a balanced metadata
/// set and returns the remaining pool alongside it.
pub fn split_meta(dataset: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, MetaDataset)> {
    if per_class == 0 {
        return Err(Error::invalid("metadata needs at least one sample per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dataset.noise_mask.as_deref();
    let mut chosen = Vec::with_capacity(per_class * dataset.num_classes);
    for c in 0..dataset.num_classes {
        let mut clean: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.true_label(i) == c && !mask.is_some_and(|m| m[i]))
            .collect();
        if clean.len() <= per_class {
            return Err(Error::invalid(format!(
                "class {c} has {} clean samples; more than {per_class} are required",
                clean.len()
            )));
        }
        clean.shuffle(&mut rng);
        chosen.extend_from_slice(&clean[..per_class]);
    }
    let taken: HashSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|i| !taken.contains(i)).collect();
    let meta = MetaDataset {
        features: dataset.features.select_rows(&chosen),
        labels: chosen.iter().map(|&i| dataset.true_label(i)).collect(),
        per_class,
        num_classes: dataset.num_classes,
    };
    Ok((dataset.subset(&rest), meta))
}

/// Column layout of the CSV interchange format.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Labels must lie below this; inferred as `max + 1` when absent.
    pub num_classes: Option<usize>,
}

/// Reads `f0..f{D−1},label[,group]` with a header row.
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Csv { row: 0, detail: format!("{other:?}") },
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path).map_err(io_err)?;
    let header = reader.headers().map_err(io_err)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let label_col = names
        .iter()
        .position(|&h| h == "label")
        .ok_or_else(|| Error::Csv { row: 1, detail: "header has no `label` column".into() })?;
    for (d, name) in names[..label_col].iter().enumerate() {
        if *name != format!("f{d}") {
            return Err(Error::Csv { row: 1, detail: format!("expected column f{d}, found `{name}`") });
        }
    }
    let has_group = match &names[label_col + 1..] {
        [] => false,
        ["group"] => true,
        extra => return Err(Error::Csv { row: 1, detail: format!("unexpected trailing columns {extra:?}") }),
    };
    let dim = label_col;
    let width = names.len();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Csv { row, detail: e.to_string() })?;
        if record.len() != width {
            return Err(Error::Csv { row, detail: format!("{} fields, expected {width}", record.len()) });
        }
        for (d, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Csv { row, detail: format!("column f{d}: `{cell}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Csv { row, detail: format!("column f{d} is not finite") });
            }
            data.push(v);
        }
        let label: usize = record[label_col]
            .trim()
            .parse()
            .map_err(|_| Error::Csv { row, detail: format!("label `{}` is not a class index", &record[label_col]) })?;
        if let Some(c) = schema.num_classes {
            if label >= c {
                return Err(Error::Csv { row, detail: format!("label {label} outside 0..{c}") });
            }
        }
        labels.push(label);
        if has_group {
            let g: usize = record[label_col + 1]
                .trim()
                .parse()
                .map_err(|_| Error::Csv { row, detail: format!("group `{}` is not an index", &record[label_col + 1]) })?;
            groups.push(g);
        }
    }
    let n = labels.len();
    let num_classes = schema.num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut ds = Dataset::new(Tensor::from_vec(n, dim, data)?, labels, num_classes)?;
    if has_group {
        ds.groups = Some(groups);
    }
    Ok(ds)
}

/// Writes the same layout [`load_csv`] reads. Values use Rust's shortest
/// round-trip formatting, so a reload is exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Csv { row: 0, detail: format!("{other:?}") },
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|d| format!("f{d}")).collect();
    header.push("label".into());
    if dataset.groups.is_some() {
        header.push("group".into());
    }
    w.write_record(&header).map_err(io_err)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.labels[i].to_string());
        if let Some(g) = &dataset.groups {
            rec.push(g[i].to_string());
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}
