//! Per-sample training characteristics fed to the perturbation network.
//!
//! | # | name |
//! |---|------|
//! | 0 | CE loss |
//! | 1 | EMA of the loss |
//! | 2 | loss z-score within the batch |
//! | 3 | margin `z_y − max_{j≠y} z_j` |
//! | 4 | EMA of the margin |
//! | 5 | softmax entropy |
//! | 6 | `q_y` |
//! | 7 | correct (0/1) |
//! | 8 | EMA of correctness |
//! | 9 | `‖∇ₕ ℓ‖₂` |
//! | 10 | `π_y` |
//! | 11 | `log π_y` |
//! | 12 | `‖h − μ_y‖ / sqrt(trace Σ_y)` |
//! | 13 | training progress `t / T₂` |
//! | 14 | loss rank percentile among same-class samples in the batch |
//!
//! Everything is computed from detached values. [`Normalizer`] turns the raw
//! vectors into running z-scores clipped to ±5.

use crate::class_stats::ClassStats;
use crate::classifier::{argmax, check_labels, softmax_rows};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Tensor};
use crate::scalar::Scalar;

pub const NUM_CHARACTERISTICS: usize = 15;

pub const NAMES: [&str; NUM_CHARACTERISTICS] = [
    "loss",
    "loss_ema",
    "loss_zscore",
    "margin",
    "margin_ema",
    "entropy",
    "prob_true",
    "correct",
    "correct_ema",
    "grad_norm",
    "prior",
    "log_prior",
    "center_distance",
    "progress",
    "loss_rank",
];

pub const DEFAULT_DECAY: f64 = 0.9;
pub const CLIP: f64 = 5.0;

/// Loss, margin and correctness of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Instantaneous<T> {
    pub loss: Vec<T>,
    pub margin: Vec<T>,
    pub correct: Vec<T>,
}

pub fn instantaneous<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Instantaneous<T>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut out = Instantaneous { loss: vec![], margin: vec![], correct: vec![] };
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        out.loss.push(log_sum_exp(z) - z[y]);
        let other = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).fold(T::neg_infinity(), T::max);
        out.margin.push(if other.is_finite() { z[y] - other } else { T::zero() });
        out.correct.push(if argmax(z) == y { T::one() } else { T::zero() });
    }
    Ok(out)
}

/// Per-sample exponential moving averages, indexed by training-set position.
#[derive(Debug, Clone, PartialEq)]
pub struct History<T> {
    decay: T,
    loss: Vec<T>,
    margin: Vec<T>,
    correct: Vec<T>,
    counts: Vec<u32>,
}

impl<T: Scalar> History<T> {
    pub fn new(num_samples: usize, decay: T) -> Self {
        Self {
            decay,
            loss: vec![T::zero(); num_samples],
            margin: vec![T::zero(); num_samples],
            correct: vec![T::zero(); num_samples],
            counts: vec![0; num_samples],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `ema ← d·ema + (1 − d)·x`, initialised to the first value seen.
    pub fn update(&mut self, ids: &[usize], values: &Instantaneous<T>) -> Result<()> {
        if values.loss.len() != ids.len() || values.margin.len() != ids.len() || values.correct.len() != ids.len() {
            return Err(Error::invalid("history update with mismatched lengths"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.len()) {
            return Err(Error::invalid(format!("unknown sample id {id}")));
        }
        let d = self.decay;
        for (k, &id) in ids.iter().enumerate() {
            let mix = |old: T, new: T| if self.counts[id] == 0 { new } else { d * old + (T::one() - d) * new };
            let (l, m, c) = (mix(self.loss[id], values.loss[k]), mix(self.margin[id], values.margin[k]), mix(self.correct[id], values.correct[k]));
            self.loss[id] = l;
            self.margin[id] = m;
            self.correct[id] = c;
            self.counts[id] += 1;
        }
        Ok(())
    }

    pub fn loss_ema(&self, id: usize) -> Result<T> {
        self.seen(id).map(|_| self.loss[id])
    }

    pub fn margin_ema(&self, id: usize) -> Result<T> {
        self.seen(id).map(|_| self.margin[id])
    }

    pub fn correct_ema(&self, id: usize) -> Result<T> {
        self.seen(id).map(|_| self.correct[id])
    }

    pub fn count(&self, id: usize) -> u32 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    fn seen(&self, id: usize) -> Result<()> {
        match self.counts.get(id) {
            Some(&n) if n > 0 => Ok(()),
            Some(_) => Err(Error::invalid(format!("sample {id} has no history yet"))),
            None => Err(Error::invalid(format!("unknown sample id {id}"))),
        }
    }
}

/// Detached per-sample quantities of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a, T> {
    pub ids: &'a [usize],
    pub labels: &'a [usize],
    pub logits: &'a Tensor<T>,
    pub h: &'a Tensor<T>,
    pub grad_h: &'a Tensor<T>,
    /// `t / T₂`.
    pub progress: T,
}

/// Raw (unnormalised) `n×15` characteristics. The history must already
/// contain this batch.
pub fn extract<T: Scalar>(view: &SampleView<'_, T>, history: &History<T>, stats: &ClassStats<T>) -> Result<Tensor<T>> {
    let n = view.ids.len();
    if view.labels.len() != n || view.h.rows() != n || view.grad_h.rows() != n {
        return Err(Error::invalid("sample view fields disagree on batch size"));
    }
    let inst = instantaneous(view.logits, view.labels)?;
    let q = softmax_rows(view.logits);
    let nt = T::from_usize_lossy(n.max(1));
    let mean = inst.loss.iter().copied().sum::<T>() / nt;
    let std = (inst.loss.iter().map(|&l| (l - mean) * (l - mean)).sum::<T>() / nt).sqrt();

    let mut out = Tensor::zeros(n, NUM_CHARACTERISTICS);
    for i in 0..n {
        let (id, y) = (view.ids[i], view.labels[i]);
        let entropy = -q.row(i).iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum::<T>();
        let grad_norm = view.grad_h.row(i).iter().map(|&g| g * g).sum::<T>().sqrt();
        let prior = stats.priors()[y];
        let dist = if stats.count(y) == 0 {
            T::zero()
        } else {
            let d2: T = view.h.row(i).iter().zip(stats.mean(y)).map(|(&a, &m)| (a - m) * (a - m)).sum();
            d2.sqrt() / stats.trace(y).max(T::epsilon()).sqrt()
        };
        let z = if std > T::zero() { (inst.loss[i] - mean) / std } else { T::zero() };
        let row = [
            inst.loss[i],
            history.loss_ema(id)?,
            z,
            inst.margin[i],
            history.margin_ema(id)?,
            entropy,
            q.get(i, y),
            inst.correct[i],
            history.correct_ema(id)?,
            grad_norm,
            prior,
            prior.ln(),
            dist,
            view.progress,
            rank_within_class(&inst.loss, view.labels, i),
        ];
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// Fraction of other same-class samples with a smaller loss, ties counted
/// half. A lone sample sits at 0.5.
fn rank_within_class<T: Scalar>(loss: &[T], labels: &[usize], i: usize) -> T {
    let mut below = T::zero();
    let mut others = 0usize;
    for (k, (&l, &y)) in loss.iter().zip(labels).enumerate() {
        if k == i || y != labels[i] {
            continue;
        }
        others += 1;
        if l < loss[i] {
            below += T::one();
        } else if l == loss[i] {
            below += T::lit(0.5);
        }
    }
    if others == 0 {
        T::lit(0.5)
    } else {
        below / T::from_usize_lossy(others)
    }
}

/// Running per-characteristic mean and variance (EMA over batches) used to
/// z-score the raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    decay: T,
    mean: Vec<T>,
    var: Vec<T>,
    initialised: bool,
}

impl<T: Scalar> Normalizer<T> {
    pub fn new(width: usize, decay: T) -> Self {
        Self { decay, mean: vec![T::zero(); width], var: vec![T::one(); width], initialised: false }
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn variance(&self) -> &[T] {
        &self.var
    }

    pub fn observe(&mut self, raw: &Tensor<T>) {
        let n = raw.rows();
        if n == 0 {
            return;
        }
        let nt = T::from_usize_lossy(n);
        for j in 0..self.mean.len() {
            let m = (0..n).map(|i| raw.get(i, j)).sum::<T>() / nt;
            let v = (0..n).map(|i| (raw.get(i, j) - m) * (raw.get(i, j) - m)).sum::<T>() / nt;
            if self.initialised {
                let d = self.decay;
                let shift = m - self.mean[j];
                self.mean[j] = d * self.mean[j] + (T::one() - d) * m;
                self.var[j] = d * self.var[j] + (T::one() - d) * (v + d * shift * shift);
            } else {
                self.mean[j] = m;
                self.var[j] = v;
            }
        }
        self.initialised = true;
    }

    /// z-scores with the current running statistics, clipped to ±5.
    pub fn normalize(&self, raw: &Tensor<T>) -> Tensor<T> {
        let clip = T::lit(CLIP);
        let floor = T::lit(1e-3);
        Tensor::from_fn(raw.rows(), raw.cols(), |i, j| {
            let std = self.var[j].max(T::zero()).sqrt().max(floor);
            ((raw.get(i, j) - self.mean[j]) / std).max(-clip).min(clip)
        })
    }

    /// `observe` followed by `normalize`.
    pub fn apply(&mut self, raw: &Tensor<T>) -> Tensor<T> {
        self.observe(raw);
        self.normalize(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_stats::CovarianceMode;

    #[test]
    fn ema_arithmetic() {
        let mut h = History::<f64>::new(2, 0.9);
        let one = Instantaneous { loss: vec![1.0], margin: vec![2.0], correct: vec![1.0] };
        let zero = Instantaneous { loss: vec![0.0], margin: vec![0.0], correct: vec![0.0] };
        h.update(&[1], &one).unwrap();
        assert_eq!(h.loss_ema(1).unwrap(), 1.0);
        h.update(&[1], &zero).unwrap();
        assert!((h.loss_ema(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((h.margin_ema(1).unwrap() - 1.8).abs() < 1e-15);
        assert!(h.loss_ema(0).is_err());
        assert!(h.update(&[2], &one).is_err());
    }

    #[test]
    fn confident_sample_limits() {
        let logits = Tensor::row_vector(&[60.0, -60.0, -60.0]);
        let inst = instantaneous(&logits, &[0]).unwrap();
        assert!(inst.loss[0] < 1e-40);
        assert_eq!(inst.margin[0], 120.0);
        assert_eq!(inst.correct[0], 1.0);
    }

    #[test]
    fn fresh_history_emas_equal_instantaneous() {
        let logits = Tensor::<f64>::from_vec(2, 2, vec![0.2, -0.4, 1.0, 3.0]).unwrap();
        let labels = [0, 0];
        let h = Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = Tensor::from_vec(2, 2, vec![0.3, 0.4, 0.0, 0.0]).unwrap();
        let mut stats = ClassStats::new(vec![0.5, 0.5], 2, CovarianceMode::Full).unwrap();
        stats.update_covariance(&h, &labels).unwrap();
        let mut hist = History::new(4, 0.9);
        let ids = [3, 1];
        hist.update(&ids, &instantaneous(&logits, &labels).unwrap()).unwrap();
        let view = SampleView { ids: &ids, labels: &labels, logits: &logits, h: &h, grad_h: &g, progress: 0.25 };
        let f = extract(&view, &hist, &stats).unwrap();
        for i in 0..2 {
            assert_eq!(f.get(i, 0), f.get(i, 1));
            assert_eq!(f.get(i, 3), f.get(i, 4));
            assert_eq!(f.get(i, 7), f.get(i, 8));
            assert_eq!(f.get(i, 13), 0.25);
        }
        assert!((f.get(0, 9) - 0.5).abs() < 1e-15);
        assert_eq!(f.get(0, 14), 0.0);
        assert_eq!(f.get(1, 14), 1.0);
        // z-scores of two values are ±1.
        assert!((f.get(0, 2) + 1.0).abs() < 1e-12 && (f.get(1, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_clips() {
        let mut norm = Normalizer::<f64>::new(1, 0.9);
        let raw = Tensor::col_vector(&[0.0, 0.0, 0.0, 1.0]);
        let z = norm.apply(&raw);
        assert!(z.data().iter().all(|v| v.abs() <= 5.0));
        let out = norm.normalize(&Tensor::col_vector(&[1e9]));
        assert_eq!(out.item(), 5.0);
    }
}
