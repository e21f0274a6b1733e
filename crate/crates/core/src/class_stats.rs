//! Class priors and streaming class-conditional feature covariances.
//!
//! Each class keeps a running mean, a scatter matrix `Σ (h − μ)(h − μ)ᵀ` and
//! a count. A new mini-batch is merged with the pairwise pooling update
//!
//! ```text
//! n  = nₐ + n_b
//! μ  = μₐ + (μ_b − μₐ)·n_b/n
//! M  = Mₐ + M_b + (μ_b − μₐ)(μ_b − μₐ)ᵀ · nₐ n_b / n
//! ```
//!
//! so the covariance `M / n` equals the covariance of every feature seen so
//! far, independent of how the stream was batched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Only per-coordinate variances; `Σ_c` is stored as a `1×H` row.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats<T> {
    mode: CovarianceMode,
    dim: usize,
    priors: Vec<T>,
    means: Vec<Vec<T>>,
    scatter: Vec<Tensor<T>>,
    sigma: Vec<Tensor<T>>,
    counts: Vec<usize>,
}

/// `π_c = n_c / N`.
pub fn class_priors<T: Scalar>(counts: &[usize]) -> Result<Vec<T>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has no samples; its prior would be zero")));
    }
    let total = T::from_usize_lossy(counts.iter().sum());
    Ok(counts.iter().map(|&n| T::from_usize_lossy(n) / total).collect())
}

impl<T: Scalar> ClassStats<T> {
    pub fn new(priors: Vec<T>, dim: usize, mode: CovarianceMode) -> Result<Self> {
        if priors.iter().any(|&p| !(p > T::zero())) {
            return Err(Error::invalid("every class prior must be positive"));
        }
        let c = priors.len();
        let empty = || match mode {
            CovarianceMode::Full => Tensor::zeros(dim, dim),
            CovarianceMode::Diagonal => Tensor::zeros(1, dim),
        };
        Ok(Self {
            mode,
            dim,
            priors,
            means: vec![vec![T::zero(); dim]; c],
            scatter: (0..c).map(|_| empty()).collect(),
            sigma: (0..c).map(|_| empty()).collect(),
            counts: vec![0; c],
        })
    }

    pub fn from_counts(counts: &[usize], dim: usize, mode: CovarianceMode) -> Result<Self> {
        Self::new(class_priors(counts)?, dim, mode)
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    pub fn log_priors(&self) -> Vec<T> {
        self.priors.iter().map(|p| p.ln()).collect()
    }

    pub fn mean(&self, class: usize) -> &[T] {
        &self.means[class]
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    /// Current `Σ_c`: `H×H` in full mode, `1×H` variances in diagonal mode.
    pub fn covariance(&self, class: usize) -> &Tensor<T> {
        &self.sigma[class]
    }

    pub fn covariances(&self) -> &[Tensor<T>] {
        &self.sigma
    }

    /// `trace(Σ_c)`.
    pub fn trace(&self, class: usize) -> T {
        let s = &self.sigma[class];
        match self.mode {
            CovarianceMode::Full => (0..self.dim).map(|i| s.get(i, i)).sum(),
            CovarianceMode::Diagonal => s.sum(),
        }
    }

    /// Merges one mini-batch of (detached) features into the running moments.
    /// Classes absent from the batch are untouched.
    pub fn update_covariance(&mut self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if features.cols() != self.dim || features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "features {:?} with {} labels for a {}-dimensional estimator",
                features.shape(),
                labels.len(),
                self.dim
            )));
        }
        let h = self.dim;
        for c in 0..self.num_classes() {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let nb = rows.len();
            let nb_t = T::from_usize_lossy(nb);
            let mut mean_b = vec![T::zero(); h];
            for &i in &rows {
                for (m, &x) in mean_b.iter_mut().zip(features.row(i)) {
                    *m += x;
                }
            }
            for m in &mut mean_b {
                *m /= nb_t;
            }
            let mut scatter_b = match self.mode {
                CovarianceMode::Full => Tensor::zeros(h, h),
                CovarianceMode::Diagonal => Tensor::zeros(1, h),
            };
            for &i in &rows {
                let d: Vec<T> = features.row(i).iter().zip(&mean_b).map(|(&x, &m)| x - m).collect();
                accumulate_outer(&mut scatter_b, &d, T::one(), self.mode);
            }

            let na = self.counts[c];
            let n = na + nb;
            let n_t = T::from_usize_lossy(n);
            let na_t = T::from_usize_lossy(na);
            let delta: Vec<T> = mean_b.iter().zip(&self.means[c]).map(|(&b, &a)| b - a).collect();
            let s = &mut self.scatter[c];
            for (sv, &bv) in s.data_mut().iter_mut().zip(scatter_b.data()) {
                *sv += bv;
            }
            accumulate_outer(s, &delta, na_t * nb_t / n_t, self.mode);
            for (m, &d) in self.means[c].iter_mut().zip(&delta) {
                *m += d * nb_t / n_t;
            }
            self.counts[c] = n;
            self.sigma[c] = self.scatter[c].scale(T::one() / n_t);
        }
        Ok(())
    }

    /// Replaces `Σ_c` (e.g. after a meta-step) while keeping the pooled
    /// moments consistent so later batches merge into the new value.
    pub fn set_covariance(&mut self, class: usize, sigma: Tensor<T>) -> Result<()> {
        if sigma.shape() != self.sigma[class].shape() {
            return Err(Error::invalid(format!(
                "covariance {:?} for class {class}, expected {:?}",
                sigma.shape(),
                self.sigma[class].shape()
            )));
        }
        let n = T::from_usize_lossy(self.counts[class].max(1));
        self.scatter[class] = sigma.scale(n);
        if self.counts[class] == 0 {
            // No pooled data yet: the override stands as if from one observation.
            self.counts[class] = 1;
            self.means[class] = vec![T::zero(); self.dim];
        }
        self.sigma[class] = sigma;
        Ok(())
    }
}

fn accumulate_outer<T: Scalar>(s: &mut Tensor<T>, d: &[T], weight: T, mode: CovarianceMode) {
    let h = d.len();
    match mode {
        CovarianceMode::Full => {
            for a in 0..h {
                let da = d[a] * weight;
                for (b, &db) in d.iter().enumerate() {
                    let v = s.get(a, b) + da * db;
                    s.set(a, b, v);
                }
            }
        }
        CovarianceMode::Diagonal => {
            for (a, &da) in d.iter().enumerate() {
                let v = s.get(0, a) + weight * da * da;
                s.set(0, a, v);
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen<T: Scalar>(a: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::invalid(format!("eigen-decomposition of a {:?} matrix", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::Numerical("eigen-decomposition of a non-finite matrix".into()));
    }
    let mut m = a.clone();
    let mut v = Tensor::identity(n);
    let scale = m.frobenius_norm();
    if scale == T::zero() {
        return Ok((vec![T::zero(); n], v));
    }
    let tol = T::epsilon() * scale;
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum::<T>()
            .sqrt();
        if off <= tol {
            let values = (0..n).map(|i| m.get(i, i)).collect();
            return Ok((values, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::Numerical("Jacobi eigen-decomposition did not converge".into()))
}

/// Nearest positive semi-definite matrix in Frobenius norm: symmetrize,
/// clamp negative eigenvalues to zero, reconstruct. A `1×H` diagonal
/// representation is clamped elementwise.
pub fn project_psd<T: Scalar>(sigma: &Tensor<T>) -> Result<Tensor<T>> {
    if sigma.rows() == 1 && sigma.cols() != 1 {
        if !sigma.is_finite() {
            return Err(Error::Numerical("non-finite variances".into()));
        }
        return Ok(sigma.map(|v| v.max(T::zero())));
    }
    let sym = sigma.add(&sigma.transpose()).scale(T::lit(0.5));
    let (values, vectors) = symmetric_eigen(&sym)?;
    let n = sym.rows();
    let mut out = Tensor::zeros(n, n);
    for (k, &lambda) in values.iter().enumerate() {
        let lambda = lambda.max(T::zero());
        if lambda == T::zero() {
            continue;
        }
        for i in 0..n {
            let vi = vectors.get(i, k) * lambda;
            for j in 0..n {
                let v = out.get(i, j) + vi * vectors.get(j, k);
                out.set(i, j, v);
            }
        }
    }
    // Exact symmetry regardless of accumulation order.
    let out = out.add(&out.transpose()).scale(T::lit(0.5));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Tensor<f64> {
        Tensor::from_fn(n, h, |_, j| rng.random_range(-2.0..2.0) * (1.0 + j as f64))
    }

    /// Population covariance of the given rows, computed directly.
    fn direct_covariance(x: &Tensor<f64>, rows: &[usize]) -> DMatrix<f64> {
        let h = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; h];
        for &i in rows {
            for j in 0..h {
                mean[j] += x.get(i, j) / n;
            }
        }
        let mut cov = DMatrix::zeros(h, h);
        for &i in rows {
            for a in 0..h {
                for b in 0..h {
                    cov[(a, b)] += (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b]) / n;
                }
            }
        }
        cov
    }

    fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
    }

    #[test]
    fn priors_from_counts() {
        assert_eq!(class_priors::<f64>(&[50, 50]).unwrap(), vec![0.5, 0.5]);
        let p = class_priors::<f64>(&[4, 400]).unwrap();
        assert!((p[0] - 4.0 / 404.0).abs() < 1e-15 && (p[1] - 400.0 / 404.0).abs() < 1e-15);
        assert!(class_priors::<f64>(&[3, 0]).is_err());
        let lt = crate::data::longtail_counts(10, 500, 10.0);
        let p = class_priors::<f64>(&lt).unwrap();
        assert!((p[0] / p[9] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_batch_gives_batch_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_features(&mut rng, 30, 4);
        let labels = vec![0; 30];
        let mut stats = ClassStats::<f64>::new(vec![0.5, 0.5], 4, CovarianceMode::Full).unwrap();
        stats.update_covariance(&x, &labels).unwrap();
        let direct = direct_covariance(&x, &(0..30).collect::<Vec<_>>());
        assert!((to_na(stats.covariance(0)) - direct).abs().max() < 1e-12);
        assert_eq!(stats.count(1), 0);
        assert_eq!(stats.covariance(1), &Tensor::zeros(4, 4));
    }

    #[test]
    fn constant_features_give_zero_covariance() {
        let x = Tensor::full(7, 3, 1.25);
        let mut stats = ClassStats::<f64>::new(vec![1.0], 3, CovarianceMode::Full).unwrap();
        stats.update_covariance(&x, &[0; 7]).unwrap();
        assert_eq!(stats.covariance(0), &Tensor::zeros(3, 3));
    }

    #[test]
    fn sequential_batches_equal_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_features(&mut rng, 50, 3);
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let mut stats = ClassStats::<f64>::new(vec![1.0 / 3.0; 3], 3, CovarianceMode::Full).unwrap();
        stats.update_covariance(&x.select_rows(&(0..20).collect::<Vec<_>>()), &labels[..20]).unwrap();
        stats.update_covariance(&x.select_rows(&(20..50).collect::<Vec<_>>()), &labels[20..]).unwrap();
        for c in 0..3 {
            let rows: Vec<usize> = (0..50).filter(|&i| labels[i] == c).collect();
            let direct = direct_covariance(&x, &rows);
            assert!((to_na(stats.covariance(c)) - direct).abs().max() < 1e-10);
        }
    }

    #[test]
    fn diagonal_mode_tracks_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_features(&mut rng, 40, 5);
        let mut full = ClassStats::<f64>::new(vec![1.0], 5, CovarianceMode::Full).unwrap();
        let mut diag = ClassStats::<f64>::new(vec![1.0], 5, CovarianceMode::Diagonal).unwrap();
        for chunk in [0..13, 13..40] {
            let idx: Vec<usize> = chunk.collect();
            full.update_covariance(&x.select_rows(&idx), &vec![0; idx.len()]).unwrap();
            diag.update_covariance(&x.select_rows(&idx), &vec![0; idx.len()]).unwrap();
        }
        for j in 0..5 {
            assert!((full.covariance(0).get(j, j) - diag.covariance(0).get(0, j)).abs() < 1e-12);
        }
        assert!((full.trace(0) - diag.trace(0)).abs() < 1e-12);
    }

    #[test]
    fn psd_projection_cases() {
        let d = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, -0.2]).unwrap();
        let p = project_psd(&d).unwrap();
        assert!((to_na(&p) - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).abs().max() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let psd = a.matmul(&a.transpose()).unwrap();
        let p = project_psd(&psd).unwrap();
        assert!((to_na(&p) - to_na(&psd)).abs().max() < 1e-10);
    }

    #[test]
    fn psd_projection_matches_dense_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..7);
            let a = Tensor::<f64>::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
            let sym = to_na(&a.add(&a.transpose()).scale(0.5));
            let eig = sym.clone().symmetric_eigen();
            let clamped = eig.eigenvalues.map(|l| l.max(0.0));
            let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            let ours = to_na(&project_psd(&a).unwrap());
            assert!((ours.clone() - oracle).abs().max() < 1e-10);
            assert!(nalgebra::Cholesky::new(ours + DMatrix::identity(n, n) * 1e-10).is_some());
        }
    }

    #[test]
    fn psd_projection_rejects_non_finite() {
        let a = Tensor::from_vec(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(project_psd(&a).is_err());
    }

    #[test]
    fn set_covariance_keeps_pooling_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_features(&mut rng, 10, 2);
        let mut stats = ClassStats::<f64>::new(vec![1.0], 2, CovarianceMode::Full).unwrap();
        stats.update_covariance(&x, &[0; 10]).unwrap();
        let target = Tensor::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        stats.set_covariance(0, target.clone()).unwrap();
        assert_eq!(stats.covariance(0), &target);
        assert!(stats.set_covariance(0, Tensor::zeros(3, 3)).is_err());
    }
}
