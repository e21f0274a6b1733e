//! The IADA surrogate loss.
//!
//! Features are augmented as `h̃ᵢ ~ N(hᵢ + δᵢ, αΣ_{yᵢ})` with
//! `δᵢ = εᵢ·sign(∇ₕ ℓᵢ)`. In the limit of infinitely many augmented copies
//! the expected cross-entropy is bounded by the cross-entropy of the
//! adjusted logits
//!
//! ```text
//! Z̃ᵢʲ = w_j(hᵢ + δᵢ) + b_j + α ρᵢʲ + β log π_j
//! ρᵢʲ = ½ (w_j − w_{yᵢ}) Σ_{yᵢ} (w_j − w_{yᵢ})ᵀ
//! ```
//!
//! Plain tensor versions live next to tape versions used in training.

use serde::{Deserialize, Serialize};

use crate::classifier::{check_labels, cross_entropy, cross_entropy_per_sample};
use crate::error::{Error, Result};
use crate::nn::{stack_rows, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig<T> {
    pub alpha: T,
    pub beta: T,
    /// Whether `W` inside `ρ` receives gradient. When false `ρ` is built from
    /// a detached copy of `W`.
    pub differentiate_rho_weights: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self { alpha: T::lit(0.5), beta: T::one(), differentiate_rho_weights: true }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        let cfg = Self { alpha, beta, differentiate_rho_weights: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero()) || !(self.beta >= T::zero()) {
            return Err(Error::invalid(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationStrategy<T> {
    pub eps: Vec<T>,
    /// `n×H`, `δᵢ = εᵢ·sign(gᵢ)`.
    pub delta: Tensor<T>,
}

/// `δᵢ = εᵢ·sign(gᵢ)` with `sign(0) = 0`.
pub fn compute_delta<T: Scalar>(grad_h: &Tensor<T>, eps: &[T]) -> Result<PerturbationStrategy<T>> {
    if eps.len() != grad_h.rows() {
        return Err(Error::invalid(format!("{} strengths for {} samples", eps.len(), grad_h.rows())));
    }
    if let Some(e) = eps.iter().find(|e| !(e.abs() < T::one())) {
        return Err(Error::invalid(format!("perturbation strength {e} outside (-1, 1)")));
    }
    let delta = Tensor::from_fn(grad_h.rows(), grad_h.cols(), |i, j| eps[i] * grad_h.get(i, j).sign0());
    Ok(PerturbationStrategy { eps: eps.to_vec(), delta })
}

/// Quadratic form `½ Δw Σ Δwᵀ` for a full `H×H` or diagonal `1×H` Σ.
fn half_quadratic<T: Scalar>(dw: &[T], sigma: &Tensor<T>) -> T {
    let h = dw.len();
    if sigma.rows() == 1 && h != 1 {
        return T::lit(0.5) * dw.iter().zip(sigma.data()).map(|(&d, &s)| d * d * s).sum::<T>();
    }
    let mut acc = T::zero();
    for a in 0..h {
        if dw[a] == T::zero() {
            continue;
        }
        let mut row = T::zero();
        for (b, &db) in dw.iter().enumerate() {
            row += sigma.get(a, b) * db;
        }
        acc += dw[a] * row;
    }
    T::lit(0.5) * acc
}

/// `ρʲ` for every class `j` given true class `y`; `ρʸ = 0`.
pub fn rho<T: Scalar>(w: &Tensor<T>, sigma_y: &Tensor<T>, y: usize) -> Vec<T> {
    let wy = w.row(y);
    (0..w.rows())
        .map(|j| {
            if j == y {
                return T::zero();
            }
            let dw: Vec<T> = w.row(j).iter().zip(wy).map(|(&a, &b)| a - b).collect();
            half_quadratic(&dw, sigma_y)
        })
        .collect()
}

/// `n×C` matrix of `ρᵢʲ` using each sample's class covariance.
pub fn rho_matrix<T: Scalar>(w: &Tensor<T>, sigmas: &[Tensor<T>], labels: &[usize]) -> Result<Tensor<T>> {
    check_labels(labels, labels.len(), w.rows())?;
    if sigmas.len() != w.rows() {
        return Err(Error::invalid(format!("{} covariances for {} classes", sigmas.len(), w.rows())));
    }
    let per_class: Vec<Vec<T>> = (0..w.rows()).map(|c| rho(w, &sigmas[c], c)).collect();
    let rows: Vec<Vec<T>> = labels.iter().map(|&y| per_class[y].clone()).collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, w.rows()));
    }
    Tensor::from_rows(&rows)
}

/// Adjusted logits `Z̃`. `delta` and `rho` may be omitted (zero).
pub fn iada_logits<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    h: &Tensor<T>,
    delta: Option<&Tensor<T>>,
    rho: Option<&Tensor<T>>,
    priors: &[T],
    cfg: &LossConfig<T>,
) -> Result<Tensor<T>> {
    if priors.len() != w.rows() || priors.iter().any(|&p| !(p > T::zero())) {
        return Err(Error::invalid("priors must be positive, one per class"));
    }
    let shifted = match delta {
        Some(d) if d.shape() == h.shape() => h.add(d),
        Some(d) => return Err(Error::invalid(format!("delta {:?} for features {:?}", d.shape(), h.shape()))),
        None => h.clone(),
    };
    let mut z = shifted.matmul(&w.transpose())?;
    let n = z.rows();
    if let Some(r) = rho {
        if r.shape() != z.shape() {
            return Err(Error::invalid(format!("rho {:?} for logits {:?}", r.shape(), z.shape())));
        }
    }
    for i in 0..n {
        for (j, &p) in priors.iter().enumerate() {
            let mut v = z.get(i, j) + b.get(0, j);
            if let Some(r) = rho {
                v += cfg.alpha * r.get(i, j);
            }
            v += cfg.beta * p.ln();
            z.set(i, j, v);
        }
    }
    Ok(z)
}

/// Mean `−log softmax(Z̃)[y]`.
pub fn iada_loss<T: Scalar>(z: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_labels(labels, z.rows(), z.cols())?;
    Ok(cross_entropy(z, labels))
}

/// Per-sample closed-form bound term `log Σⱼ exp(𝒵ʲ − 𝒵ʸ)` with
/// `𝒵ʲ = w_j(h + δ) + b_j + αρʲ` (no prior adjustment).
pub fn surrogate_terms<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    h: &Tensor<T>,
    delta: Option<&Tensor<T>>,
    rho: &Tensor<T>,
    labels: &[usize],
    alpha: T,
) -> Result<Vec<T>> {
    let cfg = LossConfig { alpha, beta: T::zero(), differentiate_rho_weights: true };
    let ones = vec![T::one(); w.rows()];
    let z = iada_logits(w, b, h, delta, Some(rho), &ones, &cfg)?;
    check_labels(labels, z.rows(), z.cols())?;
    Ok(cross_entropy_per_sample(&z, labels))
}

/// `Σᵢ (1/π_{yᵢ}) log Σⱼ exp(𝒵ᵢʲ − 𝒵ᵢʸ)`, the class-weighted bound that
/// precedes the prior-adjusted form.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_weighted_bound<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    h: &Tensor<T>,
    delta: Option<&Tensor<T>>,
    rho: &Tensor<T>,
    labels: &[usize],
    priors: &[T],
    alpha: T,
) -> Result<T> {
    if priors.len() != w.rows() || priors.iter().any(|&p| !(p > T::zero())) {
        return Err(Error::invalid("priors must be positive, one per class"));
    }
    let terms = surrogate_terms(w, b, h, delta, rho, labels, alpha)?;
    Ok(terms.iter().zip(labels).map(|(&t, &y)| t / priors[y]).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularizerReport<T> {
    /// `Σᵢ Σ_{j≠yᵢ} qᵢⱼ ρᵢʲ`
    pub g: T,
    /// `Σᵢ Σ_{j≠yᵢ} qᵢⱼ (w_j − w_{yᵢ})·δᵢ`
    pub r: T,
    /// `Σᵢ Σ_{j≠yᵢ} qᵢⱼ log(π_j / π_{yᵢ})`
    pub f: T,
    pub per_sample_g: Vec<T>,
    pub per_sample_r: Vec<T>,
    pub per_sample_f: Vec<T>,
}

pub fn regularizer_terms<T: Scalar>(
    q: &Tensor<T>,
    rho: &Tensor<T>,
    w: &Tensor<T>,
    delta: Option<&Tensor<T>>,
    priors: &[T],
    labels: &[usize],
) -> Result<RegularizerReport<T>> {
    check_labels(labels, q.rows(), q.cols())?;
    if rho.shape() != q.shape() || w.rows() != q.cols() || priors.len() != q.cols() {
        return Err(Error::invalid("regularizer inputs disagree on batch size or class count"));
    }
    let n = q.rows();
    let (mut pg, mut pr, mut pf) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, &y) in labels.iter().enumerate() {
        let (mut g, mut r, mut f) = (T::zero(), T::zero(), T::zero());
        for j in (0..q.cols()).filter(|&j| j != y) {
            let qij = q.get(i, j);
            g += qij * rho.get(i, j);
            if let Some(d) = delta {
                let dot: T = w.row(j).iter().zip(w.row(y)).zip(d.row(i)).map(|((&a, &b), &e)| (a - b) * e).sum();
                r += qij * dot;
            }
            f += qij * (priors[j] / priors[y]).ln();
        }
        pg.push(g);
        pr.push(r);
        pf.push(f);
    }
    Ok(RegularizerReport {
        g: pg.iter().copied().sum(),
        r: pr.iter().copied().sum(),
        f: pf.iter().copied().sum(),
        per_sample_g: pg,
        per_sample_r: pr,
        per_sample_f: pf,
    })
}

/// `n×C` matrix `ρ` on the tape. `sigmas` holds one node per class
/// (`H×H`, or `1×H` for diagonal covariances).
pub fn rho_var<'t, T: Scalar>(w: Var<'t, T>, sigmas: &[Var<'t, T>], labels: &[usize]) -> Result<Var<'t, T>> {
    let [c, h] = w.shape();
    if sigmas.len() != c {
        return Err(Error::invalid(format!("{} covariances for {c} classes", sigmas.len())));
    }
    let mut per_class = Vec::with_capacity(c);
    for (k, &sigma) in sigmas.iter().enumerate() {
        // D = W − 1·w_k, rows Δw_{j,k}.
        let d = w.sub(w.select_rows(&[k])?.broadcast_rows(c)?)?;
        let quad = if sigma.shape() == [1, h] && h != 1 {
            d.mul(d)?.matmul(sigma.t()?)?
        } else {
            d.matmul(sigma)?.mul(d)?.sum_cols()?
        };
        per_class.push(quad.scale(T::lit(0.5))?.t()?);
    }
    stack_rows(&per_class)?.select_rows(labels)
}

/// Tape inputs of the adjusted logits. `w` is used both in the linear head
/// and, unless `rho_weights` overrides it, inside `ρ`.
pub struct IadaVars<'t, 'a, T> {
    pub h: Var<'t, T>,
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
    pub delta: Option<Var<'t, T>>,
    pub sigmas: &'a [Var<'t, T>],
    pub labels: &'a [usize],
    pub priors: &'a [T],
}

pub fn iada_logits_var<'t, T: Scalar>(v: &IadaVars<'t, '_, T>, cfg: &LossConfig<T>) -> Result<Var<'t, T>> {
    let tape = v.h.tape();
    let c = v.w.shape()[0];
    if v.priors.len() != c {
        return Err(Error::invalid(format!("{} priors for {c} classes", v.priors.len())));
    }
    let shifted = match v.delta {
        Some(d) => v.h.add(d)?,
        None => v.h,
    };
    let mut z = shifted.matmul(v.w.t()?)?.add_row(v.b)?;
    if cfg.alpha != T::zero() {
        let w_rho = if cfg.differentiate_rho_weights { v.w } else { tape.constant(v.w.value()) };
        z = z.add(rho_var(w_rho, v.sigmas, v.labels)?.scale(cfg.alpha)?)?;
    }
    if cfg.beta != T::zero() {
        let adj: Vec<T> = v.priors.iter().map(|&p| cfg.beta * p.ln()).collect();
        z = z.add_row(tape.constant(Tensor::row_vector(&adj)))?;
    }
    Ok(z)
}

/// Mean IADA loss on the tape.
pub fn iada_loss_var<'t, T: Scalar>(v: &IadaVars<'t, '_, T>, cfg: &LossConfig<T>) -> Result<Var<'t, T>> {
    iada_logits_var(v, cfg)?.softmax_cross_entropy(v.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_psd(rng: &mut ChaCha8Rng, h: usize) -> Tensor<f64> {
        let a = rand_t(rng, h, h);
        a.matmul(&a.transpose()).unwrap()
    }

    #[test]
    fn delta_examples() {
        let g = Tensor::row_vector(&[0.3, -0.1, 0.0]);
        let p = compute_delta(&g, &[0.5]).unwrap();
        assert_eq!(p.delta.data(), &[0.5, -0.5, 0.0]);
        assert_eq!(compute_delta(&g, &[0.0]).unwrap().delta.data(), &[0.0, 0.0, 0.0]);
        assert!(compute_delta(&g, &[1.0]).is_err());
        assert!(compute_delta(&g, &[0.1, 0.1]).is_err());
    }

    #[test]
    fn rho_examples() {
        let w = Tensor::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = rho(&w, &Tensor::identity(2), 1);
        assert_eq!(r, vec![1.0, 0.0]);
        let diag = Tensor::row_vector(&[1.0, 1.0]);
        assert_eq!(rho(&w, &diag, 1), vec![1.0, 0.0]);
    }

    #[test]
    fn balanced_priors_leave_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, b, h) = (rand_t(&mut rng, 4, 3), rand_t(&mut rng, 1, 4), rand_t(&mut rng, 6, 3));
        let labels = [0, 1, 2, 3, 0, 1];
        let plain = iada_logits(&w, &b, &h, None, None, &[0.25; 4], &LossConfig::new(0.0, 0.0).unwrap()).unwrap();
        let la = iada_logits(&w, &b, &h, None, None, &[0.25; 4], &LossConfig::new(0.0, 1.0).unwrap()).unwrap();
        for (a, b) in plain.data().iter().zip(la.data()) {
            assert!((a + 0.25f64.ln() - b).abs() < 1e-15);
        }
        let d = iada_loss(&plain, &labels).unwrap() - iada_loss(&la, &labels).unwrap();
        assert!(d.abs() < 1e-14);
    }

    #[test]
    fn uniform_logits_loss_is_log_c() {
        let z = Tensor::full(3, 10, 0.7);
        assert!((iada_loss(&z, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn regularizer_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_t(&mut rng, 3, 4);
        let h = rand_t(&mut rng, 5, 4);
        let labels = [0, 1, 2, 1, 0];
        let sigmas: Vec<_> = (0..3).map(|_| rand_psd(&mut rng, 4)).collect();
        let r = rho_matrix(&w, &sigmas, &labels).unwrap();
        let z = iada_logits(&w, &Tensor::zeros(1, 3), &h, None, None, &[1.0; 3], &LossConfig::new(0.0, 0.0).unwrap()).unwrap();
        let q = crate::classifier::softmax_rows(&z);
        let rep = regularizer_terms(&q, &r, &w, None, &[1.0 / 3.0; 3], &labels).unwrap();
        assert_eq!(rep.r, 0.0);
        assert!(rep.f.abs() < 1e-15);
        assert!(rep.g >= 0.0);
    }

    #[test]
    fn tape_logits_match_tensor_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for diagonal in [false, true] {
            let (c, hd, n) = (4, 3, 7);
            let w = rand_t(&mut rng, c, hd);
            let b = rand_t(&mut rng, 1, c);
            let h = rand_t(&mut rng, n, hd);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let sigmas: Vec<Tensor<f64>> = (0..c)
                .map(|_| if diagonal { rand_t(&mut rng, 1, hd).map(f64::abs) } else { rand_psd(&mut rng, hd) })
                .collect();
            let g = rand_t(&mut rng, n, hd);
            let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
            let delta = compute_delta(&g, &eps).unwrap().delta;
            let priors = [0.4, 0.3, 0.2, 0.1];
            let cfg = LossConfig::default();
            let rho_t = rho_matrix(&w, &sigmas, &labels).unwrap();
            let expect = iada_logits(&w, &b, &h, Some(&delta), Some(&rho_t), &priors, &cfg).unwrap();

            let tape = Tape::new();
            let sv: Vec<_> = sigmas.iter().map(|s| tape.constant(s.clone())).collect();
            let vars = IadaVars {
                h: tape.constant(h.clone()),
                w: tape.leaf(w.clone()),
                b: tape.leaf(b.clone()),
                delta: Some(tape.constant(delta.clone())),
                sigmas: &sv,
                labels: &labels,
                priors: &priors,
            };
            let got = iada_logits_var(&vars, &cfg).unwrap().value();
            assert!(got.sub(&expect).max_abs() < 1e-13);
        }
    }
}
