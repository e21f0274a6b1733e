//! Brute-force checks of the closed-form loss: explicit Gaussian feature
//! augmentation, Monte-Carlo expectations, the Gaussian moment-generating
//! function, finite-`ℳ` convergence and central finite differences.
//!
//! Everything here is `f64` and independent of the tape; instance-level
//! suites run in parallel with one RNG stream per instance.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::NUM_CHARACTERISTICS;
use crate::class_stats::{ClassStats, CovarianceMode};
use crate::classifier::ClassifierParams;
use crate::error::{Error, Result};
use crate::loss::{compute_delta, iada_logits, iada_loss, iada_loss_var, rho_matrix, surrogate_terms, IadaVars, LossConfig};
use crate::nn::{log_sum_exp, Tape, Tensor};
use crate::perturb::PerturbNet;
use crate::trainer::{MetaContext, StepInputs};

pub const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub fd_step: f64,
    /// Explicit augmentation count `ℳ`; sample `i` receives `ℳ/π_{yᵢ}`.
    pub explicit_count: usize,
    pub alpha: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { mc_samples: 100_000, seed: 0, fd_step: 1e-5, explicit_count: 1000, alpha: 0.5 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-7..=1e-3).contains(&self.fd_step) {
            return Err(Error::invalid(format!("finite-difference step {} outside [1e-7, 1e-3]", self.fd_step)));
        }
        if self.mc_samples < 1000 {
            return Err(Error::invalid(format!("{} Monte-Carlo draws; bound checks need at least 1000", self.mc_samples)));
        }
        if self.explicit_count == 0 {
            return Err(Error::invalid("explicit augmentation count must be positive"));
        }
        Ok(())
    }
}

/// Lower Cholesky factor of `Σ + jitter·I` (full `H×H` or diagonal `1×H`).
pub fn cholesky_with_jitter(sigma: &Tensor<f64>, dim: usize) -> Result<DMatrix<f64>> {
    if sigma.rows() == 1 && sigma.cols() == dim && dim != 1 {
        if sigma.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Numerical("negative or non-finite variance".into()));
        }
        return Ok(DMatrix::from_diagonal(&DVector::from_iterator(dim, sigma.data().iter().map(|v| (v + CHOLESKY_JITTER).sqrt()))));
    }
    if sigma.shape() != [dim, dim] {
        return Err(Error::invalid(format!("covariance {:?} for {dim}-dimensional features", sigma.shape())));
    }
    let m = DMatrix::from_row_slice(dim, dim, sigma.data()) + DMatrix::identity(dim, dim) * CHOLESKY_JITTER;
    nalgebra::Cholesky::new(m)
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance is not positive semi-definite".into()))
}

/// `count` draws of `h̃ ~ N(h + δ, αΣ)`, one per row.
pub fn explicit_augment(h: &[f64], delta: &[f64], sigma: &Tensor<f64>, alpha: f64, count: usize, seed: u64) -> Result<Tensor<f64>> {
    let d = h.len();
    if delta.len() != d {
        return Err(Error::invalid("h and delta differ in length"));
    }
    let l = cholesky_with_jitter(sigma, d)? * alpha.max(0.0).sqrt();
    let center: Vec<f64> = h.iter().zip(delta).map(|(a, b)| a + b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(count, d);
    let mut z = vec![0.0; d];
    for k in 0..count {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let row = out.row_mut(k);
        for (a, r) in row.iter_mut().enumerate() {
            *r = center[a] + (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Gaussian logits of one augmented sample: `z = μ + A ξ`, `ξ ~ N(0, I)`.
struct LogitSampler {
    mu: Vec<f64>,
    a: DMatrix<f64>,
}

impl LogitSampler {
    #[allow(clippy::too_many_arguments)]
    fn new(w: &Tensor<f64>, b: &Tensor<f64>, h: &[f64], delta: &[f64], sigma: &Tensor<f64>, alpha: f64) -> Result<Self> {
        let (c, d) = (w.rows(), w.cols());
        if h.len() != d || delta.len() != d || b.shape() != [1, c] {
            return Err(Error::invalid("sampler inputs disagree on dimensions"));
        }
        let l = cholesky_with_jitter(sigma, d)? * alpha.max(0.0).sqrt();
        let wm = DMatrix::from_row_slice(c, d, w.data());
        let center = DVector::from_iterator(d, h.iter().zip(delta).map(|(a, b)| a + b));
        let mu = (&wm * center).iter().zip(b.data()).map(|(z, b)| z + b).collect();
        Ok(Self { mu, a: wm * l })
    }

    fn estimate(&self, y: usize, count: usize, rng: &mut ChaCha8Rng) -> McEstimate {
        let (c, d) = self.a.shape();
        let mut xi = vec![0.0; d];
        let mut z = vec![0.0; c];
        let (mut mean, mut m2) = (0.0, 0.0);
        for k in 0..count {
            xi.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = self.mu[j] + (0..d).map(|t| self.a[(j, t)] * xi[t]).sum::<f64>();
            }
            let loss = log_sum_exp(&z) - z[y];
            let delta = loss - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (loss - mean);
        }
        let var = if count > 1 { m2 / (count - 1) as f64 } else { 0.0 };
        McEstimate { mean, std_error: (var / count as f64).sqrt() }
    }
}

/// Monte-Carlo estimate of `E[ℓ_CE(W h̃ + b, y)]`, `h̃ ~ N(h + δ, αΣ)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_ce(
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    h: &[f64],
    delta: &[f64],
    sigma: &Tensor<f64>,
    alpha: f64,
    y: usize,
    count: usize,
    seed: u64,
) -> Result<McEstimate> {
    if y >= w.rows() || count == 0 {
        return Err(Error::invalid("label out of range or zero draws"));
    }
    let sampler = LogitSampler::new(w, b, h, delta, sigma, alpha)?;
    Ok(sampler.estimate(y, count, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgfCheck {
    pub mc_estimate: f64,
    pub std_error: f64,
    pub closed_form: f64,
}

impl MgfCheck {
    /// |MC − closed| in standard errors (0 when both agree exactly).
    pub fn z_score(&self) -> f64 {
        let gap = (self.mc_estimate - self.closed_form).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.std_error
        }
    }
}

/// `E[e^{tX}]`, `X ~ N(μ, σ²)`, by sampling and by `e^{tμ + σ²t²/2}`.
///
/// Draws come from the widened proposal `N(μ, s²σ²)`, `s² = 1 + t²σ²`, and
/// are importance weighted. The weighted integrand is bounded, so the
/// sample standard error stays reliable where the plain lognormal estimator
/// (see [`mgf_check_plain`]) has too heavy a tail for it.
pub fn mgf_check(t: f64, mu: f64, sigma2: f64, count: usize, seed: u64) -> Result<MgfCheck> {
    let s = (1.0 + t * t * sigma2.max(0.0)).sqrt();
    let shrink = 1.0 - 1.0 / (s * s);
    mgf_estimate(t, mu, sigma2, count, seed, |z| {
        let z = s * z;
        (z, s * (-0.5 * z * z * shrink).exp())
    })
}

/// Unweighted sampling from `N(μ, σ²)`.
pub fn mgf_check_plain(t: f64, mu: f64, sigma2: f64, count: usize, seed: u64) -> Result<MgfCheck> {
    mgf_estimate(t, mu, sigma2, count, seed, |z| (z, 1.0))
}

fn mgf_estimate(t: f64, mu: f64, sigma2: f64, count: usize, seed: u64, draw: impl Fn(f64) -> (f64, f64)) -> Result<MgfCheck> {
    if !(sigma2 >= 0.0) || count < 2 {
        return Err(Error::invalid("need σ² ≥ 0 and at least two draws"));
    }
    let closed_form = (t * mu + 0.5 * sigma2 * t * t).exp();
    let sd = sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..count {
        let (z, weight) = draw(StandardNormal.sample(&mut rng));
        let v = weight * (t * (mu + sd * z)).exp();
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    Ok(MgfCheck { mc_estimate: mean, std_error: (m2 / (count - 1) as f64 / count as f64).sqrt(), closed_form })
}

/// A batch on which the augmented loss is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInstance {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub h: Tensor<f64>,
    pub delta: Tensor<f64>,
    pub sigmas: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub priors: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub m: usize,
    pub loss: f64,
    pub gap: f64,
}

/// `ℳᵢ = round(ℳ/π_{yᵢ})`, at least one.
pub fn per_sample_counts(m: usize, priors: &[f64], labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|&y| ((m as f64 / priors[y]).round() as usize).max(1)).collect()
}

fn samplers(inst: &LossInstance) -> Result<Vec<LogitSampler>> {
    (0..inst.labels.len())
        .map(|i| LogitSampler::new(&inst.w, &inst.b, inst.h.row(i), inst.delta.row(i), &inst.sigmas[inst.labels[i]], inst.alpha))
        .collect()
}

/// The `ℳ → ∞` limit `Σᵢ E[ℓᵢ]/π_{yᵢ} / Σᵢ 1/π_{yᵢ}`, each expectation from
/// `draws` samples.
pub fn limit_loss(inst: &LossInstance, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut num, mut den) = (0.0, 0.0);
    for (s, &y) in samplers(inst)?.iter().zip(&inst.labels) {
        let w = 1.0 / inst.priors[y];
        num += w * s.estimate(y, draws, &mut rng).mean;
        den += w;
    }
    Ok(num / den)
}

/// Finite-`ℳ` loss `Σᵢ Σₖ ℓ(h̃ᵢₖ) / Σᵢ ℳᵢ` and its distance to `reference`
/// for each `ℳ` in the sequence.
pub fn finite_loss_convergence(inst: &LossInstance, m_sequence: &[usize], reference: f64, seed: u64) -> Result<Vec<GapRow>> {
    if m_sequence.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ℳ sequence must be increasing"));
    }
    let samplers = samplers(inst)?;
    let mut rows = Vec::with_capacity(m_sequence.len());
    for (k, &m) in m_sequence.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let counts = per_sample_counts(m, &inst.priors, &inst.labels);
        let mut total = 0.0;
        for ((s, &y), &cnt) in samplers.iter().zip(&inst.labels).zip(&counts) {
            total += s.estimate(y, cnt, &mut rng).mean * cnt as f64;
        }
        let loss = total / counts.iter().sum::<usize>() as f64;
        rows.push(GapRow { m, loss, gap: (loss - reference).abs() });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Central differences `(f(x + s eₖ) − f(x − s eₖ)) / 2s`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("finite differences at a non-finite point"));
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        p[k] = x[k] + step;
        let up = f(&p);
        p[k] = x[k] - step;
        let down = f(&p);
        p[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function is not finite near coordinate {k}")));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random symmetric PSD matrix `A Aᵀ / H` with entries of `A` in `[−s, s]`.
pub fn random_psd(rng: &mut impl Rng, dim: usize, scale: f64) -> Tensor<f64> {
    let a = Tensor::from_fn(dim, dim, |_, _| rng.random_range(-scale..scale));
    a.matmul(&a.transpose()).expect("square").scale(1.0 / dim as f64)
}

/// Random single-sample instance for the bound check: `C ≤ 5`, `H ≤ 8`,
/// `α ∈ [0, 1]`, `|ε| < 1`.
pub fn random_bound_instance(rng: &mut impl Rng) -> LossInstance {
    let c = rng.random_range(2..=5);
    let d = rng.random_range(1..=8);
    let w = Tensor::from_fn(c, d, |_, _| rng.random_range(-1.5..1.5));
    let b = Tensor::from_fn(1, c, |_, _| rng.random_range(-1.0..1.0));
    let h = Tensor::from_fn(1, d, |_, _| rng.random_range(-2.0..2.0));
    let g = Tensor::from_fn(1, d, |_, _| rng.random_range(-1.0..1.0));
    let eps = rng.random_range(-0.99..0.99);
    let delta = compute_delta(&g, &[eps]).expect("|ε| < 1").delta;
    let sigmas = (0..c).map(|_| random_psd(rng, d, 1.5)).collect();
    let y = rng.random_range(0..c);
    let mut priors: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = priors.iter().sum();
    priors.iter_mut().for_each(|p| *p /= s);
    LossInstance { w, b, h, delta, sigmas, labels: vec![y], priors, alpha: rng.random_range(0.0..1.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst-case statistic of the suite (meaning depends on the suite).
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JensenConfig {
    pub instances: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Fault injection: negate `ρ` in the closed form.
    pub flip_rho_sign: bool,
}

impl Default for JensenConfig {
    fn default() -> Self {
        Self { instances: 1000, mc_samples: 100_000, seed: 0, flip_rho_sign: false }
    }
}

/// Closed-form per-sample bound `≥` MC estimate − 3 standard errors.
/// A `1e-12` slack absorbs roundoff where the two coincide (α → 0).
pub fn jensen_suite(cfg: &JensenConfig) -> Result<SuiteReport> {
    let results: Vec<(f64, bool)> = (0..cfg.instances)
        .into_par_iter()
        .map(|k| -> Result<(f64, bool)> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            let inst = random_bound_instance(&mut rng);
            let mut rho = rho_matrix(&inst.w, &inst.sigmas, &inst.labels)?;
            if cfg.flip_rho_sign {
                rho = rho.scale(-1.0);
            }
            let closed = surrogate_terms(&inst.w, &inst.b, &inst.h, Some(&inst.delta), &rho, &inst.labels, inst.alpha)?[0];
            let y = inst.labels[0];
            let mc = mc_expected_ce(&inst.w, &inst.b, inst.h.row(0), inst.delta.row(0), &inst.sigmas[y], inst.alpha, y, cfg.mc_samples, rng.random())?;
            let margin = closed - (mc.mean - 3.0 * mc.std_error);
            Ok((margin, margin >= -1e-12))
        })
        .collect::<Result<_>>()?;
    let failures = results.iter().filter(|r| !r.1).count();
    let worst = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    Ok(SuiteReport {
        name: "jensen".into(),
        cases: results.len(),
        failures,
        worst,
        detail: format!("closed form minus (MC − 3se), minimum {worst:.3e}"),
    })
}

/// `(t, μ, σ²)` grid with `|t| ≤ 2`, `σ² ≤ 4`; passes when every point is
/// within 4 standard errors.
pub fn mgf_suite(points_per_axis: usize, draws: usize, seed: u64) -> Result<SuiteReport> {
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if points_per_axis == 1 {
            return vec![lo];
        }
        (0..points_per_axis).map(|k| lo + (hi - lo) * k as f64 / (points_per_axis - 1) as f64).collect()
    };
    let (ts, mus, s2s) = (axis(-2.0, 2.0), axis(-1.0, 1.0), axis(0.0, 4.0));
    let mut grid = Vec::with_capacity(ts.len() * mus.len() * s2s.len());
    for &t in &ts {
        for &m in &mus {
            grid.extend(s2s.iter().map(|&s| (t, m, s)));
        }
    }
    let z: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(k, &(t, m, s))| mgf_check(t, m, s, draws, seed.wrapping_add(k as u64)).map(|c| c.z_score()))
        .collect::<Result<_>>()?;
    let failures = z.iter().filter(|&&v| !(v <= 4.0)).count();
    let worst = z.iter().copied().fold(0.0, f64::max);
    Ok(SuiteReport { name: "mgf".into(), cases: z.len(), failures, worst, detail: format!("largest |z| {worst:.2}") })
}

/// Gaps at `ℳ ∈ {10, 100, 1000}` averaged over `seeds` draws on a fixed
/// instance; passes when the log-log slope is `−0.5 ± 0.15`.
pub fn convergence_suite(seeds: usize, seed: u64) -> Result<(SuiteReport, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, n) = (3, 4, 4);
    let w = Tensor::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(1, c, |_, _| rng.random_range(-0.5..0.5));
    let h = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let g = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let inst = LossInstance {
        w,
        b,
        delta: compute_delta(&g, &eps)?.delta,
        h,
        sigmas: (0..c).map(|_| random_psd(&mut rng, d, 1.5)).collect(),
        labels: vec![0, 1, 2, 2],
        priors: vec![0.6, 0.3, 0.1],
        alpha: 0.5,
    };
    let ms = [10usize, 100, 1000];
    let reference = limit_loss(&inst, 2_000_000, seed ^ 0xA5A5_5A5A)?;
    let rows: Vec<Vec<GapRow>> = (0..seeds)
        .into_par_iter()
        .map(|s| finite_loss_convergence(&inst, &ms, reference, (seed.wrapping_add(1 + s as u64)) << 8))
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = (0..ms.len()).map(|k| rows.iter().map(|r| r[k].gap).sum::<f64>() / seeds as f64).collect();
    let slope = log_log_slope(&ms.map(|m| m as f64), &gaps);
    let ok = (slope + 0.5).abs() <= 0.15;
    Ok((
        SuiteReport {
            name: "convergence".into(),
            cases: 1,
            failures: (!ok) as usize,
            worst: slope,
            detail: format!("mean gaps {gaps:?}, log-log slope {slope:.3}"),
        },
        slope,
    ))
}

/// Flattened parameter list helpers for finite differences.
fn flatten(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[Tensor<f64>], flat: &[f64]) -> Vec<Tensor<f64>> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.rows() * t.cols();
            let out = Tensor::from_vec(t.rows(), t.cols(), flat[at..at + n].to_vec()).expect("same size");
            at += n;
            out
        })
        .collect()
}

fn worst_relative(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y, floor)).fold(0.0, f64::max)
}

/// Loss through the tensor path (no tape): extractor, `ρ`, adjusted logits.
#[allow(clippy::too_many_arguments)]
fn iada_loss_plain(
    model: &ClassifierParams<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    delta: &Tensor<f64>,
    sigmas: &[Tensor<f64>],
    priors: &[f64],
    cfg: &LossConfig<f64>,
) -> Result<f64> {
    let h = model.extract_features(x)?;
    let w = &model.head.weight;
    let rho = rho_matrix(w, sigmas, labels)?;
    let z = iada_logits(w, &model.head.bias, &h, Some(delta), Some(&rho), priors, cfg)?;
    iada_loss(&z, labels)
}

fn tape_gradient(
    model: &ClassifierParams<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    delta: &Tensor<f64>,
    sigmas: &[Tensor<f64>],
    priors: &[f64],
    cfg: &LossConfig<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::new();
    let cv = model.on_tape(&tape);
    let sv: Vec<_> = sigmas.iter().map(|s| tape.constant(s.clone())).collect();
    let h = cv.features(tape.constant(x.clone()))?;
    let vars = IadaVars { h, w: cv.weight(), b: cv.bias(), delta: Some(tape.constant(delta.clone())), sigmas: &sv, labels, priors };
    let loss = iada_loss_var(&vars, cfg)?;
    Ok(tape.grad(loss, &cv.vars(), None)?.iter().map(|g| g.value()).collect())
}

/// Zero-initialised biases put pre-activations of rows with dead inputs
/// exactly on the ReLU kink, where differences are meaningless.
fn jittered(mut model: ClassifierParams<f64>, rng: &mut impl Rng) -> ClassifierParams<f64> {
    for t in model.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    model
}

fn random_priors(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Relative errors are `|a − b| / max(|a|, |b|, floor)`.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Tape gradients of the adjusted loss w.r.t. every classifier parameter
/// against central differences of the tape-free loss; passes below `1e-4`.
pub fn gradient_suite(instances: usize, seed: u64, step: f64) -> Result<SuiteReport> {
    let errs: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(k as u64));
            let (c, d, n) = (rng.random_range(2..=4), rng.random_range(1..=4), rng.random_range(1..=6));
            let input = rng.random_range(1..=4);
            let model = jittered(ClassifierParams::random(input, &[rng.random_range(2..=5)], d, c, &mut rng), &mut rng);
            let x = Tensor::from_fn(n, input, |_, _| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let g = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
            let delta = compute_delta(&g, &eps)?.delta;
            let sigmas: Vec<_> = (0..c).map(|_| random_psd(&mut rng, d, 1.0)).collect();
            let priors = random_priors(&mut rng, c);
            let cfg = LossConfig { alpha: rng.random_range(0.0..1.0), beta: rng.random_range(0.0..1.0), differentiate_rho_weights: true };
            let auto = flatten(&tape_gradient(&model, &x, &labels, &delta, &sigmas, &priors, &cfg)?);
            let base: Vec<Tensor<f64>> = model.tensors().into_iter().cloned().collect();
            let fd = fd_gradient(
                |p| {
                    let m = model.with_tensors(unflatten(&base, p)).expect("same shapes");
                    iada_loss_plain(&m, &x, &labels, &delta, &sigmas, &priors, &cfg).unwrap_or(f64::NAN)
                },
                &flatten(&base),
                step,
            )?;
            Ok(worst_relative(&auto, &fd, GRADIENT_FLOOR))
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let failures = errs.iter().filter(|&&e| !(e < 1e-4)).count();
    Ok(SuiteReport { name: "gradient".into(), cases: errs.len(), failures, worst, detail: format!("max relative error {worst:.2e}") })
}

/// A tiny meta problem: `C = 2`, `H = 2`, `n = m = 4`.
pub struct TinyMetaProblem {
    pub classifier: ClassifierParams<f64>,
    pub perturb: PerturbNet<f64>,
    pub sigmas: Vec<Tensor<f64>>,
    pub priors: Vec<f64>,
    pub inputs: StepInputs<f64>,
    pub loss: LossConfig<f64>,
    pub lr: f64,
}

impl TinyMetaProblem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, n, input) = (2, 2, 4, 3);
        let classifier = jittered(ClassifierParams::random(input, &[4], d, c, &mut rng), &mut rng);
        let mut perturb = PerturbNet::new(NUM_CHARACTERISTICS, 6, &mut rng);
        perturb.mlp.layers[1].weight = Tensor::from_fn(1, 6, |_, _| rng.random_range(-0.5..0.5));
        perturb.mlp.layers[1].bias = Tensor::scalar(rng.random_range(-0.2..0.2));
        let sign_g = Tensor::from_fn(n, d, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let inputs = StepInputs {
            x: Tensor::from_fn(n, input, |_, _| rng.random_range(-1.5..1.5)),
            labels: vec![0, 1, 1, 0],
            sign_g,
            characteristics: Tensor::from_fn(n, NUM_CHARACTERISTICS, |_, _| rng.random_range(-1.0..1.0)),
            meta_x: Tensor::from_fn(n, input, |_, _| rng.random_range(-1.5..1.5)),
            meta_labels: vec![1, 0, 0, 1],
        };
        Self {
            classifier,
            perturb,
            sigmas: (0..c).map(|_| random_psd(&mut rng, d, 1.0)).collect(),
            priors: vec![0.8, 0.2],
            inputs,
            loss: LossConfig::default(),
            lr: 0.5,
        }
    }

    pub fn context(&self) -> MetaContext<'_, f64> {
        MetaContext {
            classifier: &self.classifier,
            perturb: &self.perturb,
            sigmas: &self.sigmas,
            priors: &self.priors,
            loss: self.loss,
            lr: self.lr,
            learn_eps: true,
        }
    }
}

/// Ω and Σ hypergradients against central differences of the metadata loss
/// after the pseudo-step; passes below `1e-3`.
pub fn hypergradient_suite(instances: usize, seed: u64, step: f64) -> Result<SuiteReport> {
    let errs: Vec<(f64, f64)> = (0..instances)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let p = TinyMetaProblem::random(seed.wrapping_mul(104_729).wrapping_add(k as u64));
            let hyper = p.context().hypergradients(&p.inputs)?;
            let omega: Vec<Tensor<f64>> = p.perturb.tensors().into_iter().cloned().collect();
            let fd_omega = fd_gradient(
                |v| {
                    let mut q = p.perturb.clone();
                    for (slot, t) in q.tensors_mut().into_iter().zip(unflatten(&omega, v)) {
                        *slot = t;
                    }
                    MetaContext { perturb: &q, ..p.context() }.meta_objective(&p.inputs).unwrap_or(f64::NAN)
                },
                &flatten(&omega),
                step,
            )?;
            let fd_sigma = fd_gradient(
                |v| {
                    let s = unflatten(&p.sigmas, v);
                    MetaContext { sigmas: &s, ..p.context() }.meta_objective(&p.inputs).unwrap_or(f64::NAN)
                },
                &flatten(&p.sigmas),
                step,
            )?;
            Ok((worst_relative(&flatten(&hyper.omega), &fd_omega, GRADIENT_FLOOR), worst_relative(&flatten(&hyper.sigma), &fd_sigma, GRADIENT_FLOOR)))
        })
        .collect::<Result<_>>()?;
    let worst = errs.iter().map(|e| e.0.max(e.1)).fold(0.0, f64::max);
    let failures = errs.iter().filter(|e| !(e.0.max(e.1) < 1e-3)).count();
    let (wo, ws) = errs.iter().fold((0.0f64, 0.0f64), |acc, e| (acc.0.max(e.0), acc.1.max(e.1)));
    Ok(SuiteReport {
        name: "hypergradient".into(),
        cases: errs.len(),
        failures,
        worst,
        detail: format!("max relative error Ω {wo:.2e}, Σ {ws:.2e}"),
    })
}

/// Population covariance of the rows of `x` with the given label, two-pass.
pub fn batch_covariance(x: &Tensor<f64>, labels: &[usize], class: usize) -> Tensor<f64> {
    let rows: Vec<&[f64]> = labels.iter().enumerate().filter(|(_, &y)| y == class).map(|(i, _)| x.row(i)).collect();
    let d = x.cols();
    let mut out = Tensor::zeros(d, d);
    if rows.is_empty() {
        return out;
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|a| rows.iter().map(|r| r[a]).sum::<f64>() / n).collect();
    for a in 0..d {
        for b in 0..d {
            let v = rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n;
            out.set(a, b, v);
        }
    }
    out
}

/// Online pooling over random batch partitions against the full-batch
/// covariance; passes at `1e-10` absolute.
pub fn pooling_suite(partitions: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, n) = (3, 4, 200);
    let x = Tensor::from_fn(n, d, |_, j| rng.random_range(-3.0..3.0) + j as f64);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let full: Vec<Tensor<f64>> = (0..c).map(|k| batch_covariance(&x, &labels, k)).collect();
    let mut worst = 0.0f64;
    for _ in 0..partitions {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut stats = ClassStats::<f64>::new(vec![1.0 / c as f64; c], d, CovarianceMode::Full)?;
        let mut at = 0;
        while at < n {
            let len = rng.random_range(1..=40).min(n - at);
            let ids = &order[at..at + len];
            let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            stats.update_covariance(&x.select_rows(ids), &batch_labels)?;
            at += len;
        }
        for (k, f) in full.iter().enumerate() {
            let diff = stats.covariance(k).data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    Ok(SuiteReport {
        name: "pooling".into(),
        cases: partitions,
        failures: if worst <= 1e-10 { 0 } else { partitions },
        worst,
        detail: format!("max |online − full batch| {worst:.2e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_draws_are_exact() {
        let s = Tensor::identity(2);
        let x = explicit_augment(&[1.0, -2.0], &[0.5, 0.5], &s, 0.0, 10, 3).unwrap();
        for i in 0..10 {
            assert_eq!(x.row(i), &[1.5, -1.5]);
        }
        let w = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mc = mc_expected_ce(&w, &Tensor::zeros(1, 2), &[1.0, 0.0], &[0.0, 0.0], &s, 0.0, 0, 50, 1).unwrap();
        let exact = log_sum_exp(&[1.0, 0.0]) - 1.0;
        assert!((mc.mean - exact).abs() < 1e-15);
        assert_eq!(mc.std_error, 0.0);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let w = Tensor::row_vector(&[1.0, 2.0]);
        let mc = mc_expected_ce(&w, &Tensor::zeros(1, 1), &[0.3, 0.1], &[0.0, 0.0], &Tensor::identity(2), 1.0, 0, 100, 1).unwrap();
        assert_eq!(mc.mean, 0.0);
    }

    #[test]
    fn mgf_degenerate_cases() {
        let c = mgf_check(0.0, 0.7, 2.0, 100, 1).unwrap();
        assert_eq!((c.mc_estimate, c.closed_form), (1.0, 1.0));
        let c = mgf_check(0.9, -0.4, 0.0, 100, 1).unwrap();
        assert!((c.mc_estimate - c.closed_form).abs() < 1e-14);
        let c = mgf_check_plain(0.0, 0.7, 2.0, 100, 1).unwrap();
        assert_eq!(c.mc_estimate, 1.0);
        assert!(mgf_check(1.0, 0.0, -1.0, 10, 0).is_err());
    }

    #[test]
    fn weighted_and_plain_agree_on_light_tails() {
        let a = mgf_check(0.5, 0.2, 1.0, 200_000, 7).unwrap();
        let b = mgf_check_plain(0.5, 0.2, 1.0, 200_000, 7).unwrap();
        assert!(a.z_score() < 5.0 && b.z_score() < 5.0);
        assert!(a.std_error < b.std_error);
        // A wrong closed form is far outside the error bars.
        let wrong = (0.5f64 * 0.2 + 0.5 * 0.5).exp();
        assert!((a.mc_estimate - wrong).abs() > 20.0 * a.std_error);
    }

    #[test]
    fn fd_examples() {
        let g = fd_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-4).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
        let g = fd_gradient(|x| x[0].sin(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!(fd_gradient(|x| x[0].ln(), &[1e-6], 1e-5).is_err());
    }

    #[test]
    fn weighted_counts() {
        assert_eq!(per_sample_counts(100, &[0.1, 1.0], &[0, 1]), vec![1000, 100]);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(cholesky_with_jitter(&s, 2).is_err());
        assert!(explicit_augment(&[0.0, 0.0], &[0.0, 0.0], &s, 1.0, 3, 0).is_err());
    }

    #[test]
    fn small_suites_pass() {
        for r in [gradient_suite(5, 1, 1e-6).unwrap(), hypergradient_suite(2, 1, 1e-6).unwrap(), pooling_suite(3, 1).unwrap()] {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn mutated_rho_breaks_the_bound() {
        let cfg = JensenConfig { instances: 20, mc_samples: 20_000, seed: 3, flip_rho_sign: true };
        assert!(!jensen_suite(&cfg).unwrap().passed());
        let cfg = JensenConfig { flip_rho_sign: false, ..cfg };
        assert!(jensen_suite(&cfg).unwrap().passed());
    }

    #[test]
    fn config_bounds() {
        assert!(OracleConfig::default().validate().is_ok());
        assert!(OracleConfig { fd_step: 1e-2, ..OracleConfig::default() }.validate().is_err());
        assert!(OracleConfig { mc_samples: 999, ..OracleConfig::default() }.validate().is_err());
    }

    #[test]
    fn augmentation_moments() {
        let n = 100_000;
        let x = explicit_augment(&[0.5, -1.0, 2.0], &[0.1, 0.1, -0.1], &Tensor::identity(3), 1.0, n, 11).unwrap();
        for (a, want) in [0.6, -0.9, 1.9].iter().enumerate() {
            let mean = (0..n).map(|i| x.get(i, a)).sum::<f64>() / n as f64;
            assert!((mean - want).abs() < 4.0 / (n as f64).sqrt());
        }
        let sigma = Tensor::from_vec(2, 2, vec![2.0, 0.6, 0.6, 1.0]).unwrap();
        let x = explicit_augment(&[0.0, 0.0], &[0.0, 0.0], &sigma, 0.5, n, 12).unwrap();
        let cov = batch_covariance(&x, &vec![0; n], 0);
        let frob = cov.sub(&sigma.scale(0.5)).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(frob < 0.03, "{frob}");
    }

    #[test]
    fn explicit_draws_approach_the_expectation() {
        let w = Tensor::from_vec(3, 2, vec![1.0, 0.0, -0.5, 1.0, 0.2, -1.0]).unwrap();
        let b = Tensor::row_vector(&[0.1, 0.0, -0.2]);
        let sigma = Tensor::from_vec(2, 2, vec![1.0, 0.3, 0.3, 0.5]).unwrap();
        let (h, d) = ([0.4, -0.3], [0.2, -0.2]);
        let x = explicit_augment(&h, &d, &sigma, 0.8, 200_000, 5).unwrap();
        let z = x.matmul(&w.transpose()).unwrap();
        let explicit = (0..z.rows()).map(|i| {
            let row: Vec<f64> = z.row(i).iter().zip(b.data()).map(|(a, c)| a + c).collect();
            log_sum_exp(&row) - row[1]
        }).sum::<f64>() / z.rows() as f64;
        let mc = mc_expected_ce(&w, &b, &h, &d, &sigma, 0.8, 1, 200_000, 6).unwrap();
        assert!((explicit - mc.mean).abs() < 5.0 * mc.std_error * 2f64.sqrt());
    }

    #[test]
    fn plain_mgf_at_a_moderate_point() {
        let c = mgf_check_plain(0.7, -0.3, 2.1, 1_000_000, 2).unwrap();
        assert!(c.z_score() < 4.0, "{c:?}");
    }

    #[test]
    fn zero_dispersion_has_no_finite_sample_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inst = random_bound_instance(&mut rng);
        inst.alpha = 0.0;
        let reference = limit_loss(&inst, 10, 0).unwrap();
        let rows = finite_loss_convergence(&inst, &[1], reference, 1).unwrap();
        assert!(rows[0].gap < 1e-12);
        assert!(finite_loss_convergence(&inst, &[10, 10], reference, 1).is_err());
    }
}
