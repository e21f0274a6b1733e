//! Bilevel training loop.
//!
//! After `T₁` warm-up iterations of plain cross-entropy, every iteration
//! samples one training batch and one metadata batch and runs, in order:
//!
//! 1. a pseudo-step `Φ̄ = Φ − η₁ ∇_Φ ℓ^IADA(Φ; Σ, ε(f, Ω))`, recorded on a
//!    tape so that `Φ̄` remains a function of `Ω` and `Σ`;
//! 2. an Adam step on `Ω` along `∇_Ω ℓ^CE(meta; Φ̄)`;
//! 3. a gradient step on every `Σ_c` along `∇_Σ ℓ^CE(meta; Φ̄)`, projected
//!    back onto the PSD cone;
//! 4. the real momentum-SGD update of `Φ` with the refreshed `ε` and `Σ`.
//!
//! Characteristics `f` are computed once per iteration from the pre-step
//! classifier and held fixed through all four steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::characteristics::{self, History, Instantaneous, Normalizer, SampleView, NUM_CHARACTERISTICS};
use crate::class_stats::{project_psd, ClassStats, CovarianceMode};
use crate::classifier::{softmax_rows, ClassifierParams, FeatureBatch};
use crate::data::{Dataset, MetaDataset};
use crate::error::{Error, Result};
use crate::loss::{iada_loss_var, regularizer_terms, rho_matrix, IadaVars, LossConfig};
use crate::metrics::{evaluate, EpochMetrics, MetricsLog, Phase};
use crate::nn::{Adam, Sgd, Tape, Tensor};
use crate::perturb::PerturbNet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// `T₁`; `None` means 30% of `total_iters`.
    pub warmup_iters: Option<usize>,
    /// `T₂`.
    pub total_iters: usize,
    pub batch_size: usize,
    pub meta_batch_size: usize,
    /// `η₁`.
    pub lr: f64,
    /// `η₂`, used by Adam on `Ω` and by the plain step on `Σ`.
    pub meta_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `T₂` at which `lr` is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub differentiate_rho_weights: bool,
    /// When false `ε ≡ 0` (no δ, and `Ω` is never updated).
    pub learn_eps: bool,
    pub update_omega: bool,
    pub update_sigma: bool,
    pub covariance: CovarianceMode,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub perturb_hidden: usize,
    pub history_decay: f64,
    pub seed: u64,
    /// Rescale classifier gradients whose global norm exceeds this before
    /// the real (not pseudo) steps.
    pub grad_clip: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            warmup_iters: None,
            total_iters: 1000,
            batch_size: 64,
            meta_batch_size: 32,
            lr: 0.05,
            meta_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.8, 0.9],
            lr_decay: 0.01,
            alpha: 0.5,
            beta: 1.0,
            differentiate_rho_weights: true,
            learn_eps: true,
            update_omega: true,
            update_sigma: true,
            covariance: CovarianceMode::Full,
            hidden: vec![64, 64],
            feature_dim: 16,
            perturb_hidden: crate::perturb::DEFAULT_HIDDEN,
            history_decay: characteristics::DEFAULT_DECAY,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainerConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_iters.unwrap_or((self.total_iters as f64 * 0.3).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        if self.warmup() > self.total_iters {
            return bad(format!("warmup_iters {} exceeds total_iters {}", self.warmup(), self.total_iters));
        }
        if self.batch_size == 0 || self.meta_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("meta_lr", self.meta_lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay), ("lr_decay", self.lr_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones are fractions of total_iters in [0, 1]".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(0.0..1.0).contains(&self.history_decay) {
            return bad("history_decay must lie in [0, 1)".into());
        }
        if self.feature_dim == 0 || self.perturb_hidden == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn loss_config<T: Scalar>(&self) -> LossConfig<T> {
        LossConfig { alpha: T::lit(self.alpha), beta: T::lit(self.beta), differentiate_rho_weights: self.differentiate_rho_weights }
    }

    /// `η₁` after the milestones passed by iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| t as f64 >= m * self.total_iters as f64).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Constants of one meta iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    /// `sign(gᵢ)` of the detached CE feature gradient, `n×H`.
    pub sign_g: Tensor<T>,
    /// Normalised characteristics, `n×15`.
    pub characteristics: Tensor<T>,
    pub meta_x: Tensor<T>,
    pub meta_labels: Vec<usize>,
}

/// Everything the pseudo-step and its hypergradients depend on.
#[derive(Debug, Clone, Copy)]
pub struct MetaContext<'a, T> {
    pub classifier: &'a ClassifierParams<T>,
    pub perturb: &'a PerturbNet<T>,
    pub sigmas: &'a [Tensor<T>],
    pub priors: &'a [T],
    pub loss: LossConfig<T>,
    pub lr: T,
    pub learn_eps: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradients<T> {
    pub meta_loss: T,
    /// In [`PerturbNet::tensors`] order.
    pub omega: Vec<Tensor<T>>,
    /// One per class, shaped like the covariances.
    pub sigma: Vec<Tensor<T>>,
    /// `Φ̄` in [`ClassifierParams::tensors`] order.
    pub pseudo_params: Vec<Tensor<T>>,
}

impl<T: Scalar> Hypergradients<T> {
    pub fn is_finite(&self) -> bool {
        self.meta_loss.is_finite() && self.omega.iter().chain(&self.sigma).all(Tensor::is_finite)
    }
}

impl<T: Scalar> MetaContext<'_, T> {
    /// Records the pseudo-step and the metadata loss at `Φ̄`. Returns
    /// `(Ω leaves, Σ leaves, Φ̄ nodes, meta loss)`.
    #[allow(clippy::type_complexity)]
    fn record<'t>(
        &self,
        tape: &'t Tape<T>,
        inputs: &StepInputs<T>,
    ) -> Result<(Vec<crate::nn::Var<'t, T>>, Vec<crate::nn::Var<'t, T>>, Vec<crate::nn::Var<'t, T>>, crate::nn::Var<'t, T>)> {
        let cv = self.classifier.on_tape(tape);
        let ov = self.perturb.on_tape(tape);
        let sv: Vec<_> = self.sigmas.iter().map(|s| tape.leaf(s.clone())).collect();
        let delta = if self.learn_eps {
            let eps = ov.forward(tape.constant(inputs.characteristics.clone()))?;
            Some(tape.constant(inputs.sign_g.clone()).mul_col(eps)?)
        } else {
            None
        };
        let h = cv.features(tape.constant(inputs.x.clone()))?;
        let vars = IadaVars { h, w: cv.weight(), b: cv.bias(), delta, sigmas: &sv, labels: &inputs.labels, priors: self.priors };
        let loss = iada_loss_var(&vars, &self.loss)?;
        let phi = cv.vars();
        let grads = tape.grad(loss, &phi, None)?;
        let phi_bar = phi
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| p.sub(g.scale(self.lr)?))
            .collect::<Result<Vec<_>>>()?;
        let pseudo = cv.with_vars(&phi_bar);
        let meta_z = pseudo.logits(pseudo.features(tape.constant(inputs.meta_x.clone()))?)?;
        let meta_loss = meta_z.softmax_cross_entropy(&inputs.meta_labels)?;
        Ok((ov.vars(), sv, phi_bar, meta_loss))
    }

    /// `Φ̄` values.
    pub fn pseudo_step(&self, inputs: &StepInputs<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let (_, _, phi_bar, _) = self.record(&tape, inputs)?;
        Ok(phi_bar.iter().map(|v| v.value()).collect())
    }

    /// Metadata CE at `Φ̄`.
    pub fn meta_objective(&self, inputs: &StepInputs<T>) -> Result<T> {
        let tape = Tape::new();
        Ok(self.record(&tape, inputs)?.3.item())
    }

    pub fn hypergradients(&self, inputs: &StepInputs<T>) -> Result<Hypergradients<T>> {
        let tape = Tape::new();
        let (omega, sigma, phi_bar, meta_loss) = self.record(&tape, inputs)?;
        let wrt: Vec<_> = omega.iter().chain(&sigma).copied().collect();
        let g = tape.grad(meta_loss, &wrt, None)?;
        let (go, gs) = g.split_at(omega.len());
        Ok(Hypergradients {
            meta_loss: meta_loss.item(),
            omega: go.iter().map(|v| v.value()).collect(),
            sigma: gs.iter().map(|v| v.value()).collect(),
            pseudo_params: phi_bar.iter().map(|v| v.value()).collect(),
        })
    }
}

/// Loss and parameter gradients of the IADA objective at fixed `δ` and `Σ`.
fn iada_gradients<T: Scalar>(
    classifier: &ClassifierParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: Option<&Tensor<T>>,
    sigmas: &[Tensor<T>],
    priors: &[T],
    cfg: &LossConfig<T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let cv = classifier.on_tape(&tape);
    let sv: Vec<_> = sigmas.iter().map(|s| tape.constant(s.clone())).collect();
    let h = cv.features(tape.constant(x.clone()))?;
    let delta = delta.map(|d| tape.constant(d.clone()));
    let vars = IadaVars { h, w: cv.weight(), b: cv.bias(), delta, sigmas: &sv, labels, priors };
    let loss = iada_loss_var(&vars, cfg)?;
    let grads = tape.grad(loss, &cv.vars(), None)?;
    Ok((loss.item(), grads.iter().map(|g| g.value()).collect()))
}

/// Scales all gradients by `min(1, limit / ‖g‖)`.
pub fn clip_global_norm<T: Scalar>(grads: &[Tensor<T>], limit: T) -> Vec<Tensor<T>> {
    let norm = grads.iter().flat_map(|g| g.data().iter()).fold(T::zero(), |s, &v| s + v * v).sqrt();
    if norm > limit {
        grads.iter().map(|g| g.scale(limit / norm)).collect()
    } else {
        grads.to_vec()
    }
}

/// Running sums for the current epoch's metrics row.
#[derive(Debug, Clone, Default)]
struct EpochAccumulator {
    iterations: usize,
    meta_iterations: usize,
    loss_sum: f64,
    eps_sum: Vec<f64>,
    eps_count: Vec<usize>,
    adv_count: Vec<usize>,
    noisy: (f64, usize),
    clean: (f64, usize),
    reg: [f64; 3],
    reg_samples: usize,
    skipped: usize,
}

impl EpochAccumulator {
    fn new(num_classes: usize) -> Self {
        Self { eps_sum: vec![0.0; num_classes], eps_count: vec![0; num_classes], adv_count: vec![0; num_classes], ..Self::default() }
    }
}

/// What one meta iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<T> {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: T,
    /// ε used in the final step (empty during warm-up).
    pub eps: Vec<T>,
    pub meta_loss: Option<T>,
    pub skipped_meta_update: bool,
}

/// Batch inputs, labels, forward pass and normalised characteristics.
type Observed<T> = (Tensor<T>, Vec<usize>, FeatureBatch<T>, Tensor<T>);

#[derive(Debug, Clone)]
pub struct MetaTrainer<T> {
    cfg: TrainerConfig,
    loss: LossConfig<T>,
    classifier: ClassifierParams<T>,
    perturb: PerturbNet<T>,
    stats: ClassStats<T>,
    history: History<T>,
    normalizer: Normalizer<T>,
    sgd: Sgd<T>,
    adam: Adam<T>,
    x: Tensor<T>,
    labels: Vec<usize>,
    noise_mask: Option<Vec<bool>>,
    meta_x: Tensor<T>,
    meta_labels: Vec<usize>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    meta_order: Vec<usize>,
    meta_cursor: usize,
    t: usize,
    acc: EpochAccumulator,
}

impl<T: Scalar> MetaTrainer<T> {
    pub fn new(cfg: TrainerConfig, train: &Dataset, meta: &MetaDataset) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let classifier = ClassifierParams::random(train.dim(), &cfg.hidden, cfg.feature_dim, train.num_classes, &mut init);
        let perturb = PerturbNet::new(NUM_CHARACTERISTICS, cfg.perturb_hidden, &mut init);
        Self::with_models(cfg, train, meta, classifier, perturb)
    }

    pub fn with_models(
        cfg: TrainerConfig,
        train: &Dataset,
        meta: &MetaDataset,
        classifier: ClassifierParams<T>,
        perturb: PerturbNet<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || meta.is_empty() {
            return Err(Error::invalid("training and metadata sets must be non-empty"));
        }
        if meta.num_classes != train.num_classes || meta.features.cols() != train.dim() {
            return Err(Error::invalid("metadata does not match the training set's classes or width"));
        }
        if classifier.input_dim() != train.dim() || classifier.num_classes() != train.num_classes {
            return Err(Error::invalid("classifier does not match the training set"));
        }
        if perturb.inputs() != NUM_CHARACTERISTICS {
            return Err(Error::invalid("perturbation network must take the 15 characteristics"));
        }
        let stats = ClassStats::from_counts(&train.class_counts(), classifier.feature_dim(), cfg.covariance)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C_u64);
        let loss = cfg.loss_config();
        Ok(Self {
            loss,
            sgd: Sgd::new(T::lit(cfg.momentum), T::lit(cfg.weight_decay)),
            adam: Adam::new(T::lit(cfg.meta_lr)),
            history: History::new(train.len(), T::lit(cfg.history_decay)),
            normalizer: Normalizer::new(NUM_CHARACTERISTICS, T::lit(cfg.history_decay)),
            x: train.features.cast(),
            labels: train.labels.clone(),
            noise_mask: train.noise_mask.clone(),
            meta_x: meta.features.cast(),
            meta_labels: meta.labels.clone(),
            rng,
            order: (0..train.len()).collect(),
            cursor: 0,
            meta_order: (0..meta.len()).collect(),
            meta_cursor: 0,
            t: 0,
            acc: EpochAccumulator::new(train.num_classes),
            cfg,
            classifier,
            perturb,
            stats,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn classifier(&self) -> &ClassifierParams<T> {
        &self.classifier
    }

    pub fn perturb(&self) -> &PerturbNet<T> {
        &self.perturb
    }

    pub fn stats(&self) -> &ClassStats<T> {
        &self.stats
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.cfg.batch_size)
    }

    pub fn current_lr(&self) -> T {
        T::lit(self.cfg.lr_at(self.t))
    }

    pub fn in_warmup(&self) -> bool {
        self.t < self.cfg.warmup()
    }

    pub fn context(&self) -> MetaContext<'_, T> {
        MetaContext {
            classifier: &self.classifier,
            perturb: &self.perturb,
            sigmas: self.stats.covariances(),
            priors: self.stats.priors(),
            loss: self.loss,
            lr: self.current_lr(),
            learn_eps: self.cfg.learn_eps,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = if end == self.order.len() { 0 } else { end };
        idx
    }

    fn next_meta_batch(&mut self) -> Vec<usize> {
        let m = self.meta_order.len();
        let mut idx = Vec::with_capacity(self.cfg.meta_batch_size.min(m));
        while idx.len() < self.cfg.meta_batch_size.min(m) {
            if self.meta_cursor == 0 {
                self.meta_order.shuffle(&mut self.rng);
            }
            idx.push(self.meta_order[self.meta_cursor]);
            self.meta_cursor = (self.meta_cursor + 1) % m;
        }
        idx
    }

    /// Forward pass at `Φᵗ`; folds the batch into the class statistics and
    /// the history and returns the normalised characteristics.
    fn observe(&mut self, ids: &[usize]) -> Result<Observed<T>> {
        let x = self.x.select_rows(ids);
        let labels: Vec<usize> = ids.iter().map(|&i| self.labels[i]).collect();
        let fb = self.classifier.feature_batch(&x, &labels)?;
        if !fb.logits.is_finite() {
            return Err(Error::NonFinite(format!("iteration {}: non-finite logits", self.t)));
        }
        self.stats.update_covariance(&fb.h, &labels)?;
        let inst: Instantaneous<T> = characteristics::instantaneous(&fb.logits, &labels)?;
        self.history.update(ids, &inst)?;
        let progress = T::from_usize_lossy(self.t) / T::from_usize_lossy(self.cfg.total_iters);
        let view = SampleView { ids, labels: &labels, logits: &fb.logits, h: &fb.h, grad_h: &fb.grad_h, progress };
        let raw = characteristics::extract(&view, &self.history, &self.stats)?;
        let f = self.normalizer.apply(&raw);
        Ok((x, labels, fb, f))
    }

    /// Plain CE step on `Φ`.
    pub fn warmup_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let plain = LossConfig { alpha: T::zero(), beta: T::zero(), differentiate_rho_weights: false };
        let (loss, grads) = iada_gradients(&self.classifier, x, labels, None, &[], &vec![T::one(); self.classifier.num_classes()], &plain)?;
        self.apply_classifier_step(loss, &grads)?;
        Ok(loss)
    }

    fn apply_classifier_step(&mut self, loss: T, grads: &[Tensor<T>]) -> Result<()> {
        if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!("iteration {}: training loss {loss} or its gradient is not finite", self.t)));
        }
        let lr = self.current_lr();
        let clipped;
        let grads = match self.cfg.grad_clip {
            Some(limit) => {
                clipped = clip_global_norm(grads, T::lit(limit));
                &clipped[..]
            }
            None => grads,
        };
        self.sgd.step(self.classifier.tensors_mut(), grads, lr);
        if !self.classifier.is_finite() {
            return Err(Error::NonFinite(format!("iteration {}: classifier parameters diverged", self.t)));
        }
        Ok(())
    }

    /// `Φ̄` for the given batch.
    pub fn pseudo_step(&self, inputs: &StepInputs<T>) -> Result<Vec<Tensor<T>>> {
        self.context().pseudo_step(inputs)
    }

    pub fn meta_update_omega(&mut self, hyper: &Hypergradients<T>) {
        if self.cfg.learn_eps && self.cfg.update_omega {
            self.adam.step(self.perturb.tensors_mut(), &hyper.omega);
        }
    }

    /// Returns how many class covariances had to keep their old value.
    pub fn meta_update_sigma(&mut self, hyper: &Hypergradients<T>) -> usize {
        if !self.cfg.update_sigma || self.cfg.alpha == 0.0 {
            return 0;
        }
        let step = T::lit(self.cfg.meta_lr);
        let mut failed = 0;
        for (c, g) in hyper.sigma.iter().enumerate() {
            let moved = self.stats.covariance(c).sub(&g.scale(step));
            match project_psd(&moved).and_then(|s| self.stats.set_covariance(c, s)) {
                Ok(()) => {}
                Err(_) => failed += 1,
            }
        }
        failed
    }

    /// Real update of `Φ` with the current `Ω` and `Σ`. Returns the loss and ε.
    pub fn final_step(&mut self, inputs: &StepInputs<T>) -> Result<(T, Vec<T>)> {
        let n = inputs.labels.len();
        let eps = if self.cfg.learn_eps { self.perturb.eps_forward(&inputs.characteristics)? } else { vec![T::zero(); n] };
        let delta = self.cfg.learn_eps.then(|| Tensor::from_fn(n, inputs.sign_g.cols(), |i, j| eps[i] * inputs.sign_g.get(i, j)));
        let (loss, grads) = iada_gradients(
            &self.classifier,
            &inputs.x,
            &inputs.labels,
            delta.as_ref(),
            self.stats.covariances(),
            self.stats.priors(),
            &self.loss,
        )?;
        self.apply_classifier_step(loss, &grads)?;
        Ok((loss, eps))
    }

    /// One iteration (warm-up or meta) on the next batch.
    pub fn step(&mut self) -> Result<StepReport<T>> {
        let ids = self.next_batch();
        let (x, labels, fb, f) = self.observe(&ids)?;
        let report = if self.in_warmup() {
            let loss = self.warmup_step(&x, &labels)?;
            StepReport { iteration: self.t, phase: Phase::Warmup, loss, eps: vec![], meta_loss: None, skipped_meta_update: false }
        } else {
            let meta_ids = self.next_meta_batch();
            let inputs = StepInputs {
                sign_g: fb.grad_h.map(T::sign0),
                x,
                labels,
                characteristics: f,
                meta_x: self.meta_x.select_rows(&meta_ids),
                meta_labels: meta_ids.iter().map(|&i| self.meta_labels[i]).collect(),
            };
            let hyper = self.context().hypergradients(&inputs)?;
            let skipped = !hyper.is_finite();
            if !skipped {
                self.meta_update_omega(&hyper);
                self.acc.skipped += self.meta_update_sigma(&hyper);
            } else {
                self.acc.skipped += 1;
            }
            let (loss, eps) = self.final_step(&inputs)?;
            self.record_meta(&ids, &inputs, &fb, &eps)?;
            StepReport { iteration: self.t, phase: Phase::Meta, loss, eps, meta_loss: Some(hyper.meta_loss), skipped_meta_update: skipped }
        };
        self.acc.iterations += 1;
        self.acc.loss_sum += report.loss.as_f64();
        self.t += 1;
        Ok(report)
    }

    fn record_meta(&mut self, ids: &[usize], inputs: &StepInputs<T>, fb: &FeatureBatch<T>, eps: &[T]) -> Result<()> {
        let acc = &mut self.acc;
        acc.meta_iterations += 1;
        for (k, (&id, &y)) in ids.iter().zip(&inputs.labels).enumerate() {
            let e = eps[k].as_f64();
            acc.eps_sum[y] += e;
            acc.eps_count[y] += 1;
            acc.adv_count[y] += (e > 0.0) as usize;
            if let Some(mask) = &self.noise_mask {
                let slot = if mask[id] { &mut acc.noisy } else { &mut acc.clean };
                slot.0 += e;
                slot.1 += 1;
            }
        }
        let w = &self.classifier.head.weight;
        let q = softmax_rows(&fb.logits);
        let rho = rho_matrix(w, self.stats.covariances(), &inputs.labels)?;
        let delta = Tensor::from_fn(eps.len(), inputs.sign_g.cols(), |i, j| eps[i] * inputs.sign_g.get(i, j));
        let rep = regularizer_terms(&q, &rho, w, Some(&delta), self.stats.priors(), &inputs.labels)?;
        acc.reg[0] += self.cfg.alpha * rep.g.as_f64();
        acc.reg[1] += rep.r.as_f64();
        acc.reg[2] += self.cfg.beta * rep.f.as_f64();
        acc.reg_samples += eps.len();
        Ok(())
    }

    /// Closes the current epoch's metrics row.
    fn finish_epoch(&mut self, epoch: usize, eval: Option<&Dataset>) -> Result<EpochMetrics> {
        let c = self.classifier.num_classes();
        let acc = std::mem::replace(&mut self.acc, EpochAccumulator::new(c));
        let div = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let meta = acc.meta_iterations > 0;
        let total_eps: f64 = acc.eps_sum.iter().sum();
        let total_n: usize = acc.eps_count.iter().sum();
        Ok(EpochMetrics {
            epoch,
            iteration: self.t,
            phase: if meta { Phase::Meta } else { Phase::Warmup },
            lr: self.cfg.lr_at(self.t.saturating_sub(1)),
            train_loss: acc.loss_sum / acc.iterations.max(1) as f64,
            test: eval.map(|d| evaluate(&self.classifier, d)).transpose()?,
            eps_mean: div(total_eps, total_n),
            eps_mean_per_class: (0..c).map(|k| div(acc.eps_sum[k], acc.eps_count[k])).collect(),
            adversarial_ratio_per_class: (0..c).map(|k| div(acc.adv_count[k] as f64, acc.eps_count[k])).collect(),
            noisy_eps_mean: div(acc.noisy.0, acc.noisy.1),
            clean_eps_mean: div(acc.clean.0, acc.clean.1),
            reg_g: div(acc.reg[0], acc.reg_samples),
            reg_r: div(acc.reg[1], acc.reg_samples),
            reg_f: div(acc.reg[2], acc.reg_samples),
            skipped_meta_updates: acc.skipped,
        })
    }

    /// Runs all `T₂` iterations, one metrics row per epoch.
    pub fn run(&mut self, eval: Option<&Dataset>) -> Result<MetricsLog> {
        let groups = eval.and_then(Dataset::num_groups).unwrap_or(0);
        let mut log = MetricsLog::new(self.classifier.num_classes(), groups);
        let per_epoch = self.iterations_per_epoch();
        let mut epoch = 0;
        while self.t < self.cfg.total_iters {
            self.step()?;
            if self.t.is_multiple_of(per_epoch) || self.t == self.cfg.total_iters {
                log.push(self.finish_epoch(epoch, eval)?);
                epoch += 1;
            }
        }
        Ok(log)
    }

    pub fn into_classifier(self) -> ClassifierParams<T> {
        self.classifier
    }
}

/// Trains from scratch and returns the classifier with its metrics.
pub fn train<T: Scalar>(
    cfg: &TrainerConfig,
    dataset: &Dataset,
    metadata: &MetaDataset,
    eval: Option<&Dataset>,
) -> Result<(ClassifierParams<T>, MetricsLog)> {
    let mut trainer = MetaTrainer::<T>::new(cfg.clone(), dataset, metadata)?;
    let log = trainer.run(eval)?;
    Ok((trainer.into_classifier(), log))
}
