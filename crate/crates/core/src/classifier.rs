//! The classifier: an MLP feature extractor `h = F(x)` followed by a linear
//! head `z = W h + b`.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{mlp_from_str, mlp_to_string, Activation, Dense, DenseVars, Mlp, MlpVars, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub extractor: Mlp<T>,
    /// `C×H` weight and `1×C` bias; identity activation.
    pub head: Dense<T>,
}

/// Features, labels and the detached per-sample CE gradient w.r.t. `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    pub h: Tensor<T>,
    pub logits: Tensor<T>,
    pub labels: Vec<usize>,
    pub grad_h: Tensor<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn new(extractor: Mlp<T>, head: Dense<T>) -> Result<Self> {
        if head.activation != Activation::Identity {
            return Err(Error::invalid("classifier head must be linear"));
        }
        if let Some(last) = extractor.layers.last() {
            if last.outputs() != head.inputs() {
                return Err(Error::invalid(format!(
                    "extractor emits {} features but the head expects {}",
                    last.outputs(),
                    head.inputs()
                )));
            }
        }
        Ok(Self { extractor, head })
    }

    /// ReLU extractor `input → hidden… → feature_dim` and a linear head, He
    /// initialised. An empty `hidden` with `feature_dim == input` still adds
    /// one ReLU layer; use [`ClassifierParams::new`] for a bare linear model.
    pub fn random(input: usize, hidden: &[usize], feature_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let layers = widths
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], Activation::Relu, 2f64.sqrt(), rng))
            .collect();
        let extractor = Mlp::new(layers).expect("widths chain by construction");
        let head = Dense::random(feature_dim, num_classes, Activation::Identity, 1.0, rng);
        Self { extractor, head }
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.layers.first().map_or(self.head.inputs(), Dense::inputs)
    }

    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!("input has {} columns, model expects {}", x.cols(), self.input_dim())));
        }
        self.extractor.forward(x)
    }

    pub fn logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.forward(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(&self.extract_features(x)?)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.forward(x)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    pub fn feature_batch(&self, x: &Tensor<T>, labels: &[usize]) -> Result<FeatureBatch<T>> {
        let h = self.extract_features(x)?;
        let logits = self.logits(&h)?;
        let grad_h = ce_grad_from_logits(&self.head.weight, &logits, labels)?;
        Ok(FeatureBatch { h, logits, labels: labels.to_vec(), grad_h })
    }

    /// Extractor tensors followed by `W`, `b`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut t = self.extractor.tensors();
        t.push(&self.head.weight);
        t.push(&self.head.bias);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut t = self.extractor.tensors_mut();
        t.push(&mut self.head.weight);
        t.push(&mut self.head.bias);
        t
    }

    /// Copy with every tensor replaced, in [`ClassifierParams::tensors`] order.
    pub fn with_tensors(&self, values: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        if values.len() != out.tensors().len() {
            return Err(Error::invalid("wrong number of parameter tensors"));
        }
        for (slot, v) in out.tensors_mut().into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::invalid(format!("parameter {:?} replaced by {:?}", slot.shape(), v.shape())));
            }
            *slot = v;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.is_finite() && self.head.weight.is_finite() && self.head.bias.is_finite()
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> ClassifierVars<'t, T> {
        ClassifierVars { extractor: self.extractor.on_tape(tape), head: self.head.on_tape(tape) }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut layers = self.extractor.layers.clone();
        layers.push(self.head.clone());
        mlp_to_string(&Mlp { layers })
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut mlp = mlp_from_str::<T>(text)?;
        let head = mlp.layers.pop().ok_or_else(|| Error::invalid("checkpoint has no layers"))?;
        Self::new(mlp, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_checkpoint_str(&text)
    }
}

/// Classifier parameters recorded as tape leaves (or arbitrary nodes, e.g.
/// the result of a gradient step).
#[derive(Debug, Clone)]
pub struct ClassifierVars<'t, T> {
    pub extractor: MlpVars<'t, T>,
    pub head: DenseVars<'t, T>,
}

impl<'t, T: Scalar> ClassifierVars<'t, T> {
    pub fn features(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.extractor.forward(x)
    }

    pub fn logits(&self, h: Var<'t, T>) -> Result<Var<'t, T>> {
        self.head.forward(h)
    }

    pub fn weight(&self) -> Var<'t, T> {
        self.head.weight
    }

    pub fn bias(&self) -> Var<'t, T> {
        self.head.bias
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        let mut v = self.extractor.vars();
        v.push(self.head.weight);
        v.push(self.head.bias);
        v
    }

    pub fn with_vars(&self, vars: &[Var<'t, T>]) -> Self {
        let k = vars.len() - 2;
        Self {
            extractor: self.extractor.with_vars(&vars[..k]),
            head: DenseVars { weight: vars[k], bias: vars[k + 1], activation: Activation::Identity },
        }
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise softmax through the max-shift.
pub fn softmax_rows<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `−log softmax(z)[y]` per row.
pub fn cross_entropy_per_sample<T: Scalar>(z: &Tensor<T>, labels: &[usize]) -> Vec<T> {
    (0..z.rows()).map(|i| crate::nn::log_sum_exp(z.row(i)) - z.get(i, labels[i])).collect()
}

pub fn cross_entropy<T: Scalar>(z: &Tensor<T>, labels: &[usize]) -> T {
    let l = cross_entropy_per_sample(z, labels);
    l.iter().copied().sum::<T>() / T::from_usize_lossy(l.len().max(1))
}

/// `gᵢ = Wᵀ(qᵢ − onehot(yᵢ))`, the gradient of the per-sample CE loss with
/// respect to `hᵢ` for a linear head.
pub fn ce_grad_wrt_features<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, h: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let head = Dense { weight: w.clone(), bias: b.clone(), activation: Activation::Identity };
    ce_grad_from_logits(w, &head.forward(h)?, labels)
}

fn ce_grad_from_logits<T: Scalar>(w: &Tensor<T>, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut r = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        let v = r.get(i, y) - T::one();
        r.set(i, y, v);
    }
    r.matmul(w)
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_depth_extractor_is_identity() {
        let head = Dense::<f64>::zeros(3, 2, Activation::Identity);
        let p = ClassifierParams::new(Mlp::new(vec![]).unwrap(), head).unwrap();
        let x = Tensor::from_fn(4, 3, |i, j| (i as f64) - 0.5 * j as f64);
        assert_eq!(p.extract_features(&x).unwrap(), x);
        assert_eq!(p.input_dim(), 3);
    }

    #[test]
    fn zero_weights_give_bias_pattern() {
        let mut layer = Dense::<f64>::zeros(2, 3, Activation::Relu);
        layer.bias = Tensor::row_vector(&[0.5, -1.0, 2.0]);
        let p = ClassifierParams::new(Mlp::new(vec![layer]).unwrap(), Dense::zeros(3, 2, Activation::Identity)).unwrap();
        let x = Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let h = p.extract_features(&x).unwrap();
        for i in 0..3 {
            assert_eq!(h.row(i), &[0.5, 0.0, 2.0]);
        }
    }

    #[test]
    fn logits_cases() {
        let mut head = Dense::<f64>::zeros(3, 3, Activation::Identity);
        head.bias = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        let p = ClassifierParams::new(Mlp::new(vec![]).unwrap(), head).unwrap();
        assert_eq!(p.logits(&Tensor::zeros(1, 3)).unwrap().data(), &[1.0, 2.0, 3.0]);

        let head = Dense { weight: Tensor::identity(3), bias: Tensor::zeros(1, 3), activation: Activation::Identity };
        let p = ClassifierParams::new(Mlp::new(vec![]).unwrap(), head).unwrap();
        let e1 = Tensor::row_vector(&[0.0, 1.0, 0.0]);
        assert_eq!(p.logits(&e1).unwrap(), e1);
    }

    #[test]
    fn hand_gradient_two_classes() {
        let w = Tensor::<f64>::col_vector(&[1.0, -1.0]);
        let g = ce_grad_wrt_features(&w, &Tensor::zeros(1, 2), &Tensor::zeros(1, 1), &[0]).unwrap();
        assert!((g.item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_one_hot() {
        // Huge margin: q is one-hot to machine precision.
        let w = Tensor::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let g = ce_grad_wrt_features(&w, &Tensor::zeros(1, 2), &Tensor::scalar(400.0), &[0]).unwrap();
        assert_eq!(g.item(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::<f64>::from_fn(20, 7, |_, _| rng.random_range(-30.0..30.0));
        let q = softmax_rows(&z);
        for i in 0..20 {
            assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ClassifierParams::<f64>::random(4, &[8, 8], 5, 3, &mut rng);
        let back = ClassifierParams::<f64>::from_checkpoint_str(&p.to_checkpoint_string()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        p.save(&path).unwrap();
        assert_eq!(ClassifierParams::<f64>::load(&path).unwrap(), p);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ClassifierParams::<f64>::random(4, &[6], 5, 3, &mut rng);
        assert!(p.extract_features(&Tensor::zeros(2, 3)).is_err());
        assert!(p.feature_batch(&Tensor::zeros(2, 4), &[0, 3]).is_err());
        assert!(ClassifierParams::new(p.extractor.clone(), Dense::zeros(4, 3, Activation::Identity)).is_err());
    }
}
