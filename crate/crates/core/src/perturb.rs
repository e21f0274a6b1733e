//! The perturbation network `ε = tanh(W₂ relu(W₁ f + b₁) + b₂)`.

use std::path::Path;

use rand::Rng;

use crate::characteristics::NUM_CHARACTERISTICS;
use crate::error::{Error, Result};
use crate::nn::{mlp_from_str, mlp_to_string, Activation, Dense, Mlp, MlpVars, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbNet<T> {
    pub mlp: Mlp<T>,
}

impl<T: Scalar> PerturbNet<T> {
    /// First layer random, second layer zero: the initial output is ε ≡ 0.
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let l1 = Dense::random(inputs, hidden, Activation::Relu, 1.0, rng);
        let l2 = Dense::zeros(hidden, 1, Activation::Tanh);
        Self { mlp: Mlp::new(vec![l1, l2]).expect("two chained layers") }
    }

    pub fn with_default_shape(rng: &mut impl Rng) -> Self {
        Self::new(NUM_CHARACTERISTICS, DEFAULT_HIDDEN, rng)
    }

    pub fn from_mlp(mlp: Mlp<T>) -> Result<Self> {
        let ok = mlp.layers.len() == 2
            && mlp.layers[0].activation == Activation::Relu
            && mlp.layers[1].activation == Activation::Tanh
            && mlp.layers[1].outputs() == 1;
        if !ok {
            return Err(Error::invalid("perturbation network must be relu then a single tanh output"));
        }
        Ok(Self { mlp })
    }

    pub fn inputs(&self) -> usize {
        self.mlp.layers[0].inputs()
    }

    /// ε per sample.
    pub fn eps_forward(&self, f: &Tensor<T>) -> Result<Vec<T>> {
        if f.cols() != self.inputs() {
            return Err(Error::invalid(format!("{} characteristics, network expects {}", f.cols(), self.inputs())));
        }
        // tanh rounds to ±1 once |x| passes ~19 in f64; keep the output open.
        let below_one = T::one() - T::epsilon();
        Ok(self.mlp.forward(f)?.into_vec().into_iter().map(|e| e.max(-below_one).min(below_one)).collect())
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> MlpVars<'t, T> {
        self.mlp.on_tape(tape)
    }

    /// `n×1` ε node.
    pub fn eps_var<'t>(vars: &MlpVars<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        vars.forward(f)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.mlp.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.mlp.tensors_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.mlp.is_finite()
    }

    pub fn to_checkpoint_string(&self) -> String {
        mlp_to_string(&self.mlp)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        Self::from_mlp(mlp_from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_checkpoint_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PerturbNet::<f64>::with_default_shape(&mut rng);
        let f = Tensor::from_fn(5, 15, |i, j| (i + j) as f64 - 7.0);
        assert_eq!(net.eps_forward(&f).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn saturation_stays_inside_the_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PerturbNet::<f64>::new(2, 3, &mut rng);
        net.mlp.layers[1].bias = Tensor::scalar(1e6);
        let e = net.eps_forward(&Tensor::zeros(1, 2)).unwrap()[0];
        assert!(e < 1.0 && e > 0.99);
        net.mlp.layers[1].bias = Tensor::scalar(-1e6);
        let e = net.eps_forward(&Tensor::zeros(1, 2)).unwrap()[0];
        assert!(e > -1.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = PerturbNet::<f64>::new(15, 7, &mut rng);
        net.mlp.layers[1].weight = Tensor::from_fn(1, 7, |_, j| j as f64 * 0.1);
        let back = PerturbNet::<f64>::from_checkpoint_str(&net.to_checkpoint_string()).unwrap();
        assert_eq!(back, net);
        assert!(PerturbNet::<f64>::from_mlp(Mlp::new(vec![]).unwrap()).is_err());
    }
}
