use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_var<'t, T: Scalar>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Affine layer `y = act(x Wᵀ + b)` with `W` stored `out×in` and `b` as `1×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { weight: Tensor::zeros(outputs, inputs), bias: Tensor::zeros(1, outputs), activation }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(inputs)`, zero bias.
    pub fn random(inputs: usize, outputs: usize, activation: Activation, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = Tensor::from_fn(outputs, inputs, |_, _| T::lit(normal.sample(rng)));
        Self { weight, bias: Tensor::zeros(1, outputs), activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.inputs() {
            return Err(Error::Tensor(format!("layer expects {} inputs, got {}", self.inputs(), x.cols())));
        }
        let mut z = x.matmul(&self.weight.transpose())?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(self.bias.data()) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(z)
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> DenseVars<'t, T> {
        DenseVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
    pub activation: Activation,
}

impl<'t, T: Scalar> DenseVars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let z = x.matmul(self.weight.t()?)?.add_row(self.bias)?;
        self.activation.apply_var(z)
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::invalid(format!(
                    "layer widths do not chain: {} outputs into {} inputs",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> MlpVars<'t, T> {
        MlpVars { layers: self.layers.iter().map(|l| l.on_tape(tape)).collect() }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars<'t, T> {
    pub layers: Vec<DenseVars<'t, T>>,
}

impl<'t, T: Scalar> MlpVars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(h)?;
        }
        Ok(h)
    }

    /// Parameter nodes in the same order as [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Same structure with every parameter replaced by the given nodes.
    pub fn with_vars(&self, vars: &[Var<'t, T>]) -> Self {
        assert_eq!(vars.len(), 2 * self.layers.len());
        let layers = self
            .layers
            .iter()
            .zip(vars.chunks(2))
            .map(|(l, p)| DenseVars { weight: p[0], bias: p[1], activation: l.activation })
            .collect();
        Self { layers }
    }
}
