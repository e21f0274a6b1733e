//! Plain-text parameter dumps.
//!
//! ```text
//! iada-checkpoint 1
//! layer relu
//! weight 64 2
//! <64·2 values>
//! bias 1 64
//! <64 values>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same float, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;

use super::dense::{Activation, Dense, Mlp};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "iada-checkpoint 1";

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

fn write_tensor<T: Scalar>(out: &mut String, name: &str, t: &Tensor<T>) {
    let _ = writeln!(out, "{name} {} {}", t.rows(), t.cols());
    let line: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

pub fn mlp_to_string<T: Scalar>(mlp: &Mlp<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    for layer in &mlp.layers {
        let _ = writeln!(out, "layer {}", activation_name(layer.activation));
        write_tensor(&mut out, "weight", &layer.weight);
        write_tensor(&mut out, "bias", &layer.bias);
    }
    out
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::invalid(format!("checkpoint line {line}: {}", detail.into()))
}

struct Cursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos].trim();
            self.pos += 1;
            if !line.is_empty() {
                return Some((self.pos, line));
            }
        }
        None
    }

    fn tensor<T: Scalar>(&mut self, expect: &str) -> Result<Tensor<T>> {
        let (ln, head) = self.next().ok_or_else(|| bad(self.pos, format!("unexpected end, expected {expect}")))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [name, r, c] = parts[..] else { return Err(bad(ln, "malformed tensor header")) };
        if name != expect {
            return Err(bad(ln, format!("expected {expect}, found {name}")));
        }
        let rows: usize = r.parse().map_err(|_| bad(ln, "bad row count"))?;
        let cols: usize = c.parse().map_err(|_| bad(ln, "bad column count"))?;
        // An empty tensor has an empty (skipped) value line.
        let values = if rows * cols == 0 {
            Vec::new()
        } else {
            let (ln, body) = self.next().ok_or_else(|| bad(ln + 1, "missing values"))?;
            body.split_whitespace()
                .map(|v| T::from_str_radix(v, 10).map_err(|_| bad(ln, format!("`{v}` is not a number"))))
                .collect::<Result<Vec<T>>>()?
        };
        Tensor::from_vec(rows, cols, values).map_err(|e| bad(ln, e.to_string()))
    }
}

pub fn mlp_from_str<T: Scalar>(text: &str) -> Result<Mlp<T>> {
    let mut cur = Cursor { lines: text.lines().collect(), pos: 0 };
    match cur.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(bad(1, "missing checkpoint header")),
    }
    let mut layers = Vec::new();
    while let Some((ln, line)) = cur.next() {
        let activation = match line.split_whitespace().collect::<Vec<_>>()[..] {
            ["layer", "identity"] => Activation::Identity,
            ["layer", "relu"] => Activation::Relu,
            ["layer", "tanh"] => Activation::Tanh,
            _ => return Err(bad(ln, format!("expected a layer tag, found `{line}`"))),
        };
        let weight = cur.tensor("weight")?;
        let bias = cur.tensor("bias")?;
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(bad(ln, format!("bias {:?} does not match weight {:?}", bias.shape(), weight.shape())));
        }
        layers.push(Dense { weight, bias, activation });
    }
    Mlp::new(layers)
}

pub fn save_mlp<T: Scalar>(mlp: &Mlp<T>, path: &Path) -> Result<()> {
    std::fs::write(path, mlp_to_string(mlp)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_mlp<T: Scalar>(path: &Path) -> Result<Mlp<T>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    mlp_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(vec![
            Dense::<f64>::random(3, 4, Activation::Relu, 1.3, &mut rng),
            Dense::random(4, 1, Activation::Tanh, 0.7, &mut rng),
        ])
        .unwrap();
        let back: Mlp<f64> = mlp_from_str(&mlp_to_string(&mlp)).unwrap();
        assert_eq!(back, mlp);
        for (a, b) in back.tensors().iter().zip(mlp.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(mlp_from_str::<f64>("nope").is_err());
        assert!(mlp_from_str::<f64>("iada-checkpoint 1\nlayer relu\nweight 1 2\n1.0 zz\n").is_err());
        assert!(mlp_from_str::<f64>("iada-checkpoint 1\nlayer relu\nweight 1 2\n1 2\nbias 1 3\n1 2 3\n").is_err());
    }
}
