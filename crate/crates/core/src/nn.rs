//! Layers shared by the source, flow and target networks.

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::init::glorot;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered access to a model's trainable tensors.
pub trait Parameters {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

pub(crate) fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}

/// `x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: glorot(input, output, rng)?,
            bias: Tensor::zeros(1, output),
        })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(input, output),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.weight);
        tape.add_row(xw, self.bias)
    }
}

impl Parameters for Linear {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Perceptron with relu between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<BoundLinear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn glorot(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

impl Parameters for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::parameters_mut).collect()
    }
}

/// Hex SHA-256 over a model's serialized form and an optional upstream
/// fingerprint.
pub fn fingerprint_of<T: Serialize>(model: &T, upstream: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model serializes"));
    h.update(b"\0upstream:");
    h.update(upstream.unwrap_or("").as_bytes());
    hex::encode(h.finalize())
}

/// Read-only wrapper for parameters that must not change after their
/// training phase. Carries the fingerprint of the model it was trained
/// against, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T> {
    inner: T,
    upstream: Option<String>,
    fingerprint: String,
}

impl<T: Serialize> Frozen<T> {
    pub fn freeze(inner: T, upstream: Option<String>) -> Self {
        let fingerprint = fingerprint_of(&inner, upstream.as_deref());
        Frozen {
            inner,
            upstream,
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn upstream(&self) -> Option<&str> {
        self.upstream.as_deref()
    }
}

impl<T> Deref for Frozen<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.inner
    }
}
