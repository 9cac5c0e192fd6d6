//! Fully connected layers, nonlinearities and the softmax cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(0, z)`.
    Relu,
    Logistic,
    Linear,
    /// Row-wise softmax; output layer only.
    Softmax,
}

impl Activation {
    fn apply(self, z: &mut Tensor) {
        match self {
            Activation::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Logistic => z
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = logistic(*v)),
            Activation::Linear => {}
            Activation::Softmax => {
                for i in 0..z.rows() {
                    softmax_in_place(z.row_mut(i));
                }
            }
        }
    }

    /// Derivative of the activation at pre-activation `z`, given the
    /// activation value `a = f(z)`. Not defined for softmax.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Logistic => a * (1.0 - a),
            Activation::Linear => 1.0,
            Activation::Softmax => unreachable!("softmax is differentiated through the loss"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Logistic => "logistic",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" | "max-with-zero" => Ok(Activation::Relu),
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            "linear" => Ok(Activation::Linear),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Fully connected layer. `weights[i, j]` connects input `i` to unit `j`,
/// so the incoming weight vector of unit `j` is column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub biases: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, biases: Tensor, activation: Activation) -> Result<Self> {
        let (_, n_out) = weights.dims2()?;
        if biases.len() != n_out || biases.ndim() != 1 {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {} output units",
                biases.shape(),
                n_out
            )));
        }
        if !weights.all_finite() || !biases.all_finite() {
            return Err(Error::Numeric("layer parameters must be finite".into()));
        }
        Ok(DenseLayer {
            weights,
            biases,
            activation,
        })
    }

    pub fn n_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Forward pass of one dense layer: `z = input·W + b`, `a = f(z)`, and when a
/// mask is given `a ∘ mask`, so dropped units output exactly zero.
pub fn dense_forward(
    layer: &DenseLayer,
    input: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (batch, n_in) = input.dims2()?;
    if n_in != layer.n_in() {
        return Err(Error::shape(format!(
            "layer expects {} inputs, got {}",
            layer.n_in(),
            n_in
        )));
    }
    let mut z = input.matmul(&layer.weights)?;
    z.add_row_broadcast(&layer.biases)?;
    let mut a = z.clone();
    layer.activation.apply(&mut a);
    if let Some(mask) = mask {
        if mask.shape() != [batch, layer.n_out()] {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match layer output [{}, {}]",
                mask.shape(),
                batch,
                layer.n_out()
            )));
        }
        check_binary(mask)?;
        a.mul_assign(mask)?;
    }
    Ok((z, a))
}

pub(crate) fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
        Ok(())
    } else {
        Err(Error::arg("dropout masks must contain only 0 and 1"))
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits, `(softmax − onehot) / batch`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, k) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv = 1.0 / batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        loss += log_sum_exp(row) - row[y];
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grad))
}
