//! Dense feedforward network with hand-written reverse mode.
//!
//! Weights are stored `in x out`, so a layer computes `W^T x + bias` and the
//! weight gradient for one instance is `x delta^T`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bregman::{logistic, softplus};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(rename = "sigmoid")]
    Logistic,
    Identity,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Logistic => logistic(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Logistic => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        check_dim("layer bias length", weights.ncols(), bias.len())?;
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite layer parameter".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Uniform in `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weights: DMatrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-r..=r)),
            bias: DVector::zeros(fan_out),
            activation,
        }
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.weights.tr_mul(x) + &self.bias;
        out.apply(|v| *v = self.activation.apply(*v));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward`]: entry 0 is the input and entry
/// `i + 1` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    activations: Vec<DVector<f64>>,
}

impl Tape {
    pub fn input(&self) -> &DVector<f64> {
        &self.activations[0]
    }

    /// Output of layer `index` (0-based).
    pub fn layer_output(&self, index: usize) -> Option<&DVector<f64>> {
        self.activations.get(index + 1)
    }

    pub fn output(&self) -> &DVector<f64> {
        self.activations.last().expect("tape holds at least the input")
    }

    /// Number of recorded layers.
    pub fn len(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to the network input.
    pub input: DVector<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: DMatrix::zeros(l.input_dim(), l.output_dim()),
                    bias: DVector::zeros(l.output_dim()),
                })
                .collect(),
            input: DVector::zeros(mlp.input_dim()),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.weights += &theirs.weights;
            mine.bias += &theirs.bias;
        }
        self.input += &other.input;
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights *= factor;
            g.bias *= factor;
        }
        self.input *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Data("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network with widths `dims` (input first) and one
    /// activation per layer.
    pub fn glorot<R: Rng>(rng: &mut R, dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Data("need an input and at least one layer width".into()));
        }
        check_dim("activation count", dims.len() - 1, activations.len())?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, act)| DenseLayer::glorot(rng, w[0], w[1], *act))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Tape)> {
        check_dim("network input", self.input_dim(), x.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((out, Tape { activations }))
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the network output is `output_grad`.
    pub fn backward(&self, tape: &Tape, output_grad: &DVector<f64>) -> Result<Gradients> {
        check_dim("tape length", self.layers.len(), tape.len())?;
        for (i, layer) in self.layers.iter().enumerate() {
            check_dim("tape activation", layer.input_dim(), tape.activations[i].len())?;
        }
        check_dim("output gradient", self.output_dim(), output_grad.len())?;
        check_dim("tape output", self.output_dim(), tape.output().len())?;

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.activations[i + 1];
            let mut delta = upstream;
            for (d, a) in delta.iter_mut().zip(out.iter()) {
                *d *= layer.activation.derivative_from_output(*a);
            }
            let input = &tape.activations[i];
            upstream = &layer.weights * &delta;
            layers.push(LayerGradient {
                weights: input * delta.transpose(),
                bias: delta,
            });
        }
        layers.reverse();
        Ok(Gradients {
            layers,
            input: upstream,
        })
    }

    /// Plain gradient step `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        check_dim("gradient layers", self.layers.len(), grads.layers.len())?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            check_dim("gradient rows", layer.input_dim(), g.weights.nrows())?;
            check_dim("gradient cols", layer.output_dim(), g.weights.ncols())?;
            layer.weights -= &g.weights * lr;
            layer.bias -= &g.bias * lr;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Mean binary cross entropy of probabilities `pred` against `target`, with
/// its gradient in `pred`.
pub fn bce_loss(pred: &DVector<f64>, target: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_dim("bce target", pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::Data("empty prediction".into()));
    }
    if let Some(p) = pred.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain {
            family: "bce".into(),
            value: *p,
            domain: "(0, 1)".into(),
        });
    }
    if let Some(t) = target.iter().find(|t| !(**t >= 0.0 && **t <= 1.0)) {
        return Err(Error::Domain {
            family: "bce target".into(),
            value: *t,
            domain: "[0, 1]".into(),
        });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(pred.len());
    for (k, (p, t)) in pred.iter().zip(target.iter()).enumerate() {
        loss -= t * p.ln() + (1.0 - t) * (-p).ln_1p();
        grad[k] = (p - t) / (p * (1.0 - p)) / n;
    }
    Ok((loss / n, grad))
}

/// Mean binary cross entropy applied through a logistic output, in the
/// overflow-free form `softplus(h) - t h`. The gradient is `(sigma(h) - t) / n`.
pub fn bce_with_logits(logits: &DVector<f64>, target: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_dim("bce target", logits.len(), target.len())?;
    if logits.is_empty() {
        return Err(Error::Data("empty prediction".into()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(logits.len());
    for (k, (h, t)) in logits.iter().zip(target.iter()).enumerate() {
        loss += softplus(*h) - t * h;
        grad[k] = (logistic(*h) - t) / n;
    }
    Ok((loss / n, grad))
}
