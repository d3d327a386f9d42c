//! Model families with exact gradients of the mean cross-entropy loss.
//!
//! Parameter layouts (row-major):
//!
//! * linear-softmax: `W (C×d)`, `b (C)`
//! * mlp-1hidden: `W1 (h×d)`, `b1 (h)`, `W2 (C×h)`, `b2 (C)`

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", deny_unknown_fields)]
pub enum ModelFamily {
    #[serde(rename = "linear-softmax")]
    LinearSoftmax {},
    #[serde(rename = "mlp-1hidden")]
    Mlp { hidden_dim: usize, activation: Activation },
}

impl Default for ModelFamily {
    fn default() -> Self {
        ModelFamily::LinearSoftmax {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("input_dim and num_classes must be positive".into()));
        }
        if let ModelFamily::Mlp { hidden_dim: 0, .. } = family {
            return Err(Error::InvalidArgument("hidden_dim must be positive".into()));
        }
        Ok(Self { family, input_dim, num_classes })
    }

    /// Linear softmax spec; panics on zero dimensions.
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self::new(ModelFamily::LinearSoftmax {}, input_dim, num_classes).expect("positive dimensions")
    }

    /// One-hidden-layer perceptron spec; panics on zero dimensions.
    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        Self::new(ModelFamily::Mlp { hidden_dim, activation }, input_dim, num_classes).expect("positive dimensions")
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.family {
            ModelFamily::LinearSoftmax {} => c * d + c,
            ModelFamily::Mlp { hidden_dim: h, .. } => h * d + h + c * h + c,
        }
    }

    /// Index ranges of the bias blocks.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.family {
            ModelFamily::LinearSoftmax {} => {
                let bias = c * d..c * d + c;
                vec![bias]
            }
            ModelFamily::Mlp { hidden_dim: h, .. } => {
                let b1 = h * d..h * d + h;
                let b2_start = h * d + h + c * h;
                vec![b1, b2_start..b2_start + c]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// A non-empty set of borrowed examples.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    examples: Vec<&'a Example>,
}

impl<'a> Batch<'a> {
    pub fn new(examples: Vec<&'a Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { examples })
    }

    pub fn from_examples(examples: &'a [Example]) -> Result<Self> {
        Self::new(examples.iter().collect())
    }

    pub fn examples(&self) -> &[&'a Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Zero-mean Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, &[rng::INIT]);
    let mut values = Vec::with_capacity(spec.param_count());
    let mut push_layer = |rows: usize, fan_in: usize, values: &mut Vec<f64>| {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
        values.extend((0..rows * fan_in).map(|_| normal.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, rows));
    };
    match spec.family {
        ModelFamily::LinearSoftmax {} => push_layer(spec.num_classes, spec.input_dim, &mut values),
        ModelFamily::Mlp { hidden_dim, .. } => {
            push_layer(hidden_dim, spec.input_dim, &mut values);
            push_layer(spec.num_classes, hidden_dim, &mut values);
        }
    }
    ParamVector::new(*spec, values).expect("initializer produces finite values")
}

fn check_example(spec: &ModelSpec, ex: &Example) -> Result<()> {
    if ex.features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch { expected: spec.input_dim, found: ex.features.len() });
    }
    if ex.label >= spec.num_classes {
        return Err(Error::InvalidLabel { label: ex.label, num_classes: spec.num_classes });
    }
    Ok(())
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weights[r * n_in..(r + 1) * n_in];
        *o = bias[r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Writes `softmax(logits) - onehot(label)` into `logits` and returns the
/// cross-entropy `-log softmax(logits)[label]`.
fn softmax_residual(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    for (c, l) in logits.iter_mut().enumerate() {
        *l = (*l - lse).exp() - if c == label { 1.0 } else { 0.0 };
    }
    loss
}

fn add_outer(grad: &mut [f64], delta: &[f64], input: &[f64]) {
    let n_in = input.len();
    for (r, &dr) in delta.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        for (g, x) in grad[r * n_in..(r + 1) * n_in].iter_mut().zip(input) {
            *g += dr * x;
        }
    }
}

/// Mean loss over `batch`, plus its gradient when `grad` is supplied.
fn evaluate(params: &ParamVector, batch: &Batch<'_>, mut grad: Option<&mut [f64]>) -> Result<f64> {
    let spec = *params.spec();
    let w = params.values();
    let (d, c) = (spec.input_dim, spec.num_classes);
    let mut total = 0.0;
    match spec.family {
        ModelFamily::LinearSoftmax {} => {
            let (weights, bias) = w.split_at(c * d);
            let mut logits = vec![0.0; c];
            for ex in batch.examples() {
                check_example(&spec, ex)?;
                affine(weights, bias, &ex.features, &mut logits);
                total += softmax_residual(&mut logits, ex.label);
                if let Some(g) = grad.as_deref_mut() {
                    let (gw, gb) = g.split_at_mut(c * d);
                    add_outer(gw, &logits, &ex.features);
                    for (b, r) in gb.iter_mut().zip(&logits) {
                        *b += r;
                    }
                }
            }
        }
        ModelFamily::Mlp { hidden_dim: h, activation } => {
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut z1 = vec![0.0; h];
            let mut a1 = vec![0.0; h];
            let mut dz1 = vec![0.0; h];
            let mut logits = vec![0.0; c];
            for ex in batch.examples() {
                check_example(&spec, ex)?;
                affine(w1, b1, &ex.features, &mut z1);
                for (a, &z) in a1.iter_mut().zip(&z1) {
                    *a = activation.apply(z);
                }
                affine(w2, b2, &a1, &mut logits);
                total += softmax_residual(&mut logits, ex.label);
                if let Some(g) = grad.as_deref_mut() {
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    add_outer(gw2, &logits, &a1);
                    for (b, r) in gb2.iter_mut().zip(&logits) {
                        *b += r;
                    }
                    for j in 0..h {
                        let back: f64 = (0..c).map(|k| w2[k * h + j] * logits[k]).sum();
                        dz1[j] = back * activation.derivative(z1[j], a1[j]);
                    }
                    add_outer(gw1, &dz1, &ex.features);
                    for (b, r) in gb1.iter_mut().zip(&dz1) {
                        *b += r;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    if let Some(g) = grad {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(total / n)
}

/// Mean cross-entropy of `params` on `batch`.
pub fn loss(params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    evaluate(params, batch, None)
}

/// Exact gradient of [`loss`].
pub fn gradient(params: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector> {
    Ok(loss_and_gradient(params, batch)?.1)
}

pub fn loss_and_gradient(params: &ParamVector, batch: &Batch<'_>) -> Result<(f64, ParamVector)> {
    let mut grad = vec![0.0; params.len()];
    let loss = evaluate(params, batch, Some(&mut grad))?;
    Ok((loss, ParamVector::new(*params.spec(), grad)?))
}

/// Raw class scores for a single feature vector.
pub fn logits(params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    let spec = *params.spec();
    if features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch { expected: spec.input_dim, found: features.len() });
    }
    let w = params.values();
    let (d, c) = (spec.input_dim, spec.num_classes);
    let mut out = vec![0.0; c];
    match spec.family {
        ModelFamily::LinearSoftmax {} => {
            let (weights, bias) = w.split_at(c * d);
            affine(weights, bias, features, &mut out);
        }
        ModelFamily::Mlp { hidden_dim: h, activation } => {
            let (w1, rest) = w.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut hidden = vec![0.0; h];
            affine(w1, b1, features, &mut hidden);
            for a in hidden.iter_mut() {
                *a = activation.apply(*a);
            }
            affine(w2, b2, &hidden, &mut out);
        }
    }
    Ok(out)
}

/// Argmax class; ties go to the lowest index.
pub fn predict(params: &ParamVector, features: &[f64]) -> Result<usize> {
    let scores = logits(params, features)?;
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    Ok(best)
}

pub fn evaluate_accuracy(params: &ParamVector, dataset: &[Example]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for ex in dataset {
        if predict(params, &ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean loss over a whole dataset.
pub fn dataset_loss(params: &ParamVector, dataset: &[Example]) -> Result<f64> {
    loss(params, &Batch::from_examples(dataset)?)
}
