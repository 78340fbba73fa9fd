//! Dense feed-forward networks over a flat parameter vector.
//!
//! Parameter layout is layer-major: for each layer, the `fan_out x fan_in`
//! weight matrix in row-major order followed by the `fan_out` biases. Masks,
//! SWAG moments and parameter variances all index into this same layout.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: OutputHead,
    dropout_rate: f64,
}

/// Offsets of one affine layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl ModelSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        head: OutputHead,
        dropout_rate: f64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {} entries",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("layer {pos} has zero width")));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
            head,
            dropout_rate,
        })
    }

    /// ReLU regression network without dropout.
    pub fn regression(layer_sizes: Vec<usize>) -> Result<Self> {
        Self::new(layer_sizes, Activation::Relu, OutputHead::Regression, 0.0)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn with_dropout(&self, dropout_rate: f64) -> Result<Self> {
        Self::new(
            self.layer_sizes.clone(),
            self.activation,
            self.head,
            dropout_rate,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let shape = LayerShape {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                shape
            })
            .collect()
    }

    pub fn check_loss(&self, loss: LossKind) -> Result<()> {
        match (loss, self.head) {
            (LossKind::Mse, OutputHead::Regression)
            | (LossKind::CrossEntropy, OutputHead::Classification) => Ok(()),
            (LossKind::CrossEntropy, OutputHead::Regression) => Err(Error::InvalidSpec(
                "cross-entropy loss requires the classification head".into(),
            )),
            (LossKind::Mse, OutputHead::Classification) => Err(Error::InvalidSpec(
                "mse loss requires the regression head".into(),
            )),
        }
    }
}

/// Number of trainable parameters: sum over layers of `fan_in * fan_out + fan_out`.
pub fn param_dim(spec: &ModelSpec) -> usize {
    spec.layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    /// Wraps `values` after checking length and finiteness against `spec`.
    pub fn for_spec(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        check_len(spec, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("parameter vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_len(spec: &ModelSpec, got: usize) -> Result<()> {
    let expected = param_dim(spec);
    if got != expected {
        return Err(Error::Shape {
            what: "parameter vector",
            expected,
            got,
        });
    }
    Ok(())
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed);
    let mut theta = vec![0.0; param_dim(spec)];
    for layer in spec.layers() {
        let limit = glorot_limit(layer.fan_in, layer.fan_out);
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        for w in &mut theta[layer.weight_offset..layer.bias_offset] {
            *w = rng.sample(dist);
        }
    }
    ParamVector(theta)
}

/// Post-activation values of every layer; the last entry holds the raw
/// output (logits for the classification head).
fn forward_trace(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let input = &acts[l];
        let weights = &theta[layer.weight_offset..layer.bias_offset];
        let bias = &theta[layer.bias_offset..layer.end()];
        let out: Vec<f64> = weights
            .chunks_exact(layer.fan_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + b;
                if l == last {
                    z
                } else {
                    spec.activation.apply(z)
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in v.iter_mut() {
        *e /= sum;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// Network output `f_theta(x)`; class probabilities for the classification head.
pub fn forward(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_len(spec, theta.len())?;
    if x.len() != spec.input_dim() {
        return Err(Error::Shape {
            what: "input",
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    Ok(forward_unchecked(spec, theta.as_slice(), x))
}

pub(crate) fn forward_unchecked(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = forward_trace(spec, theta, x).pop().unwrap();
    if spec.head == OutputHead::Classification {
        softmax_in_place(&mut out);
    }
    out
}

/// One training pair.
pub type Example<'a> = (&'a [f64], &'a [f64]);

/// Mean loss over `batch` and its exact gradient.
///
/// `mse` sums squared errors over outputs; `cross_entropy` expects target
/// probability vectors (one-hot for hard labels) and is evaluated on logits.
pub fn loss_and_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &[Example<'_>],
    loss: LossKind,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    spec.check_loss(loss)?;
    check_len(spec, theta.len())?;
    for (x, y) in batch {
        if x.len() != spec.input_dim() {
            return Err(Error::Shape {
                what: "input",
                expected: spec.input_dim(),
                got: x.len(),
            });
        }
        if y.len() != spec.output_dim() {
            return Err(Error::Shape {
                what: "target",
                expected: spec.output_dim(),
                got: y.len(),
            });
        }
    }

    let theta = theta.as_slice();
    let layers = spec.layers();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut total = 0.0;

    for (x, y) in batch {
        let acts = forward_trace(spec, theta, x);
        let out = acts.last().unwrap();
        let mut delta: Vec<f64> = match loss {
            LossKind::Mse => {
                total += out.iter().zip(*y).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
                out.iter().zip(*y).map(|(o, t)| 2.0 * (o - t) * scale).collect()
            }
            LossKind::CrossEntropy => {
                let lse = log_sum_exp(out);
                let mass: f64 = y.iter().sum();
                total += y.iter().zip(out).map(|(t, o)| t * (lse - o)).sum::<f64>();
                out.iter()
                    .zip(*y)
                    .map(|(o, t)| (mass * (o - lse).exp() - t) * scale)
                    .collect()
            }
        };

        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                let row = layer.weight_offset + o * layer.fan_in;
                for (g, a) in grad[row..row + layer.fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[layer.bias_offset + o] += d;
            }
            if l > 0 {
                let weights = &theta[layer.weight_offset..layer.bias_offset];
                let mut prev = vec![0.0; layer.fan_in];
                for (row, d) in weights.chunks_exact(layer.fan_in).zip(&delta) {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= spec.activation.grad_from_output(*a);
                }
                delta = prev;
            }
        }
    }

    Ok((total * scale, ParamVector(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(sizes: Vec<usize>) -> ModelSpec {
        ModelSpec::new(sizes, Activation::Identity, OutputHead::Regression, 0.0).unwrap()
    }

    #[test]
    fn param_dim_counts() {
        assert_eq!(param_dim(&ModelSpec::regression(vec![1, 100, 1]).unwrap()), 301);
        assert_eq!(param_dim(&ModelSpec::regression(vec![2, 2]).unwrap()), 6);
        assert_eq!(param_dim(&ModelSpec::regression(vec![8, 50, 1]).unwrap()), 501);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::regression(vec![3]).is_err());
        assert!(ModelSpec::regression(vec![3, 0, 1]).is_err());
        let base = ModelSpec::regression(vec![1, 4, 1]).unwrap();
        assert!(base.with_dropout(1.0).is_err());
        assert!(base.with_dropout(-0.1).is_err());
        assert!(base.with_dropout(0.5).is_ok());
    }

    #[test]
    fn glorot_limit_value() {
        assert!((glorot_limit(50, 1) - 0.342_997_170_285_018_4).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::regression(vec![3, 50, 1]).unwrap();
        let a = init_params(&spec, 9);
        assert_eq!(a, init_params(&spec, 9));
        assert_ne!(a, init_params(&spec, 10));
        for layer in spec.layers() {
            let limit = glorot_limit(layer.fan_in, layer.fan_out);
            let w = &a.as_slice()[layer.weight_offset..layer.bias_offset];
            assert!(w.iter().all(|v| v.abs() <= limit));
            let b = &a.as_slice()[layer.bias_offset..layer.end()];
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_affine() {
        let spec = identity_spec(vec![1, 1]);
        let theta = ParamVector::new(vec![2.0, 1.0]);
        assert_eq!(forward(&spec, &theta, &[3.0]).unwrap(), vec![7.0]);
        assert!(matches!(
            forward(&spec, &theta, &[1.0, 2.0]),
            Err(Error::Shape { what: "input", .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = ModelSpec::regression(vec![3, 7, 2]).unwrap();
        let theta = ParamVector::zeros(param_dim(&spec));
        assert_eq!(forward(&spec, &theta, &[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_head_is_simplex() {
        let spec =
            ModelSpec::new(vec![2, 5, 3], Activation::Relu, OutputHead::Classification, 0.0)
                .unwrap();
        let mut theta = init_params(&spec, 3);
        for v in theta.as_mut_slice() {
            *v *= 40.0;
        }
        let p = forward(&spec, &theta, &[3.0, -8.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hand_differentiated_square_loss() {
        let spec = identity_spec(vec![1, 1]);
        let theta = ParamVector::new(vec![1.0, 0.0]);
        let (loss, grad) =
            loss_and_grad(&spec, &theta, &[(&[1.0], &[0.0])], LossKind::Mse).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let spec = ModelSpec::regression(vec![2, 4, 1]).unwrap();
        let theta = init_params(&spec, 1);
        let xs = [[0.3, -1.0], [1.2, 0.4]];
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| forward(&spec, &theta, x).unwrap()).collect();
        let batch: Vec<Example> = xs.iter().zip(&ys).map(|(x, y)| (&x[..], &y[..])).collect();
        let (loss, grad) = loss_and_grad(&spec, &theta, &batch, LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn loss_errors() {
        let spec = ModelSpec::regression(vec![1, 1]).unwrap();
        let theta = ParamVector::zeros(2);
        assert!(matches!(
            loss_and_grad(&spec, &theta, &[], LossKind::Mse),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            loss_and_grad(&spec, &theta, &[(&[1.0], &[1.0])], LossKind::CrossEntropy),
            Err(Error::InvalidSpec(_))
        ));
    }
}
