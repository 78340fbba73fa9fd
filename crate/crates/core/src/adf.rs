//! One-shot predictive moments by assumed density filtering.
//!
//! Each unit carries an independent Gaussian `(mean, variance)`; linear and
//! ReLU layers map input moments to output moments in closed form. No
//! covariances are tracked.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::marginals::SwagPosterior;
use crate::nn::{Activation, LayerShape, ModelSpec, OutputHead, ParamVector};

/// Below this standard deviation the ReLU takes its deterministic limit.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                what: "moment variances",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Precondition("variances must be nonnegative".into()));
        }
        Ok(Self { mean, var })
    }

    /// A point input: zero variance.
    pub fn deterministic(x: &[f64]) -> Self {
        Self {
            mean: x.to_vec(),
            var: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Independent Gaussian parameters in the network's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMoments {
    pub mean: ParamVector,
    pub var: Vec<f64>,
}

impl ParamMoments {
    pub fn new(mean: ParamVector, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                what: "parameter variances",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Precondition("variances must be nonnegative".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn point(theta: &ParamVector) -> Self {
        Self {
            mean: theta.clone(),
            var: vec![0.0; theta.len()],
        }
    }
}

impl From<&SwagPosterior> for ParamMoments {
    fn from(post: &SwagPosterior) -> Self {
        Self {
            mean: post.mean.clone(),
            var: post.var.clone(),
        }
    }
}

/// Moments of `W x + B` for independent `W`, `x`, `B`:
/// `E = E[W] E[x] + E[B]` and
/// `Var = sum_j (Var[W] Var[x] + Var[W] E[x]^2 + E[W]^2 Var[x]) + Var[B]`.
pub fn adf_linear(input: &GaussianMoments, params: &ParamMoments, layer: &LayerShape) -> Result<GaussianMoments> {
    if input.len() != layer.fan_in {
        return Err(Error::Shape {
            what: "layer input",
            expected: layer.fan_in,
            got: input.len(),
        });
    }
    if params.mean.len() < layer.end() {
        return Err(Error::Shape {
            what: "parameter moments",
            expected: layer.end(),
            got: params.mean.len(),
        });
    }
    let w_mean = &params.mean.as_slice()[layer.weight_offset..layer.bias_offset];
    let w_var = &params.var[layer.weight_offset..layer.bias_offset];
    let b_mean = &params.mean.as_slice()[layer.bias_offset..layer.end()];
    let b_var = &params.var[layer.bias_offset..layer.end()];

    let mut mean = Vec::with_capacity(layer.fan_out);
    let mut var = Vec::with_capacity(layer.fan_out);
    for o in 0..layer.fan_out {
        let row = o * layer.fan_in..(o + 1) * layer.fan_in;
        let (mut m, mut v) = (b_mean[o], b_var[o]);
        for ((wm, wv), (xm, xv)) in w_mean[row.clone()]
            .iter()
            .zip(&w_var[row])
            .zip(input.mean.iter().zip(&input.var))
        {
            m += wm * xm;
            v += wv * xv + wv * xm * xm + wm * wm * xv;
        }
        mean.push(m);
        var.push(v);
    }
    Ok(GaussianMoments { mean, var })
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// ReLU moments before the nonnegativity clamp on the variance.
pub fn relu_moments_raw(mu: f64, var: f64) -> (f64, f64) {
    let sigma = var.sqrt();
    if sigma < SIGMA_EPS {
        return (mu.max(0.0), 0.0);
    }
    let r = mu / sigma;
    let (cdf, pdf) = (std_normal_cdf(r), std_normal_pdf(r));
    let mean = mu * cdf + sigma * pdf;
    let second = (mu * mu + var) * cdf + mu * sigma * pdf;
    (mean, second - mean * mean)
}

/// `E[max(0, X)]` and `Var[max(0, X)]` for `X ~ N(mu, var)`.
pub fn relu_moments(mu: f64, var: f64) -> (f64, f64) {
    let (mean, v) = relu_moments_raw(mu, var);
    (mean, v.max(0.0))
}

pub fn adf_relu(input: &GaussianMoments) -> GaussianMoments {
    let (mean, var) = input
        .mean
        .iter()
        .zip(&input.var)
        .map(|(&m, &v)| relu_moments(m, v))
        .unzip();
    GaussianMoments { mean, var }
}

/// Propagates input moments through every layer of `spec` in one pass.
pub fn adf_forward(spec: &ModelSpec, params: &ParamMoments, input: &GaussianMoments) -> Result<GaussianMoments> {
    if spec.head() != OutputHead::Regression {
        return Err(Error::UnsupportedHead);
    }
    let d = crate::nn::param_dim(spec);
    if params.mean.len() != d {
        return Err(Error::Shape {
            what: "parameter moments",
            expected: d,
            got: params.mean.len(),
        });
    }
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut z = input.clone();
    for (l, layer) in layers.iter().enumerate() {
        z = adf_linear(&z, params, layer)?;
        if l < last && spec.activation() == Activation::Relu {
            z = adf_relu(&z);
        }
    }
    Ok(z)
}
