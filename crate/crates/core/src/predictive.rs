//! Monte Carlo predictive moments and evaluation metrics.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::marginals::{DropoutMask, ParamGroup, SampleSet};
use crate::nn::{self, ModelSpec, OutputHead, ParamVector};

/// Predictive mean and population variance over `k` sampled networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Averaged class probabilities (classification head only).
    pub probs: Option<Vec<f64>>,
    pub k: usize,
}

/// Welford accumulator over output vectors.
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(m: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; m],
            m2: vec![0.0; m],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((mu, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *mu;
            *mu += delta / n;
            *s += delta * (v - *mu);
        }
    }

    fn var(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / n).max(0.0)).collect()
    }
}

fn finish(head: OutputHead, mean: Vec<f64>, var: Vec<f64>, k: usize) -> PredictiveStats {
    let probs = (head == OutputHead::Classification).then(|| mean.clone());
    PredictiveStats { mean, var, probs, k }
}

/// `mean = (1/K) sum f_k(x)`, `var = (1/K) sum (f_k(x) - mean)^2`, with each
/// mask applied to its parameter vector before the forward pass.
pub fn predictive_mc(
    spec: &ModelSpec,
    samples: &[(ParamVector, Option<DropoutMask>)],
    x: &[f64],
) -> Result<PredictiveStats> {
    if samples.is_empty() {
        return Err(Error::Precondition("predictive estimate needs at least one sample".into()));
    }
    let mut acc = Moments::new(spec.output_dim());
    for (theta, mask) in samples {
        let out = match mask {
            Some(m) => nn::forward(spec, &m.apply(theta), x)?,
            None => nn::forward(spec, theta, x)?,
        };
        acc.push(&out);
    }
    let var = acc.var();
    Ok(finish(spec.head(), acc.mean, var, samples.len()))
}

/// Same estimate as [`predictive_mc`] computed group-wise: masks are
/// averaged within each parameter sample, then groups are combined by the
/// law of total variance. Groups of identical outputs contribute exactly
/// their shared value, so all-ones masks leave results bitwise unchanged.
pub fn predictive_grouped(spec: &ModelSpec, effective: &[Vec<ParamVector>], x: &[f64]) -> Result<PredictiveStats> {
    if effective.is_empty() || effective.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("predictive estimate needs at least one sample".into()));
    }
    let m = spec.output_dim();
    let mut between = Moments::new(m);
    let mut within = vec![0.0; m];
    let mut k = 0;
    for group in effective {
        let mut acc = Moments::new(m);
        for theta in group {
            acc.push(&nn::forward(spec, theta, x)?);
        }
        k += acc.n;
        for (w, v) in within.iter_mut().zip(acc.var()) {
            *w += v;
        }
        between.push(&acc.mean);
    }
    let g = effective.len() as f64;
    let var = within
        .iter()
        .zip(between.var())
        .map(|(w, b)| w / g + b)
        .collect();
    Ok(finish(spec.head(), between.mean, var, k))
}

fn effective_params(groups: &[ParamGroup]) -> Vec<Vec<ParamVector>> {
    groups.iter().map(ParamGroup::effective).collect()
}

/// Predictive statistics for every input row of `data`, in row order.
pub fn predict_dataset(spec: &ModelSpec, set: &SampleSet, data: &Dataset) -> Result<Vec<PredictiveStats>> {
    let effective = effective_params(&set.groups);
    data.inputs()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x| predictive_grouped(spec, &effective, x))
        .collect()
}

pub const NOISE_FLOOR: f64 = 1e-6;

/// Homoscedastic observation noise added to the ensemble variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma2_noise: f64,
}

impl NoiseModel {
    /// Mean squared residual over all targets, floored at [`NOISE_FLOOR`].
    pub fn from_residuals<'a>(
        means: impl IntoIterator<Item = &'a [f64]>,
        targets: impl IntoIterator<Item = &'a [f64]>,
    ) -> Self {
        let (mut sum, mut count) = (0.0, 0usize);
        for (mu, y) in means.into_iter().zip(targets) {
            for (a, b) in mu.iter().zip(y) {
                sum += (b - a) * (b - a);
                count += 1;
            }
        }
        let mse = if count == 0 { 0.0 } else { sum / count as f64 };
        Self {
            sigma2_noise: mse.max(NOISE_FLOOR),
        }
    }
}

/// Noise variance from the predictive-mean residuals on the training set.
pub fn fit_noise(spec: &ModelSpec, set: &SampleSet, train: &Dataset) -> Result<NoiseModel> {
    if train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let stats = predict_dataset(spec, set, train)?;
    Ok(NoiseModel::from_residuals(
        stats.iter().map(|s| &s.mean[..]),
        train.targets(),
    ))
}

/// Gaussian NLL of `y` under `N(mean, var + sigma2_noise)`, summed over outputs.
pub fn nll_gaussian(y: &[f64], stats: &PredictiveStats, noise: &NoiseModel) -> f64 {
    y.iter()
        .zip(&stats.mean)
        .zip(&stats.var)
        .map(|((y, mu), var)| gaussian_nll(y - mu, var + noise.sigma2_noise))
        .sum()
}

pub fn gaussian_nll(residual: f64, var_total: f64) -> f64 {
    0.5 * (2.0 * PI * var_total).ln() + residual * residual / (2.0 * var_total)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            what: "metric inputs",
            expected: a,
            got: b,
        });
    }
    if a == 0 {
        return Err(Error::Precondition("metrics need at least one point".into()));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), targets.len())?;
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn nll_classification(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let q = p.get(l).ok_or_else(|| {
            Error::Precondition(format!("label {l} out of range for {} classes", p.len()))
        })?;
        total -= q.max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn scalar_spec() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Identity, OutputHead::Regression, 0.0).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_variance() {
        let spec = ModelSpec::regression(vec![2, 6, 1]).unwrap();
        let theta = nn::init_params(&spec, 2);
        let samples = vec![(theta.clone(), None); 7];
        let s = predictive_mc(&spec, &samples, &[0.3, 0.9]).unwrap();
        assert_eq!(s.var, vec![0.0]);
        assert_eq!(s.mean, nn::forward(&spec, &theta, &[0.3, 0.9]).unwrap());
    }

    #[test]
    fn two_outcomes() {
        let spec = scalar_spec();
        let samples = vec![
            (ParamVector::new(vec![0.0, 1.0]), None),
            (ParamVector::new(vec![0.0, 3.0]), None),
        ];
        let s = predictive_mc(&spec, &samples, &[5.0]).unwrap();
        assert_eq!((s.mean[0], s.var[0], s.k), (2.0, 1.0, 2));
        assert!(predictive_mc(&spec, &[], &[5.0]).is_err());
    }

    #[test]
    fn grouped_matches_flat() {
        let spec = scalar_spec();
        let groups: Vec<Vec<ParamVector>> = (0..4)
            .map(|g| (0..3).map(|r| ParamVector::new(vec![0.1 * r as f64, g as f64])).collect())
            .collect();
        let flat: Vec<(ParamVector, Option<DropoutMask>)> =
            groups.iter().flatten().map(|p| (p.clone(), None)).collect();
        let a = predictive_grouped(&spec, &groups, &[2.0]).unwrap();
        let b = predictive_mc(&spec, &flat, &[2.0]).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
        assert!((a.var[0] - b.var[0]).abs() < 1e-12);
        assert_eq!(a.k, 12);
    }

    #[test]
    fn noise_fits() {
        let zero = [0.0];
        let m = NoiseModel::from_residuals([&zero[..], &zero[..]], [&[1.0][..], &[-1.0][..]]);
        assert_eq!(m.sigma2_noise, 1.0);
        let m = NoiseModel::from_residuals([&[1.0][..], &[1.0][..]], [&[1.0][..], &[3.0][..]]);
        assert_eq!(m.sigma2_noise, 2.0);
        let m = NoiseModel::from_residuals([&[1.0][..]], [&[1.0][..]]);
        assert_eq!(m.sigma2_noise, NOISE_FLOOR);
    }

    #[test]
    fn gaussian_nll_values() {
        let stats = |mu: f64, var: f64| PredictiveStats { mean: vec![mu], var: vec![var], probs: None, k: 1 };
        let none = NoiseModel { sigma2_noise: 0.0 };
        assert!((nll_gaussian(&[0.0], &stats(0.0, 1.0), &none) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((nll_gaussian(&[1.0], &stats(0.0, 1.0), &none) - 1.418_938_533_204_672_7).abs() < 1e-12);
        let noise = NoiseModel { sigma2_noise: 3.0 };
        assert!((nll_gaussian(&[2.0], &stats(2.0, 1.0), &noise) - 1.612_085_713_764_618).abs() < 1e-12);
    }

    #[test]
    fn classification_metrics() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let labels = [0, 1, 0];
        assert_eq!(accuracy(&probs, &labels).unwrap(), 1.0);
        assert!(nll_classification(&probs, &labels).unwrap().abs() < 1e-15);
        let wrong = nll_classification(&probs, &[1, 1, 0]).unwrap();
        assert!((wrong - (-PROB_FLOOR.ln()) / 3.0).abs() < 1e-12);
        assert!(accuracy(&probs, &[0]).is_err());
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[]).is_err());
    }
}
