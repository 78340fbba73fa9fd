//! Iterative training: SGD and Adam over seeded batch plans, learning-rate
//! schedules, iterate traces, and the finite algorithm-class mixture.

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Example, LossKind, ModelSpec, OutputHead, ParamVector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Adam,
}

/// Step size as a function of the (1-based) epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Constant {
        alpha: f64,
    },
    /// `alpha_u` for the first half of training, a linear decrease to
    /// `alpha_l` over `[0.5 n_e, 0.9 n_e]`, then `alpha_l`.
    SwaRamp {
        alpha_u: f64,
        alpha_l: f64,
        n_e: usize,
    },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSpec::Constant { alpha } if alpha > 0.0 && alpha.is_finite() => Ok(()),
            ScheduleSpec::Constant { alpha } => Err(Error::Precondition(format!(
                "learning rate must be positive, got {alpha}"
            ))),
            ScheduleSpec::SwaRamp {
                alpha_u,
                alpha_l,
                n_e,
            } => {
                if !(alpha_u > alpha_l && alpha_l > 0.0 && alpha_u.is_finite()) {
                    return Err(Error::Precondition(format!(
                        "ramp schedule needs alpha_u > alpha_l > 0, got {alpha_u} and {alpha_l}"
                    )));
                }
                if n_e == 0 {
                    return Err(Error::Precondition("ramp schedule needs n_e >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

pub fn lr_at(sched: &ScheduleSpec, epoch: usize) -> Result<f64> {
    match *sched {
        ScheduleSpec::Constant { alpha } => Ok(alpha),
        ScheduleSpec::SwaRamp {
            alpha_u,
            alpha_l,
            n_e,
        } => {
            if epoch == 0 || epoch > n_e {
                return Err(Error::Precondition(format!(
                    "epoch {epoch} outside 1..={n_e}"
                )));
            }
            let (e, n) = (epoch as f64, n_e as f64);
            Ok(if e < 0.5 * n {
                alpha_u
            } else if e > 0.9 * n {
                alpha_l
            } else {
                alpha_u - (alpha_u - alpha_l) * (e - 0.5 * n) / (0.4 * n)
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Each step draws its batch index uniformly from `0..N_b`.
    UniformIid,
    /// Each block of `N_b` steps visits every batch once, in random order.
    EpochShuffle,
}

/// One point `h` of the training hyperparameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub algorithm: Algorithm,
    pub lr: ScheduleSpec,
    pub batch_size: usize,
    pub batch_seed: u64,
    pub batch_mode: BatchMode,
    pub adam: AdamConfig,
}

impl HyperParams {
    pub fn sgd(alpha: f64, batch_size: usize) -> Self {
        Self {
            algorithm: Algorithm::Sgd,
            lr: ScheduleSpec::Constant { alpha },
            batch_size,
            batch_seed: 0,
            batch_mode: BatchMode::EpochShuffle,
            adam: AdamConfig::default(),
        }
    }

    pub fn adam(alpha: f64, batch_size: usize) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            ..Self::sgd(alpha, batch_size)
        }
    }

    pub fn with_batch_seed(mut self, seed: u64) -> Self {
        self.batch_seed = seed;
        self
    }
}

pub fn num_batches(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

/// Fixed batches over a seeded sample permutation plus the per-step batch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub n: usize,
    pub batch_size: usize,
    pub n_batches: usize,
    pub mode: BatchMode,
    /// Batch index consumed at each step.
    pub order: Vec<usize>,
    /// Sample permutation; batch `i` covers positions `i*b .. min((i+1)*b, n)`.
    pub sample_order: Vec<usize>,
}

impl BatchPlan {
    pub fn batch(&self, i: usize) -> &[usize] {
        let start = i * self.batch_size;
        &self.sample_order[start..(start + self.batch_size).min(self.n)]
    }
}

pub fn make_batch_plan(
    n: usize,
    batch_size: usize,
    seed: u64,
    mode: BatchMode,
    steps: usize,
) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Precondition(format!(
            "batch size {batch_size} must lie in 1..={n}"
        )));
    }
    if steps == 0 {
        return Err(Error::Precondition("batch plan needs at least one step".into()));
    }
    let n_batches = num_batches(n, batch_size);
    let mut rng = seed::rng(seed);
    let mut sample_order: Vec<usize> = (0..n).collect();
    sample_order.shuffle(&mut rng);
    let order = match mode {
        BatchMode::UniformIid => (0..steps).map(|_| rng.random_range(0..n_batches)).collect(),
        BatchMode::EpochShuffle => {
            let mut order = Vec::with_capacity(steps + n_batches);
            let mut epoch: Vec<usize> = (0..n_batches).collect();
            while order.len() < steps {
                epoch.shuffle(&mut rng);
                order.extend_from_slice(&epoch);
            }
            order.truncate(steps);
            order
        }
    };
    Ok(BatchPlan {
        n,
        batch_size,
        n_batches,
        mode,
        order,
        sample_order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Snapshots,
    Streaming,
}

/// Which iterates are recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceConfig {
    /// Steps between recorded iterates; `None` records once per epoch.
    pub cadence: Option<usize>,
    /// First iteration eligible for recording; `None` uses `ceil(t / 2)`.
    pub burn_in: Option<usize>,
    pub mode: TraceMode,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            cadence: None,
            burn_in: None,
            mode: TraceMode::Snapshots,
        }
    }
}

/// Running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(d: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Iterates {
    Snapshots(Vec<ParamVector>),
    Streaming(RunningMoments),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub final_params: ParamVector,
    pub iterates: Iterates,
    pub t: usize,
    pub burn_in: usize,
}

impl TrainTrace {
    pub fn count(&self) -> usize {
        match &self.iterates {
            Iterates::Snapshots(s) => s.len(),
            Iterates::Streaming(m) => m.count,
        }
    }
}

pub fn default_loss(spec: &ModelSpec) -> LossKind {
    match spec.head() {
        OutputHead::Regression => LossKind::Mse,
        OutputHead::Classification => LossKind::CrossEntropy,
    }
}

/// Runs `t` iterations of `h.algorithm` from `theta0`.
///
/// The result depends only on the arguments. Any non-finite parameter
/// aborts with [`Error::Divergence`].
pub fn train(
    spec: &ModelSpec,
    theta0: &ParamVector,
    data: &Dataset,
    h: &HyperParams,
    t: usize,
    trace_cfg: &TraceConfig,
) -> Result<TrainTrace> {
    if t == 0 {
        return Err(Error::Precondition("training needs t >= 1 iterations".into()));
    }
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if data.n_inputs() != spec.input_dim() || data.n_outputs() != spec.output_dim() {
        return Err(Error::Shape {
            what: "dataset columns",
            expected: spec.input_dim() + spec.output_dim(),
            got: data.n_inputs() + data.n_outputs(),
        });
    }
    h.lr.validate()?;
    let loss = default_loss(spec);
    spec.check_loss(loss)?;

    let plan = make_batch_plan(data.len(), h.batch_size, h.batch_seed, h.batch_mode, t)?;
    if let ScheduleSpec::SwaRamp { n_e, .. } = h.lr {
        if t > n_e * plan.n_batches {
            return Err(Error::Precondition(format!(
                "{t} iterations exceed the {n_e}-epoch schedule"
            )));
        }
    }
    let cadence = trace_cfg.cadence.unwrap_or(plan.n_batches).max(1);
    let burn_in = trace_cfg.burn_in.unwrap_or(t.div_ceil(2));

    let d = theta0.len();
    let mut theta = theta0.clone();
    let mut iterates = match trace_cfg.mode {
        TraceMode::Snapshots => Iterates::Snapshots(Vec::new()),
        TraceMode::Streaming => Iterates::Streaming(RunningMoments::new(d)),
    };
    let (mut m, mut v) = match h.algorithm {
        Algorithm::Sgd => (Vec::new(), Vec::new()),
        Algorithm::Adam => (vec![0.0; d], vec![0.0; d]),
    };

    for (step, &batch_idx) in plan.order.iter().enumerate() {
        let iteration = step + 1;
        let epoch = step / plan.n_batches + 1;
        let alpha = lr_at(&h.lr, epoch)?;
        let batch: Vec<Example> = plan
            .batch(batch_idx)
            .iter()
            .map(|&i| (data.input(i), data.target(i)))
            .collect();
        let (_, grad) = nn::loss_and_grad(spec, &theta, &batch, loss)?;
        let params = theta.as_mut_slice();
        match h.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.as_slice()) {
                    *p -= alpha * g;
                }
            }
            Algorithm::Adam => {
                let AdamConfig { beta1, beta2, eps } = h.adam;
                let c1 = 1.0 - beta1.powi(iteration as i32);
                let c2 = 1.0 - beta2.powi(iteration as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad.as_slice()).zip(&mut m).zip(&mut v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= alpha * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        if !theta.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        if iteration >= burn_in && iteration % cadence == 0 {
            match &mut iterates {
                Iterates::Snapshots(s) => s.push(theta.clone()),
                Iterates::Streaming(r) => r.push(theta.as_slice()),
            }
        }
    }

    Ok(TrainTrace {
        final_params: theta,
        iterates,
        t,
        burn_in,
    })
}

/// Categorical choice among algorithm templates with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSelector {
    candidates: Vec<HyperParams>,
    weights: Vec<f64>,
}

impl AlgorithmSelector {
    pub fn new(candidates: Vec<HyperParams>, weights: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Precondition("algorithm selector has no candidates".into()));
        }
        if candidates.len() != weights.len() {
            return Err(Error::Shape {
                what: "selector weights",
                expected: candidates.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Precondition("selector weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "selector weights must sum to 1, got {total}"
            )));
        }
        Ok(Self {
            candidates,
            weights,
        })
    }

    pub fn candidates(&self) -> &[HyperParams] {
        &self.candidates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn select_index(&self, seed: u64) -> usize {
        let u: f64 = seed::rng(seed).random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Rounding left u above the cumulative sum: take the last positive weight.
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

pub fn select_algorithm(sel: &AlgorithmSelector, seed: u64) -> HyperParams {
    sel.candidates[sel.select_index(seed)].clone()
}
