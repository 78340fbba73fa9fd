//! Approximate marginalizers over the training random variables.
//!
//! * `T`: diagonal Gaussian fitted to post-burn-in iterates (SWAG).
//! * `THETA0`: independent Glorot initializations (deep ensembles).
//! * `H`: retraining under draws from a hyperparameter prior.
//! * `ALG`: retraining under a categorical choice of algorithm template.
//! * `M_THETA`: Bernoulli weight masks applied to trained parameters.
//!
//! [`draw_param_samples`] combines any subset of them.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, ParamVector};
use crate::optim::{
    self, num_batches, AlgorithmSelector, HyperParams, Iterates, ScheduleSpec, TraceConfig,
    TrainTrace,
};
use crate::seed::{self, derive_seed, Tag};

pub const VAR_FLOOR: f64 = 1e-30;

/// Diagonal Gaussian over parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SwagPosterior {
    pub mean: ParamVector,
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn swag_fit(trace: &TrainTrace) -> Result<SwagPosterior> {
    let count = trace.count();
    if count < 2 {
        return Err(Error::InsufficientTrace { got: count });
    }
    let n = count as f64;
    let (mean, var) = match &trace.iterates {
        Iterates::Snapshots(snaps) => {
            let d = snaps[0].len();
            let mut mean = vec![0.0; d];
            for s in snaps {
                for (m, v) in mean.iter_mut().zip(s.as_slice()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; d];
            for s in snaps {
                for ((acc, v), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        }
        Iterates::Streaming(r) => (r.mean.clone(), r.m2.iter().map(|s| s / n).collect()),
    };
    Ok(SwagPosterior {
        mean: ParamVector::new(mean),
        var: var.into_iter().map(|v| v.max(VAR_FLOOR)).collect(),
        count,
    })
}

impl SwagPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        ParamVector::new(
            self.mean
                .as_slice()
                .iter()
                .zip(&self.var)
                .map(|(m, v)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + v.sqrt() * z
                })
                .collect(),
        )
    }

    /// Text record: a version line, `d`, `count`, then the mean and variance rows.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "swag-posterior 1")?;
        writeln!(w, "d {}", self.dim())?;
        writeln!(w, "count {}", self.count)?;
        for (key, values) in [("mean", self.mean.as_slice()), ("var", &self.var[..])] {
            write!(w, "{key}")?;
            for v in values {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let bad = |msg: &str| Error::PosteriorFormat(msg.to_string());
        let mut lines = r.lines();
        let mut next = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing '{key}' line")))??;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(&format!("expected '{key}' line")))?;
            Ok(rest.trim().to_string())
        };
        if next("swag-posterior")? != "1" {
            return Err(bad("unsupported layout version"));
        }
        let d: usize = next("d")?.parse().map_err(|_| bad("bad dimension"))?;
        let count: usize = next("count")?.parse().map_err(|_| bad("bad count"))?;
        let mut row = |key: &str| -> Result<Vec<f64>> {
            let values = next(key)?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad {key} value"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != d {
                return Err(bad(&format!("{key} row has {} values, expected {d}", values.len())));
            }
            Ok(values)
        };
        let mean = row("mean")?;
        let var = row("var")?;
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(bad("negative variance"));
        }
        Ok(Self {
            mean: ParamVector::new(mean),
            var,
            count,
        })
    }
}

pub fn swag_sample(post: &SwagPosterior, seed: u64) -> ParamVector {
    post.sample(seed)
}

/// Bernoulli keep-mask aligned with the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub bits: Vec<u8>,
    pub keep_prob: Vec<f64>,
}

impl DropoutMask {
    pub fn ones(d: usize) -> Self {
        Self {
            bits: vec![1; d],
            keep_prob: vec![1.0; d],
        }
    }

    /// `theta ⊙ mask`, without rescaling kept weights.
    pub fn apply(&self, theta: &ParamVector) -> ParamVector {
        ParamVector::new(
            theta
                .as_slice()
                .iter()
                .zip(&self.bits)
                .map(|(v, &b)| if b == 1 { *v } else { 0.0 })
                .collect(),
        )
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Weights that read hidden activations (every layer after the first) are
/// kept with probability `1 - dropout_rate`; biases and first-layer weights
/// are always kept.
pub fn sample_mask(spec: &ModelSpec, dropout_rate: f64, seed: u64) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Precondition(format!(
            "dropout rate must lie in [0, 1), got {dropout_rate}"
        )));
    }
    let d = nn::param_dim(spec);
    let mut mask = DropoutMask::ones(d);
    if dropout_rate == 0.0 {
        return Ok(mask);
    }
    let keep = 1.0 - dropout_rate;
    let mut rng = seed::rng(seed);
    for layer in spec.layers().iter().skip(1) {
        for j in layer.weight_offset..layer.bias_offset {
            mask.keep_prob[j] = keep;
            mask.bits[j] = u8::from(rng.random::<f64>() < keep);
        }
    }
    Ok(mask)
}

/// Distribution `p(h)` over training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperPrior {
    Fixed(HyperParams),
    /// Constant step size `alpha ~ N(mean, (mean / 100)^2)`.
    LrGaussian { template: HyperParams, mean: f64 },
    /// Ramp endpoints `alpha_u ~ U[alpha_u.0, alpha_u.1]`, `alpha_l ~ U[alpha_l.0, alpha_l.1]`.
    LrRampUniform {
        template: HyperParams,
        alpha_u: (f64, f64),
        alpha_l: (f64, f64),
    },
    /// Uniform over a finite list of `(step size, batch size)` points.
    Grid(Vec<HyperParams>),
}

const MAX_REJECTIONS: usize = 100;

impl HyperPrior {
    pub fn template(&self) -> &HyperParams {
        match self {
            HyperPrior::Fixed(t)
            | HyperPrior::LrGaussian { template: t, .. }
            | HyperPrior::LrRampUniform { template: t, .. } => t,
            HyperPrior::Grid(points) => &points[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HyperPrior::Fixed(h) => h.lr.validate(),
            HyperPrior::LrGaussian { mean, .. } if *mean > 0.0 && mean.is_finite() => Ok(()),
            HyperPrior::LrGaussian { mean, .. } => Err(Error::PriorMisconfigured(format!(
                "gaussian step-size prior needs a positive mean, got {mean}"
            ))),
            HyperPrior::LrRampUniform {
                template,
                alpha_u,
                alpha_l,
            } => {
                if !matches!(template.lr, ScheduleSpec::SwaRamp { .. }) {
                    return Err(Error::PriorMisconfigured(
                        "ramp prior needs a ramp-schedule template".into(),
                    ));
                }
                if !(alpha_u.0 <= alpha_u.1 && alpha_l.0 <= alpha_l.1 && alpha_l.0 > 0.0 && alpha_l.1 < alpha_u.0) {
                    return Err(Error::PriorMisconfigured(
                        "ramp prior needs 0 < alpha_l ranges < alpha_u ranges".into(),
                    ));
                }
                Ok(())
            }
            HyperPrior::Grid(points) if points.is_empty() => {
                Err(Error::PriorMisconfigured("empty hyperparameter grid".into()))
            }
            HyperPrior::Grid(points) => points.iter().try_for_each(|p| p.lr.validate()),
        }
    }

    /// Draws the varying fields onto `base`; every other field of `base` is kept.
    ///
    /// Grid priors enumerate their support: draw `index` takes point
    /// `index mod len`, so consecutive draws cover the grid evenly.
    pub fn draw_onto(&self, base: &HyperParams, index: u64, seed: u64) -> Result<HyperParams> {
        self.validate()?;
        let mut h = base.clone();
        let mut rng = seed::rng(seed);
        match self {
            HyperPrior::Fixed(t) => h = t.clone(),
            HyperPrior::LrGaussian { mean, .. } => {
                let dist = Normal::new(*mean, mean / 100.0).unwrap();
                let alpha = (0..MAX_REJECTIONS)
                    .map(|_| dist.sample(&mut rng))
                    .find(|a| *a > 0.0)
                    .ok_or_else(|| {
                        Error::PriorMisconfigured(format!(
                            "{MAX_REJECTIONS} consecutive nonpositive step sizes"
                        ))
                    })?;
                h.lr = ScheduleSpec::Constant { alpha };
            }
            HyperPrior::LrRampUniform {
                template,
                alpha_u,
                alpha_l,
            } => {
                let ScheduleSpec::SwaRamp { n_e, .. } = template.lr else {
                    unreachable!("validated above")
                };
                let u = rng.sample(Uniform::new_inclusive(alpha_u.0, alpha_u.1).unwrap());
                let l = rng.sample(Uniform::new_inclusive(alpha_l.0, alpha_l.1).unwrap());
                h.lr = ScheduleSpec::SwaRamp {
                    alpha_u: u,
                    alpha_l: l,
                    n_e,
                };
            }
            HyperPrior::Grid(points) => {
                let p = &points[(index % points.len() as u64) as usize];
                h.lr = p.lr;
                h.batch_size = p.batch_size;
            }
        }
        Ok(h)
    }
}

/// One draw of `h`. Fixed priors return their template unchanged; grid
/// priors pick a point uniformly at random.
pub fn sample_hyper(prior: &HyperPrior, seed: u64) -> Result<HyperParams> {
    let index = match prior {
        HyperPrior::Grid(points) => seed::rng(seed).random_range(0..points.len() as u64),
        _ => 0,
    };
    prior.draw_onto(prior.template(), index, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    T,
    Theta0,
    H,
    MTheta,
    Alg,
}

impl Variable {
    pub const ALL: [Variable; 5] = [
        Variable::T,
        Variable::Theta0,
        Variable::H,
        Variable::MTheta,
        Variable::Alg,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Variable::T => "t",
            Variable::Theta0 => "theta0",
            Variable::H => "h",
            Variable::MTheta => "m_theta",
            Variable::Alg => "alg",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.token() == token)
    }
}

/// Per-variable sample counts used when a variable is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleCounts {
    /// SWAG draws per trained model.
    pub t: usize,
    /// Ensemble members.
    pub theta0: usize,
    /// Hyperparameter draws.
    pub h: usize,
    /// Masks per parameter sample.
    pub m_theta: usize,
    /// Algorithm draws.
    pub alg: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self {
            t: 20,
            theta0: 5,
            h: 5,
            m_theta: 10,
            alg: 2,
        }
    }
}

/// Which variables are marginalized and with how many samples each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginalizationSpec {
    pub t: Option<usize>,
    pub theta0: Option<usize>,
    pub h: Option<usize>,
    pub m_theta: Option<usize>,
    pub alg: Option<usize>,
    pub master_seed: u64,
    /// Reuse the same initializations across hyperparameter and algorithm
    /// draws instead of drawing a fresh `(theta0, h)` pair per model.
    pub cross_product: bool,
}

impl MarginalizationSpec {
    /// Classical training: a single point mass at the final iterate.
    pub fn classical(master_seed: u64) -> Self {
        Self {
            t: None,
            theta0: None,
            h: None,
            m_theta: None,
            alg: None,
            master_seed,
            cross_product: false,
        }
    }

    pub fn with(mut self, var: Variable, count: usize) -> Self {
        *self.slot(var) = Some(count);
        self
    }

    fn slot(&mut self, var: Variable) -> &mut Option<usize> {
        match var {
            Variable::T => &mut self.t,
            Variable::Theta0 => &mut self.theta0,
            Variable::H => &mut self.h,
            Variable::MTheta => &mut self.m_theta,
            Variable::Alg => &mut self.alg,
        }
    }

    pub fn count(&self, var: Variable) -> Option<usize> {
        match var {
            Variable::T => self.t,
            Variable::Theta0 => self.theta0,
            Variable::H => self.h,
            Variable::MTheta => self.m_theta,
            Variable::Alg => self.alg,
        }
    }

    pub fn selected(&self) -> Vec<Variable> {
        Variable::ALL
            .into_iter()
            .filter(|&v| self.count(v).is_some())
            .collect()
    }

    pub fn is_selected(&self, var: Variable) -> bool {
        self.count(var).is_some()
    }

    /// Parses a `+`-joined label such as `"t+theta0"`; the empty label is
    /// classical training.
    pub fn from_label(label: &str, counts: &SampleCounts, master_seed: u64) -> Result<Self> {
        let mut spec = Self::classical(master_seed);
        let label = label.trim();
        if label.is_empty() {
            return Ok(spec);
        }
        for token in label.split('+') {
            let token = token.trim();
            let var = Variable::from_token(token).ok_or_else(|| {
                Error::Precondition(format!(
                    "unknown marginalization '{token}' (expected t, theta0, h, m_theta or alg)"
                ))
            })?;
            if spec.is_selected(var) {
                return Err(Error::Precondition(format!("'{token}' listed twice")));
            }
            let n = match var {
                Variable::T => counts.t,
                Variable::Theta0 => counts.theta0,
                Variable::H => counts.h,
                Variable::MTheta => counts.m_theta,
                Variable::Alg => counts.alg,
            };
            spec = spec.with(var, n);
        }
        Ok(spec)
    }

    /// Canonical label in fixed variable order.
    pub fn label(&self) -> String {
        self.selected()
            .into_iter()
            .map(Variable::token)
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.selected() {
            if self.count(v) == Some(0) {
                return Err(Error::Precondition(format!(
                    "sample count for '{}' must be at least 1",
                    v.token()
                )));
            }
        }
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.theta0.unwrap_or(1)
    }

    pub fn models_to_train(&self) -> usize {
        self.members() * self.h.unwrap_or(1) * self.alg.unwrap_or(1)
    }

    pub fn expected_samples(&self) -> usize {
        self.models_to_train() * self.t.unwrap_or(1) * self.m_theta.unwrap_or(1)
    }
}

impl fmt::Display for MarginalizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = self.label();
        if label.is_empty() {
            f.write_str("(classical)")
        } else {
            f.write_str(&label)
        }
    }
}

/// Training length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Iterations(usize),
    /// Converted to iterations per model, since batch size may vary by draw.
    Epochs(usize),
}

impl Budget {
    pub fn iterations(self, n: usize, batch_size: usize) -> usize {
        match self {
            Budget::Iterations(t) => t,
            Budget::Epochs(e) => e * num_batches(n, batch_size.clamp(1, n.max(1))),
        }
    }
}

/// Everything needed to train one model besides its random draws.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub base: &'a HyperParams,
    pub budget: Budget,
    pub trace: TraceConfig,
    pub prior: Option<&'a HyperPrior>,
    pub selector: Option<&'a AlgorithmSelector>,
}

impl<'a> TrainSetup<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, base: &'a HyperParams, budget: Budget) -> Self {
        Self {
            spec,
            data,
            base,
            budget,
            trace: TraceConfig::default(),
            prior: None,
            selector: None,
        }
    }
}

/// `K0` members from independent initializations `derive_seed(seed, Init, k)`,
/// all trained with the same `h`.
pub fn ensemble_train(
    spec: &ModelSpec,
    data: &Dataset,
    h: &HyperParams,
    t: usize,
    k0: usize,
    seed: u64,
    trace: &TraceConfig,
) -> Result<Vec<TrainTrace>> {
    if k0 == 0 {
        return Err(Error::Precondition("ensemble needs at least one member".into()));
    }
    (0..k0)
        .into_par_iter()
        .map(|k| {
            let theta0 = nn::init_params(spec, derive_seed(seed, Tag::Init, k as u64));
            optim::train(spec, &theta0, data, h, t, trace).map_err(|e| Error::Member {
                member: k,
                source: Box::new(e),
            })
        })
        .collect()
}

/// A trained model and the posterior fitted to its trace, if requested.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub index: usize,
    pub member: usize,
    pub hyper: HyperParams,
    pub final_params: ParamVector,
    pub posterior: Option<SwagPosterior>,
}

/// One parameter sample with the masks attached to it (empty when masks
/// are not marginalized).
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub params: ParamVector,
    pub masks: Vec<DropoutMask>,
    pub member: usize,
    pub model: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.masks.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Effective parameter vectors, one per mask.
    pub fn effective(&self) -> Vec<ParamVector> {
        if self.masks.is_empty() {
            vec![self.params.clone()]
        } else {
            self.masks.iter().map(|m| m.apply(&self.params)).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub groups: Vec<ParamGroup>,
    pub models: Vec<TrainedModel>,
    pub members: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Flat `(params, mask)` list.
    pub fn flatten(&self) -> Vec<(ParamVector, Option<DropoutMask>)> {
        self.groups
            .iter()
            .flat_map(|g| {
                if g.masks.is_empty() {
                    vec![(g.params.clone(), None)]
                } else {
                    g.masks.iter().map(|m| (g.params.clone(), Some(m.clone()))).collect()
                }
            })
            .collect()
    }

    /// Samples belonging to the first `k` ensemble members.
    pub fn prefix(&self, k: usize) -> SampleSet {
        SampleSet {
            groups: self.groups.iter().filter(|g| g.member < k).cloned().collect(),
            models: self.models.iter().filter(|m| m.member < k).cloned().collect(),
            members: k.min(self.members),
        }
    }
}

/// Draws parameter samples for every combination selected in `mspec`.
///
/// Models are enumerated as `(member, hyper draw, algorithm draw)`; each is
/// trained once. With `T` selected, `K_t` SWAG samples are drawn per model,
/// otherwise the final iterate is used. With `M_THETA`, `K_m` masks are
/// attached to every parameter sample. The total sample count is the
/// product of the selected counts; the empty spec yields the single final
/// iterate of classical training.
///
/// Unless `cross_product` is set, every model draws its own initialization
/// and hyperparameters; with it, draws along each axis are shared.
pub fn draw_param_samples(mspec: &MarginalizationSpec, setup: &TrainSetup<'_>) -> Result<SampleSet> {
    mspec.validate()?;
    let master = mspec.master_seed;
    let k0 = mspec.members();
    let kh = mspec.h.unwrap_or(1);
    let ka = mspec.alg.unwrap_or(1);
    if mspec.is_selected(Variable::H) && setup.prior.is_none() {
        return Err(Error::PriorMisconfigured("'h' selected without a hyperparameter prior".into()));
    }
    if mspec.is_selected(Variable::Alg) && setup.selector.is_none() {
        return Err(Error::Precondition("'alg' selected without an algorithm selector".into()));
    }
    // Unselected variables stay fixed at draw 0.
    let draw_index = |var: Variable, axis: usize, model: usize| -> u64 {
        match (mspec.is_selected(var), mspec.cross_product) {
            (false, _) => 0,
            (true, true) => axis as u64,
            (true, false) => model as u64,
        }
    };

    let n_models = k0 * kh * ka;
    let models: Vec<TrainedModel> = (0..n_models)
        .into_par_iter()
        .map(|idx| -> Result<TrainedModel> {
            let member = idx / (kh * ka);
            let (j, a) = ((idx / ka) % kh, idx % ka);

            let mut h = setup.base.clone();
            if let Some(sel) = setup.selector.filter(|_| mspec.is_selected(Variable::Alg)) {
                let template = optim::select_algorithm(sel, derive_seed(master, Tag::Alg, draw_index(Variable::Alg, a, idx)));
                h.algorithm = template.algorithm;
                h.lr = template.lr;
                h.adam = template.adam;
            }
            if let Some(prior) = setup.prior.filter(|_| mspec.is_selected(Variable::H)) {
                let n = draw_index(Variable::H, j, idx);
                h = prior.draw_onto(&h, n, derive_seed(master, Tag::Hyper, n))?;
                h.batch_seed = derive_seed(master, Tag::Batch, n + 1);
            }

            let init_seed = derive_seed(master, Tag::Init, draw_index(Variable::Theta0, member, idx));
            let theta0 = nn::init_params(setup.spec, init_seed);
            let t = setup.budget.iterations(setup.data.len(), h.batch_size);
            let trace = optim::train(setup.spec, &theta0, setup.data, &h, t, &setup.trace)
                .map_err(|e| Error::Member {
                    member: idx,
                    source: Box::new(e),
                })?;
            let posterior = if mspec.is_selected(Variable::T) {
                Some(swag_fit(&trace).map_err(|e| Error::Member {
                    member: idx,
                    source: Box::new(e),
                })?)
            } else {
                None
            };
            Ok(TrainedModel {
                index: idx,
                member,
                hyper: h,
                final_params: trace.final_params,
                posterior,
            })
        })
        .collect::<Result<_>>()?;

    let kt = mspec.t.unwrap_or(1);
    let mut groups = Vec::with_capacity(n_models * kt);
    for m in &models {
        for s in 0..kt {
            let params = match &m.posterior {
                Some(p) => p.sample(derive_seed(master, Tag::Swag, (m.index * kt + s) as u64)),
                None => m.final_params.clone(),
            };
            groups.push(ParamGroup {
                params,
                masks: Vec::new(),
                member: m.member,
                model: m.index,
            });
        }
    }
    if let Some(km) = mspec.m_theta {
        let rate = setup.spec.dropout_rate();
        for (g, group) in groups.iter_mut().enumerate() {
            group.masks = (0..km)
                .map(|r| sample_mask(setup.spec, rate, derive_seed(master, Tag::Mask, (g * km + r) as u64)))
                .collect::<Result<_>>()?;
        }
    }
    Ok(SampleSet {
        groups,
        models,
        members: k0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{RunningMoments, TraceMode};

    fn trace_of(iterates: &[Vec<f64>]) -> TrainTrace {
        TrainTrace {
            final_params: ParamVector::new(iterates.last().unwrap().clone()),
            iterates: Iterates::Snapshots(iterates.iter().cloned().map(ParamVector::new).collect()),
            t: iterates.len(),
            burn_in: 0,
        }
    }

    #[test]
    fn swag_three_iterates() {
        let post = swag_fit(&trace_of(&[vec![1.0], vec![2.0], vec![3.0]])).unwrap();
        assert_eq!(post.mean.as_slice(), &[2.0]);
        assert!((post.var[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(post.count, 3);
    }

    #[test]
    fn swag_identical_iterates_floor() {
        let post = swag_fit(&trace_of(&vec![vec![0.5, -1.0]; 4])).unwrap();
        assert_eq!(post.var, vec![VAR_FLOOR; 2]);
        let s = post.sample(1);
        for (a, b) in s.as_slice().iter().zip(post.mean.as_slice()) {
            assert!((a - b).abs() <= 6.0 * VAR_FLOOR.sqrt());
        }
    }

    #[test]
    fn swag_needs_two_iterates() {
        assert!(matches!(
            swag_fit(&trace_of(&[vec![1.0]])),
            Err(Error::InsufficientTrace { got: 1 })
        ));
    }

    #[test]
    fn streaming_matches_snapshots() {
        let mut rng = seed::rng(4);
        let its: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0) + 1e3).collect())
            .collect();
        let a = swag_fit(&trace_of(&its)).unwrap();
        let mut r = RunningMoments::new(6);
        its.iter().for_each(|x| r.push(x));
        let b = swag_fit(&TrainTrace {
            final_params: ParamVector::zeros(6),
            iterates: Iterates::Streaming(r),
            t: 50,
            burn_in: 0,
        })
        .unwrap();
        for i in 0..6 {
            assert!((a.mean.as_slice()[i] - b.mean.as_slice()[i]).abs() < 1e-10);
            assert!((a.var[i] - b.var[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_record_round_trip() {
        let post = SwagPosterior {
            mean: ParamVector::new(vec![0.1, -2.5e-7, 3.0]),
            var: vec![1e-30, 0.25, 1.0 / 3.0],
            count: 17,
        };
        let mut buf = Vec::new();
        post.write_to(&mut buf).unwrap();
        assert_eq!(SwagPosterior::read_from(&buf[..]).unwrap(), post);
        let text = String::from_utf8(buf).unwrap().replace("count 17", "count x");
        assert!(SwagPosterior::read_from(text.as_bytes()).is_err());
    }

    #[test]
    fn masks() {
        let spec = ModelSpec::regression(vec![2, 8, 3]).unwrap();
        assert_eq!(sample_mask(&spec, 0.0, 1).unwrap(), DropoutMask::ones(nn::param_dim(&spec)));
        let m = sample_mask(&spec, 0.5, 1).unwrap();
        assert_eq!(m, sample_mask(&spec, 0.5, 1).unwrap());
        let layers = spec.layers();
        assert!(m.bits[..layers[1].weight_offset].iter().all(|&b| b == 1));
        assert!(m.bits[layers[1].bias_offset..].iter().all(|&b| b == 1));
        for (b, p) in m.bits.iter().zip(&m.keep_prob) {
            assert!(*b <= 1);
            if *p == 1.0 {
                assert_eq!(*b, 1);
            }
        }
        assert!(m.kept() < m.bits.len());
        assert!(sample_mask(&spec, 1.0, 1).is_err());
    }

    #[test]
    fn hyper_priors() {
        let base = HyperParams::sgd(0.01, 10);
        assert_eq!(sample_hyper(&HyperPrior::Fixed(base.clone()), 3).unwrap(), base);

        let ramp = HyperParams {
            lr: ScheduleSpec::SwaRamp { alpha_u: 0.05, alpha_l: 0.01, n_e: 300 },
            ..base.clone()
        };
        let prior = HyperPrior::LrRampUniform {
            template: ramp,
            alpha_u: (0.04, 0.06),
            alpha_l: (0.008, 0.012),
        };
        for s in 0..1000 {
            match sample_hyper(&prior, s).unwrap().lr {
                ScheduleSpec::SwaRamp { alpha_u, alpha_l, n_e } => {
                    assert!((0.04..=0.06).contains(&alpha_u));
                    assert!((0.008..=0.012).contains(&alpha_l));
                    assert_eq!(n_e, 300);
                }
                other => panic!("{other:?}"),
            }
        }
        let bad = HyperPrior::LrGaussian { template: base.clone(), mean: -1.0 };
        assert!(matches!(sample_hyper(&bad, 0), Err(Error::PriorMisconfigured(_))));

        let grid = HyperPrior::Grid(vec![HyperParams::sgd(0.04, 1), HyperParams::sgd(0.05, 6)]);
        let picks: Vec<usize> = (0..4).map(|i| grid.draw_onto(&base, i, 0).unwrap().batch_size).collect();
        assert_eq!(picks, vec![1, 6, 1, 6]);
    }

    #[test]
    fn label_grammar() {
        let c = SampleCounts::default();
        let m = MarginalizationSpec::from_label("t+theta0", &c, 0).unwrap();
        assert_eq!(m.selected(), vec![Variable::T, Variable::Theta0]);
        assert_eq!(m.label(), "t+theta0");
        assert_eq!(MarginalizationSpec::from_label("theta0+t", &c, 0).unwrap().label(), "t+theta0");
        assert!(MarginalizationSpec::from_label("", &c, 0).unwrap().selected().is_empty());
        assert!(MarginalizationSpec::from_label("t+x", &c, 0).is_err());
        assert!(MarginalizationSpec::from_label("t+t", &c, 0).is_err());
    }

    fn small_setup() -> (ModelSpec, Dataset, HyperParams) {
        let spec = ModelSpec::regression(vec![1, 8, 1]).unwrap().with_dropout(0.2).unwrap();
        let data = crate::data::toy_cubic(1);
        let s = crate::data::Standardizer::fit(&data);
        (spec, s.transform(&data), HyperParams::sgd(0.01, 5))
    }

    #[test]
    fn product_counting() {
        let (spec, data, h) = small_setup();
        let setup = TrainSetup::new(&spec, &data, &h, Budget::Epochs(4));
        let classical = MarginalizationSpec::classical(7);
        let set = draw_param_samples(&classical, &setup).unwrap();
        assert_eq!(set.len(), 1);
        let theta0 = nn::init_params(&spec, derive_seed(7, Tag::Init, 0));
        let direct = optim::train(&spec, &theta0, &data, &h, 8, &TraceConfig::default()).unwrap();
        assert_eq!(set.groups[0].params, direct.final_params);

        let m = classical.clone().with(Variable::Theta0, 5).with(Variable::T, 4);
        assert_eq!(draw_param_samples(&m, &setup).unwrap().len(), 20);
        let m = m.with(Variable::MTheta, 3);
        let set = draw_param_samples(&m, &setup).unwrap();
        assert_eq!((set.len(), set.models.len()), (60, 5));
    }

    #[test]
    fn ensemble_of_one_matches_plain_training() {
        let (spec, data, h) = small_setup();
        let cfg = TraceConfig { mode: TraceMode::Streaming, ..TraceConfig::default() };
        let members = ensemble_train(&spec, &data, &h, 10, 1, 3, &cfg).unwrap();
        let theta0 = nn::init_params(&spec, derive_seed(3, Tag::Init, 0));
        let direct = optim::train(&spec, &theta0, &data, &h, 10, &cfg).unwrap();
        assert_eq!(members, vec![direct]);
        assert_eq!(ensemble_train(&spec, &data, &h, 10, 5, 3, &cfg).unwrap().len(), 5);
        assert!(ensemble_train(&spec, &data, &h, 10, 0, 3, &cfg).is_err());
    }

    #[test]
    fn diverging_member_is_named() {
        let (spec, data, _) = small_setup();
        let h = HyperParams::sgd(1e200, 5);
        match ensemble_train(&spec, &data, &h, 10, 2, 3, &TraceConfig::default()) {
            Err(Error::Member { source, .. }) => {
                assert!(matches!(*source, Error::Divergence { .. }))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_isolation() {
        let (spec, data, h) = small_setup();
        let setup = TrainSetup::new(&spec, &data, &h, Budget::Epochs(2));
        let m = MarginalizationSpec::classical(5).with(Variable::Theta0, 2).with(Variable::MTheta, 2);
        let with_masks = draw_param_samples(&m, &setup).unwrap();
        let mut plain = m.clone();
        plain.m_theta = None;
        let without = draw_param_samples(&plain, &setup).unwrap();
        for (a, b) in with_masks.groups.iter().zip(&without.groups) {
            assert_eq!(a.params, b.params);
        }
        // Adding a member changes no existing mask.
        let bigger = MarginalizationSpec { theta0: Some(3), ..m.clone() };
        let again = draw_param_samples(&bigger, &setup).unwrap();
        for (a, b) in with_masks.groups.iter().zip(&again.groups) {
            assert_eq!(a.masks, b.masks);
        }
    }
}
