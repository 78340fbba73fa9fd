//! Experiment configuration: TOML text with `[section]` headers and
//! `key = value` lines. Unknown keys are rejected and every error carries
//! the line it refers to.
//!
//! ```toml
//! [dataset]
//! kind = "toy"            # toy | two_blob | file
//!
//! [model]
//! hidden = [100]
//!
//! [training]
//! epochs = 100
//! algorithm = "sgd"
//! lr = 0.04
//! batch_size = 1
//!
//! [marginalization]
//! sweep = ["", "t", "theta0", "t+theta0"]
//! theta0 = 20
//! ```

use std::ops::Range;
use std::path::PathBuf;

use serde::Deserialize;
use toml::Spanned;

use crate::data::Delimiter;
use crate::error::{Error, Result};
use crate::marginals::{HyperPrior, MarginalizationSpec, SampleCounts};
use crate::nn::{Activation, LossKind, ModelSpec, OutputHead};
use crate::optim::{
    AdamConfig, Algorithm, AlgorithmSelector, BatchMode, HyperParams, ScheduleSpec, TraceConfig,
    TraceMode,
};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Ten noisy cubic samples for training, the 1000-point grid for testing.
    Toy,
    /// Two Gaussian blobs; separate seeded train and test draws.
    TwoBlob { n_train: usize, n_test: usize },
    /// Delimited numeric file evaluated by k-fold cross-validation.
    File {
        path: PathBuf,
        target_cols: usize,
        target_select: Option<Vec<usize>>,
        delimiter: Delimiter,
        folds: usize,
        split_seed: Option<u64>,
    },
}

impl DatasetSpec {
    pub fn head(&self) -> OutputHead {
        match self {
            DatasetSpec::TwoBlob { .. } => OutputHead::Classification,
            _ => OutputHead::Regression,
        }
    }
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub loss: LossKind,
    pub epochs: usize,
    pub base: HyperParams,
    /// Whether `batch_size` was given explicitly; defaulted sizes are
    /// clamped to the training-set size.
    pub batch_size_explicit: bool,
    pub trace: TraceConfig,
    pub prior: Option<HyperPrior>,
    pub selector: Option<AlgorithmSelector>,
    pub cross_product: bool,
    pub sweep: Vec<String>,
    pub counts: SampleCounts,
    pub adf: bool,
    pub trend: bool,
    pub seed: u64,
    pub threads: Option<usize>,
    pub skip_failures: bool,
    pub output_dir: PathBuf,
    pub timing: bool,
}

impl ExperimentConfig {
    /// Network shape for a dataset with `n_inputs` features and `n_outputs` targets.
    pub fn model_spec(&self, n_inputs: usize, n_outputs: usize) -> Result<ModelSpec> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(n_inputs);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(n_outputs);
        ModelSpec::new(sizes, self.activation, self.dataset.head(), self.dropout_rate)
    }

    pub fn marginalization(&self, label: &str, master_seed: u64) -> Result<MarginalizationSpec> {
        let mut m = MarginalizationSpec::from_label(label, &self.counts, master_seed)?;
        m.cross_product = self.cross_product;
        Ok(m)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: RawDataset,
    #[serde(default)]
    model: RawModel,
    training: RawTraining,
    hyper: Option<RawHyper>,
    algorithms: Option<RawAlgorithms>,
    marginalization: RawMarginalization,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: Spanned<String>,
    path: Option<Spanned<String>>,
    target_cols: Option<usize>,
    target_select: Option<Vec<usize>>,
    delimiter: Option<Spanned<String>>,
    folds: Option<Spanned<usize>>,
    split_seed: Option<u64>,
    n_train: Option<Spanned<usize>>,
    n_test: Option<Spanned<usize>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Spanned<Vec<usize>>>,
    activation: Option<Activation>,
    dropout_rate: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    loss: Option<Spanned<LossKind>>,
    epochs: Spanned<usize>,
    algorithm: Option<Algorithm>,
    schedule: Option<Spanned<String>>,
    lr: Option<Spanned<f64>>,
    alpha_u: Option<f64>,
    alpha_l: Option<f64>,
    batch_size: Option<Spanned<usize>>,
    batch_mode: Option<BatchMode>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
    snapshot_every: Option<Spanned<usize>>,
    burn_in: Option<usize>,
    trace: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    kind: Spanned<String>,
    grid: Option<Vec<(f64, usize)>>,
    lr_mean: Option<f64>,
    alpha_u: Option<(f64, f64)>,
    alpha_l: Option<(f64, f64)>,
    cross_product: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithms {
    candidates: Spanned<Vec<Algorithm>>,
    weights: Spanned<Vec<f64>>,
    lr: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarginalization {
    sweep: Spanned<OneOrMany>,
    t: Option<Spanned<usize>>,
    theta0: Option<Spanned<usize>>,
    h: Option<Spanned<usize>>,
    m_theta: Option<Spanned<usize>>,
    alg: Option<Spanned<usize>>,
    adf: Option<bool>,
    trend: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seed: Option<u64>,
    threads: Option<usize>,
    skip_failures: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    timing: Option<bool>,
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn err<T>(&self, span: Range<usize>, msg: impl Into<String>) -> Result<T> {
        Err(Error::Config {
            line: line_of(self.text, span),
            msg: msg.into(),
        })
    }

    fn positive(&self, v: &Spanned<usize>, key: &str) -> Result<usize> {
        if *v.get_ref() == 0 {
            return self.err(v.span(), format!("{key} must be at least 1"));
        }
        Ok(*v.get_ref())
    }
}

/// Parses and validates an experiment config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map(|s| line_of(text, s)).unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    let cx = Ctx { text };

    let dataset = match raw.dataset.kind.get_ref().as_str() {
        "toy" => DatasetSpec::Toy,
        "two_blob" => {
            let n_train = raw.dataset.n_train.as_ref().map_or(Ok(200), |v| cx.positive(v, "n_train"))?;
            let n_test = raw.dataset.n_test.as_ref().map_or(Ok(1000), |v| cx.positive(v, "n_test"))?;
            for (n, v) in [(n_train, &raw.dataset.n_train), (n_test, &raw.dataset.n_test)] {
                if n % 2 != 0 {
                    let span = v.as_ref().map_or(raw.dataset.kind.span(), |v| v.span());
                    return cx.err(span, "two_blob sizes must be even");
                }
            }
            DatasetSpec::TwoBlob { n_train, n_test }
        }
        "file" => {
            let Some(path) = &raw.dataset.path else {
                return cx.err(raw.dataset.kind.span(), "file datasets need 'path'");
            };
            let delimiter = match raw.dataset.delimiter.as_ref().map(|d| (d.get_ref().as_str(), d.span())) {
                None | Some(("auto", _)) => Delimiter::Auto,
                Some(("comma", _)) => Delimiter::Comma,
                Some(("whitespace", _)) => Delimiter::Whitespace,
                Some((other, span)) => {
                    return cx.err(span, format!("unknown delimiter '{other}' (auto, comma, whitespace)"))
                }
            };
            let folds = raw.dataset.folds.as_ref().map_or(20, |f| *f.get_ref());
            if folds < 2 {
                let span = raw.dataset.folds.as_ref().unwrap().span();
                return cx.err(span, "folds must be at least 2");
            }
            DatasetSpec::File {
                path: PathBuf::from(path.get_ref()),
                target_cols: raw.dataset.target_cols.unwrap_or(1),
                target_select: raw.dataset.target_select.clone(),
                delimiter,
                folds,
                split_seed: raw.dataset.split_seed,
            }
        }
        other => {
            return cx.err(
                raw.dataset.kind.span(),
                format!("unknown dataset kind '{other}' (toy, two_blob, file)"),
            )
        }
    };
    let head = dataset.head();

    let hidden = match &raw.model.hidden {
        Some(h) if h.get_ref().contains(&0) => return cx.err(h.span(), "hidden widths must be positive"),
        Some(h) => h.get_ref().clone(),
        None => vec![50],
    };
    let dropout_rate = match &raw.model.dropout_rate {
        Some(r) if !(0.0..1.0).contains(r.get_ref()) => {
            return cx.err(r.span(), "dropout_rate must lie in [0, 1)")
        }
        Some(r) => *r.get_ref(),
        None => 0.01,
    };

    let t = &raw.training;
    let default_loss = match head {
        OutputHead::Regression => LossKind::Mse,
        OutputHead::Classification => LossKind::CrossEntropy,
    };
    let loss = match &t.loss {
        Some(l) if *l.get_ref() != default_loss => {
            return cx.err(l.span(), format!("loss does not match the {head:?} output head"))
        }
        _ => default_loss,
    };
    let epochs = cx.positive(&t.epochs, "epochs")?;
    let alpha = match &t.lr {
        Some(lr) if lr.get_ref().is_nan() || *lr.get_ref() <= 0.0 => return cx.err(lr.span(), "lr must be positive"),
        Some(lr) => *lr.get_ref(),
        None => 0.01,
    };
    let lr = match t.schedule.as_ref().map(|s| (s.get_ref().as_str(), s.span())) {
        None | Some(("constant", _)) => ScheduleSpec::Constant { alpha },
        Some(("swa_ramp", span)) => {
            let sched = ScheduleSpec::SwaRamp {
                alpha_u: t.alpha_u.unwrap_or(0.05),
                alpha_l: t.alpha_l.unwrap_or(0.01),
                n_e: epochs,
            };
            if let Err(e) = sched.validate() {
                return cx.err(span, e.to_string());
            }
            sched
        }
        Some((other, span)) => return cx.err(span, format!("unknown schedule '{other}' (constant, swa_ramp)")),
    };
    let batch_size = t.batch_size.as_ref().map_or(Ok(100), |b| cx.positive(b, "batch_size"))?;
    let adam = AdamConfig {
        beta1: t.adam_beta1.unwrap_or(0.9),
        beta2: t.adam_beta2.unwrap_or(0.999),
        eps: t.adam_eps.unwrap_or(1e-8),
    };
    let base = HyperParams {
        algorithm: t.algorithm.unwrap_or(Algorithm::Adam),
        lr,
        batch_size,
        batch_seed: 0,
        batch_mode: t.batch_mode.unwrap_or(BatchMode::EpochShuffle),
        adam,
    };
    let trace = TraceConfig {
        cadence: t.snapshot_every.as_ref().map(|c| cx.positive(c, "snapshot_every")).transpose()?,
        burn_in: t.burn_in,
        mode: match t.trace.as_ref().map(|s| (s.get_ref().as_str(), s.span())) {
            None | Some(("streaming", _)) => TraceMode::Streaming,
            Some(("snapshots", _)) => TraceMode::Snapshots,
            Some((other, span)) => return cx.err(span, format!("unknown trace mode '{other}'")),
        },
    };

    let mut cross_product = false;
    let prior = match &raw.hyper {
        None => None,
        Some(h) => {
            cross_product = h.cross_product.unwrap_or(false);
            let prior = match h.kind.get_ref().as_str() {
                "grid" => {
                    let Some(points) = &h.grid else {
                        return cx.err(h.kind.span(), "grid prior needs 'grid = [[lr, batch], ...]'");
                    };
                    HyperPrior::Grid(
                        points
                            .iter()
                            .map(|&(alpha, b)| HyperParams {
                                lr: ScheduleSpec::Constant { alpha },
                                batch_size: b,
                                ..base.clone()
                            })
                            .collect(),
                    )
                }
                "lr_gaussian" => HyperPrior::LrGaussian {
                    template: base.clone(),
                    mean: h.lr_mean.unwrap_or(alpha),
                },
                "lr_ramp_uniform" => HyperPrior::LrRampUniform {
                    template: HyperParams {
                        lr: ScheduleSpec::SwaRamp {
                            alpha_u: 0.05,
                            alpha_l: 0.01,
                            n_e: epochs,
                        },
                        ..base.clone()
                    },
                    alpha_u: h.alpha_u.unwrap_or((0.04, 0.06)),
                    alpha_l: h.alpha_l.unwrap_or((0.008, 0.012)),
                },
                other => {
                    return cx.err(
                        h.kind.span(),
                        format!("unknown prior '{other}' (grid, lr_gaussian, lr_ramp_uniform)"),
                    )
                }
            };
            if let Err(e) = prior.validate() {
                return cx.err(h.kind.span(), e.to_string());
            }
            Some(prior)
        }
    };

    let selector = match &raw.algorithms {
        None => None,
        Some(a) => {
            let algs = a.candidates.get_ref();
            let lrs = a.lr.clone().unwrap_or_else(|| vec![alpha; algs.len()]);
            if lrs.len() != algs.len() {
                return cx.err(a.candidates.span(), "'lr' needs one entry per candidate");
            }
            let candidates = algs
                .iter()
                .zip(lrs)
                .map(|(&algorithm, alpha)| HyperParams {
                    algorithm,
                    lr: ScheduleSpec::Constant { alpha },
                    ..base.clone()
                })
                .collect();
            match AlgorithmSelector::new(candidates, a.weights.get_ref().clone()) {
                Ok(s) => Some(s),
                Err(e) => return cx.err(a.weights.span(), e.to_string()),
            }
        }
    };

    let m = &raw.marginalization;
    let count = |v: &Option<Spanned<usize>>, key: &str, default: usize| -> Result<usize> {
        v.as_ref().map_or(Ok(default), |c| cx.positive(c, key))
    };
    let defaults = SampleCounts::default();
    let counts = SampleCounts {
        t: count(&m.t, "t", defaults.t)?,
        theta0: count(&m.theta0, "theta0", defaults.theta0)?,
        h: count(&m.h, "h", defaults.h)?,
        m_theta: count(&m.m_theta, "m_theta", defaults.m_theta)?,
        alg: count(&m.alg, "alg", defaults.alg)?,
    };
    let sweep_span = m.sweep.span();
    let labels: Vec<&String> = match m.sweep.get_ref() {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v.iter().collect(),
    };
    if labels.is_empty() {
        return cx.err(sweep_span.clone(), "sweep lists no methods");
    }
    let mut sweep = Vec::with_capacity(labels.len());
    for label in labels {
        let parsed = match MarginalizationSpec::from_label(label, &counts, 0) {
            Ok(p) => p,
            Err(e) => return cx.err(sweep_span.clone(), e.to_string()),
        };
        if parsed.h.is_some() && prior.is_none() {
            return cx.err(sweep_span.clone(), "'h' needs a [hyper] section");
        }
        if parsed.alg.is_some() && selector.is_none() {
            return cx.err(sweep_span.clone(), "'alg' needs an [algorithms] section");
        }
        let canonical = parsed.label();
        if sweep.contains(&canonical) {
            return cx.err(sweep_span.clone(), format!("method '{canonical}' listed twice"));
        }
        sweep.push(canonical);
    }

    Ok(ExperimentConfig {
        dataset,
        hidden,
        activation: raw.model.activation.unwrap_or(Activation::Relu),
        dropout_rate,
        loss,
        epochs,
        base,
        batch_size_explicit: t.batch_size.is_some(),
        trace,
        prior,
        selector,
        cross_product,
        sweep,
        counts,
        adf: m.adf.unwrap_or(false),
        trend: m.trend.unwrap_or(true),
        seed: raw.run.seed.unwrap_or(0),
        threads: raw.run.threads,
        skip_failures: raw.run.skip_failures.unwrap_or(false),
        output_dir: PathBuf::from(raw.output.dir.unwrap_or_else(|| "results".into())),
        timing: raw.output.timing.unwrap_or(true),
    })
}
