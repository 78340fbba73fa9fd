//! Experiment runner: sweeps marginalization labels over datasets and
//! folds and writes per-cell results.

mod config;
mod output;

pub use config::{parse_config, DatasetSpec, ExperimentConfig};
pub use output::{summarize, write_results, SummaryRow};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::adf::{self, GaussianMoments, ParamMoments};
use crate::data::{self, Dataset, FoldSplit, Standardizer};
use crate::error::{Error, Result};
use crate::marginals::{self, Budget, SampleSet, TrainSetup, Variable};
use crate::nn::{ModelSpec, OutputHead};
use crate::predictive::{self, NoiseModel, PredictiveStats};
use crate::seed::{derive_seed, Tag};

/// Method name written for the empty label.
pub const CLASSICAL: &str = "classical";

/// Suffix for rows evaluated by moment propagation instead of sampling.
pub const ADF_SUFFIX: &str = "(adf)";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    pub nll: f64,
    /// RMSE in original target units for regression, accuracy for classification.
    pub metric: f64,
    pub ensemble_size: usize,
    pub models_trained: usize,
    pub wall_time_s: f64,
}

/// Test metrics of the first `ensemble_size` members, averaged over folds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub dataset: String,
    pub method: String,
    pub ensemble_size: usize,
    pub nll: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub dataset: String,
    pub method: String,
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    pub raw: Vec<ResultRow>,
    pub trend: Vec<TrendRow>,
    pub failures: Vec<Failure>,
}

/// A train/test pair in standardized units plus what is needed to map back.
struct Cell {
    fold: usize,
    scaler: Standardizer,
    train: Dataset,
    test: Dataset,
    /// Test targets in original units.
    test_raw: Dataset,
}

fn method_name(label: &str) -> String {
    if label.is_empty() {
        CLASSICAL.to_string()
    } else {
        label.to_string()
    }
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    match &cfg.dataset {
        DatasetSpec::Toy => "toy".into(),
        DatasetSpec::TwoBlob { .. } => "two_blob".into(),
        DatasetSpec::File { path, .. } => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into()),
    }
}

fn make_cell(fold: usize, split: Option<&FoldSplit>, train: Dataset, test: Dataset) -> Cell {
    let (train, test) = match split {
        Some(f) => (train.subset(&f.train), test.subset(&f.test)),
        None => (train, test),
    };
    let scaler = Standardizer::fit(&train);
    Cell {
        fold,
        train: scaler.transform(&train),
        test: scaler.transform(&test),
        test_raw: test,
        scaler,
    }
}

fn build_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let data_seed = |i| derive_seed(cfg.seed, Tag::Data, i);
    Ok(match &cfg.dataset {
        DatasetSpec::Toy => vec![make_cell(0, None, data::toy_cubic(data_seed(0)), data::toy_cubic_testgrid())],
        DatasetSpec::TwoBlob { n_train, n_test } => vec![make_cell(
            0,
            None,
            data::two_blob_classification(data_seed(0), *n_train)?,
            data::two_blob_classification(data_seed(1), *n_test)?,
        )],
        DatasetSpec::File {
            path,
            target_cols,
            target_select,
            delimiter,
            folds,
            split_seed,
        } => {
            let mut full = data::load_delimited(path, *target_cols, *delimiter)?;
            if let Some(cols) = target_select {
                full = full.select_targets(cols)?;
            }
            let split_seed = split_seed.unwrap_or_else(|| derive_seed(cfg.seed, Tag::Split, 0));
            data::make_folds(full.len(), *folds, split_seed)?
                .iter()
                .map(|f| make_cell(f.fold_index, Some(f), full.clone(), full.clone()))
                .collect()
        }
    })
}

/// Test NLL per point and the task metric for predictive statistics on `cell.test`.
fn score(cell: &Cell, stats: &[PredictiveStats], noise: Option<NoiseModel>) -> Result<(f64, f64)> {
    match noise {
        Some(noise) => {
            let log_scale: f64 = cell.scaler.y_std.iter().map(|s| s.ln()).sum();
            let nll = stats
                .iter()
                .zip(cell.test.targets())
                .map(|(s, y)| predictive::nll_gaussian(y, s, &noise) + log_scale)
                .sum::<f64>()
                / stats.len() as f64;
            let preds: Vec<f64> = stats.iter().flat_map(|s| cell.scaler.inverse_target(&s.mean)).collect();
            let targets: Vec<f64> = cell.test_raw.targets().flatten().copied().collect();
            Ok((nll, predictive::rmse(&preds, &targets)?))
        }
        None => {
            let probs: Vec<Vec<f64>> = stats
                .iter()
                .map(|s| s.probs.clone().unwrap_or_else(|| s.mean.clone()))
                .collect();
            let labels = cell.test.labels().ok_or(Error::UnsupportedHead)?;
            Ok((
                predictive::nll_classification(&probs, labels)?,
                predictive::accuracy(&probs, labels)?,
            ))
        }
    }
}

fn evaluate(spec: &ModelSpec, set: &SampleSet, cell: &Cell) -> Result<(f64, f64)> {
    let stats = predictive::predict_dataset(spec, set, &cell.test)?;
    let noise = match spec.head() {
        OutputHead::Regression => Some(predictive::fit_noise(spec, set, &cell.train)?),
        OutputHead::Classification => None,
    };
    score(cell, &stats, noise)
}

/// Gaussian mixture over the per-model moment-propagated predictions.
fn adf_stats(spec: &ModelSpec, set: &SampleSet, data: &Dataset) -> Result<Vec<PredictiveStats>> {
    let params: Vec<ParamMoments> = set
        .models
        .iter()
        .map(|m| match &m.posterior {
            Some(p) => ParamMoments::from(p),
            None => ParamMoments::point(&m.final_params),
        })
        .collect();
    data.inputs()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x| {
            let input = GaussianMoments::deterministic(x);
            let outs = params
                .iter()
                .map(|p| adf::adf_forward(spec, p, &input))
                .collect::<Result<Vec<_>>>()?;
            let k = outs.len() as f64;
            let m = spec.output_dim();
            let mean: Vec<f64> = (0..m).map(|c| outs.iter().map(|o| o.mean[c]).sum::<f64>() / k).collect();
            let var = (0..m)
                .map(|c| {
                    outs.iter()
                        .map(|o| o.var[c] + (o.mean[c] - mean[c]).powi(2))
                        .sum::<f64>()
                        / k
                })
                .collect();
            Ok(PredictiveStats {
                mean,
                var,
                probs: None,
                k: outs.len(),
            })
        })
        .collect()
}

fn evaluate_adf(spec: &ModelSpec, set: &SampleSet, cell: &Cell) -> Result<(f64, f64)> {
    let train_stats = adf_stats(spec, set, &cell.train)?;
    let noise = NoiseModel::from_residuals(train_stats.iter().map(|s| &s.mean[..]), cell.train.targets());
    score(cell, &adf_stats(spec, set, &cell.test)?, Some(noise))
}

/// `(method, ensemble size)`.
type TrendKey = (String, usize);
/// Summed nll, summed metric and fold count.
type TrendSums = (f64, f64, usize);

struct CellOutput {
    rows: Vec<ResultRow>,
    /// `(method, ensemble_size, nll, metric)`.
    trend: Vec<(String, usize, f64, f64)>,
}

fn run_cell(cfg: &ExperimentConfig, dataset: &str, cell: &Cell, label: &str) -> Result<CellOutput> {
    let start = Instant::now();
    // Common random numbers across labels: the seed ignores the label.
    let cell_seed = derive_seed(cfg.seed, Tag::Cell, cell.fold as u64);
    let mspec = cfg.marginalization(label, cell_seed)?;
    let spec = cfg.model_spec(cell.train.n_inputs(), cell.train.n_outputs())?;
    let mut base = cfg.base.clone();
    if !cfg.batch_size_explicit {
        base.batch_size = base.batch_size.min(cell.train.len());
    }
    let mut setup = TrainSetup::new(&spec, &cell.train, &base, Budget::Epochs(cfg.epochs));
    setup.trace = cfg.trace;
    setup.prior = cfg.prior.as_ref();
    setup.selector = cfg.selector.as_ref();

    let set = marginals::draw_param_samples(&mspec, &setup)?;
    let (nll, metric) = evaluate(&spec, &set, cell)?;
    let elapsed = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let method = method_name(label);
    let row = |method: String, nll, metric, ensemble_size, wall_time_s| ResultRow {
        dataset: dataset.to_string(),
        method,
        fold: cell.fold,
        seed: cfg.seed,
        nll,
        metric,
        ensemble_size,
        models_trained: set.models.len(),
        wall_time_s,
    };
    let mut out = CellOutput {
        rows: vec![row(method.clone(), nll, metric, set.len(), elapsed)],
        trend: Vec::new(),
    };

    if cfg.trend {
        for k in 1..=set.members {
            let (nll, metric) = if k == set.members {
                (nll, metric)
            } else {
                evaluate(&spec, &set.prefix(k), cell)?
            };
            out.trend.push((method.clone(), k, nll, metric));
        }
    }

    if cfg.adf && spec.head() == OutputHead::Regression && mspec.is_selected(Variable::T) {
        let start = Instant::now();
        let (nll, metric) = evaluate_adf(&spec, &set, cell)?;
        let adf_time = if cfg.timing {
            elapsed + start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        out.rows
            .push(row(format!("{label}{ADF_SUFFIX}"), nll, metric, set.models.len(), adf_time));
    }
    Ok(out)
}

/// Runs every `(fold, label)` cell. With `skip_failures`, failed cells are
/// recorded and the sweep continues; otherwise the first failure aborts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?
            .install(|| run_all(cfg)),
        None => run_all(cfg),
    }
}

fn run_all(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let dataset = dataset_name(cfg);
    let cells = build_cells(cfg)?;
    let mut results = ExperimentResults::default();
    let mut trend: Vec<(TrendKey, TrendSums)> = Vec::new();

    for cell in &cells {
        for label in &cfg.sweep {
            match run_cell(cfg, &dataset, cell, label) {
                Ok(out) => {
                    results.raw.extend(out.rows);
                    for (method, k, nll, metric) in out.trend {
                        let key = (method, k);
                        match trend.iter_mut().find(|(kk, _)| *kk == key) {
                            Some((_, acc)) => {
                                acc.0 += nll;
                                acc.1 += metric;
                                acc.2 += 1;
                            }
                            None => trend.push((key, (nll, metric, 1))),
                        }
                    }
                }
                Err(e) => {
                    let e = Error::Cell {
                        fold: cell.fold,
                        label: method_name(label),
                        source: Box::new(e),
                    };
                    if !cfg.skip_failures {
                        return Err(e);
                    }
                    results.failures.push(Failure {
                        dataset: dataset.clone(),
                        method: method_name(label),
                        fold: cell.fold,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    results.trend = trend
        .into_iter()
        .map(|((method, ensemble_size), (nll, metric, n))| TrendRow {
            dataset: dataset.clone(),
            method,
            ensemble_size,
            nll: nll / n as f64,
            metric: metric / n as f64,
        })
        .collect();
    Ok(results)
}

/// Parses `path`, runs the sweep and writes the result files into the
/// configured output directory.
pub fn run_config_file(path: &Path) -> Result<ExperimentResults> {
    let cfg = parse_config(&std::fs::read_to_string(path)?)?;
    let results = run_experiment(&cfg)?;
    write_results(&results, &cfg.output_dir)?;
    Ok(results)
}
