mod common;

use hypermarg::adf::{relu_moments, relu_moments_raw};
use hypermarg::data::Dataset;
use hypermarg::nn::{self, Activation, LossKind, ModelSpec, OutputHead, ParamVector};
use hypermarg::optim::{self, BatchMode, HyperParams, Iterates, TraceConfig, TraceMode};
use hypermarg::predictive::{self, gaussian_nll};
use proptest::prelude::*;

use common::uniform_vec;

fn full_batch_loss(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> f64 {
    let batch: Vec<_> = data.inputs().zip(data.targets()).collect();
    nn::loss_and_grad(spec, theta, &batch, LossKind::Mse).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // A linear model under MSE is a strictly convex quadratic when the
    // design has full column rank.
    #[test]
    fn small_step_sgd_never_increases_full_batch_loss(seed in 0u64..100_000, d in 1usize..4) {
        let n = 12;
        let x = uniform_vec(seed, n * d, -1.0, 1.0);
        let y = uniform_vec(seed ^ 7, n, -1.0, 1.0);
        let data = Dataset::new("quad", d, 1, x, y).unwrap();
        let spec = ModelSpec::new(vec![d, 1], Activation::Identity, OutputHead::Regression, 0.0).unwrap();
        let theta0 = nn::init_params(&spec, seed);
        let h = HyperParams::sgd(0.02, n);
        let trace_cfg = TraceConfig { cadence: Some(1), burn_in: Some(0), mode: TraceMode::Snapshots };
        let trace = optim::train(&spec, &theta0, &data, &h, 200, &trace_cfg).unwrap();
        let Iterates::Snapshots(iterates) = trace.iterates else { unreachable!() };
        let mut prev = full_batch_loss(&spec, &theta0, &data);
        for theta in &iterates {
            let cur = full_batch_loss(&spec, theta, &data);
            prop_assert!(cur <= prev + 1e-12, "loss rose from {prev} to {cur}");
            prev = cur;
        }
    }

    #[test]
    fn relu_mean_dominates_zero_and_mu(mu in -20.0f64..20.0, sigma in 0.0f64..10.0) {
        let (m, v) = relu_moments(mu, sigma * sigma);
        prop_assert!(m >= 0.0 && m >= mu - 1e-12);
        prop_assert!(v >= 0.0);
        prop_assert!(relu_moments_raw(mu, sigma * sigma).1 >= -1e-12 * (1.0 + mu * mu));
    }

    #[test]
    fn relu_mean_nondecreasing_in_mu(mu in -10.0f64..10.0, dmu in 0.0f64..2.0, sigma in 0.01f64..5.0) {
        let (a, _) = relu_moments(mu, sigma * sigma);
        let (b, _) = relu_moments(mu + dmu, sigma * sigma);
        prop_assert!(b >= a - 1e-14);
    }

    #[test]
    fn metrics_ignore_test_order(seed in 0u64..100_000, n in 2usize..40, rot in 1usize..40) {
        let p = uniform_vec(seed, n, -3.0, 3.0);
        let t = uniform_vec(seed ^ 3, n, -3.0, 3.0);
        let probs: Vec<Vec<f64>> = uniform_vec(seed ^ 5, n, 0.0, 1.0).into_iter().map(|q| vec![q, 1.0 - q]).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 2).collect();
        let r = rot % n;
        let rotate = |v: &[f64]| [&v[r..], &v[..r]].concat();
        let (pr, tr) = (rotate(&p), rotate(&t));
        let probs_r: Vec<Vec<f64>> = probs[r..].iter().chain(&probs[..r]).cloned().collect();
        let labels_r: Vec<usize> = labels[r..].iter().chain(&labels[..r]).copied().collect();

        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        prop_assert!(close(predictive::rmse(&p, &t).unwrap(), predictive::rmse(&pr, &tr).unwrap()));
        prop_assert_eq!(predictive::accuracy(&probs, &labels).unwrap(), predictive::accuracy(&probs_r, &labels_r).unwrap());
        prop_assert!(close(
            predictive::nll_classification(&probs, &labels).unwrap(),
            predictive::nll_classification(&probs_r, &labels_r).unwrap()
        ));
    }

    #[test]
    fn gaussian_nll_minimized_at_squared_residual(r in 0.01f64..10.0, f in 0.05f64..20.0) {
        let best = gaussian_nll(r, r * r);
        prop_assume!((f - 1.0).abs() > 1e-3);
        prop_assert!(gaussian_nll(r, f * r * r) > best);
    }
}

#[test]
fn epoch_shuffle_first_batch_is_uniform() {
    let (n_b, draws) = (5usize, 20_000usize);
    let mut counts = vec![0usize; n_b];
    for seed in 0..draws as u64 {
        let plan = optim::make_batch_plan(50, 10, seed, BatchMode::EpochShuffle, 1).unwrap();
        counts[plan.order[0]] += 1;
    }
    let p = 1.0 / n_b as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "count {c}");
    }
}

#[test]
fn uniform_iid_steps_cover_batches_evenly() {
    let plan = optim::make_batch_plan(40, 10, 3, BatchMode::UniformIid, 40_000).unwrap();
    let mut counts = [0usize; 4];
    plan.order.iter().for_each(|&b| counts[b] += 1);
    let sigma = (40_000.0f64 * 0.25 * 0.75).sqrt();
    assert!(counts.iter().all(|&c| (c as f64 - 10_000.0).abs() < 4.0 * sigma));
}
