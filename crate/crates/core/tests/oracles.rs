mod common;

use std::sync::Arc;

use bnn::calibration::{bin_accumulate, fit_temperature, reliability_csv};
use bnn::checkpoint::Checkpoint;
use bnn::data::{split, synth_blobs, Dataset, SplitConfig};
use bnn::laplace::{fisher_accumulate, la_posterior, la_sample};
use bnn::mc_dropout::{mcd_loss_and_grad, mcd_mask, mcd_reparam, Dropout, McdBias};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::model::{evaluate, Model};
use bnn::params::{prior_from_checkpoint, zero_prior, BiasMode, FlatParams, ParamLayout, PriorSpec};
use bnn::predictive::{predict, predict_thetas, probs_at};
use bnn::rng::{standard_normal_vec, stream};
use bnn::sgd::{train_vanilla, SgdConfig};
use bnn::sgld::{sgld_fit, sgld_sample, sgld_step, MomentAccumulator, SgldConfig};
use bnn::vi::{vi_kl, vi_loss_and_grads, Link, ViState};
use common::{numeric_grad, random_batch, random_vec, GaussianMean, LogReg2};
use ndarray::{array, Array2};

fn plain_layout(n: usize) -> Arc<ParamLayout> {
    Arc::new(ParamLayout::new([("w", n, false)]))
}

#[test]
fn vi_kl_matches_monte_carlo() {
    let layout = plain_layout(5);
    let prior = PriorSpec::new(
        vec![0.3, -0.2, 0.0, 1.0, 0.5],
        0.8,
        BiasMode::Informative,
        layout.clone(),
    )
    .unwrap();
    let m = vec![0.1, 0.4, -0.5, 0.9, 0.2];
    let s = [0.5, 0.9, 0.3, 1.2, 0.7];
    let state = ViState::new(
        FlatParams::new(m.clone(), layout).unwrap(),
        s.iter().map(|s: &f64| s.ln()).collect(),
        Link::Exp,
    )
    .unwrap();
    let exact = vi_kl(&state, &prior);

    // E_q[log q(θ) − log p(θ)] from 10⁶ draws; normalizing constants cancel
    // except for the ratio of scales.
    let var = prior.variance();
    let log_ratio: f64 = s.iter().map(|s| (prior.sigma() / s).ln()).sum();
    let n = 1_000_000;
    let mut rng = stream(42, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let eps = standard_normal_vec(&mut rng, 5);
        let mut term = log_ratio;
        for i in 0..5 {
            let theta = m[i] + s[i] * eps[i];
            let d = theta - prior.mean()[i];
            term += -0.5 * eps[i] * eps[i] + 0.5 * d * d / var;
        }
        sum += term;
        sum_sq += term * term;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "MC {mean} ± {se} vs exact {exact}");
}

#[test]
fn exp_link_scale_gradient_vanishes_at_prior_scale() {
    let model = GaussianMean::new(3);
    let m = vec![0.5, -1.0, 2.0];
    // observations at m and zero noise: the data gradient is zero
    let data = GaussianMean::dataset(std::slice::from_ref(&m));
    let sigma = 0.7;
    let prior = zero_prior(model.layout().clone(), sigma, BiasMode::Informative).unwrap();
    let state = ViState::new(
        FlatParams::new(m, model.layout().clone()).unwrap(),
        vec![sigma.ln(); 3],
        Link::Exp,
    )
    .unwrap();
    let lg = vi_loss_and_grads(&model, &state, &prior, &data.as_batch(), 10.0, 2.0, &[0.0; 3], 1.0).unwrap();
    assert!(lg.grad_s_tilde.iter().all(|g| g.abs() < 1e-12), "{:?}", lg.grad_s_tilde);
}

fn mcd_layout() -> Arc<ParamLayout> {
    Arc::new(ParamLayout::new([
        ("W1", 6, false),
        ("b1", 2, true),
        ("W2", 4, false),
        ("b2", 2, true),
    ]))
}

#[test]
fn full_drop_keeps_only_gaussian_biases() {
    let layout = mcd_layout();
    let dropout = Dropout {
        p: 1.0,
        bias: McdBias::Gaussian,
    };
    let z = mcd_mask(&layout, &dropout, &mut stream(1, 0));
    let bias: Vec<f64> = layout.bias_mask().iter().map(|&b| f64::from(u8::from(b))).collect();
    assert_eq!(z, bias);
}

#[test]
fn mask_keep_rate_is_one_minus_p() {
    let layout = mcd_layout();
    let dropout = Dropout::new(0.3, McdBias::Spikymix).unwrap();
    let mut rng = stream(2, 0);
    let draws = 100_000;
    let mut kept = vec![0.0; layout.len()];
    for _ in 0..draws {
        for (k, z) in kept.iter_mut().zip(mcd_mask(&layout, &dropout, &mut rng)) {
            *k += z;
        }
    }
    for (i, k) in kept.iter().enumerate() {
        let rate = k / draws as f64;
        assert!((rate - 0.7).abs() < 0.01, "coordinate {i}: keep rate {rate}");
    }
}

#[test]
fn zero_prior_mean_gives_weight_dropout() {
    let m = random_vec(10, 1.0, 3);
    let z: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
    let theta = mcd_reparam(&m, &[0.0; 10], &z);
    let expected: Vec<f64> = m.iter().zip(&z).map(|(m, z)| m * z).collect();
    assert_eq!(theta, expected);
}

#[test]
fn mcd_loss_is_l2_regularized_dropout_objective() {
    let net = Mlp::new(MlpSpec::new(3, vec![2], 2)).unwrap();
    let layout = net.layout().clone();
    let prior = zero_prior(layout.clone(), 0.5, BiasMode::Informative).unwrap();
    let batch = random_batch(6, 3, 2, 5);
    let m = random_vec(layout.len(), 0.8, 6);
    let (n_total, kld) = (30.0, 4.0);
    for bias in [McdBias::Gaussian, McdBias::Spikymix, McdBias::Ignore] {
        let dropout = Dropout::new(0.25, bias).unwrap();
        let z = mcd_mask(&layout, &dropout, &mut stream(7, 0));
        let (loss, _) = mcd_loss_and_grad(&net, &m, &prior, &dropout, &batch, n_total, kld, &z, 1.0).unwrap();
        // dropped network on the data, plus λ/2·Σ c_i m_i² with λ = kld/(σ²N)
        let theta: Vec<f64> = m.iter().zip(&z).map(|(m, z)| m * z).collect();
        let lambda = kld / (0.25 * n_total);
        let penalty: f64 = m
            .iter()
            .zip(layout.bias_mask())
            .map(|(m, is_bias)| {
                let c = match (is_bias, bias) {
                    (false, _) | (true, McdBias::Spikymix) => 0.75,
                    (true, McdBias::Gaussian) => 1.0,
                    (true, McdBias::Ignore) => 0.0,
                };
                c * m * m
            })
            .sum();
        let expected = net.loss(&theta, &batch, 1.0).unwrap() + 0.5 * lambda * penalty;
        assert!(
            (loss - expected).abs() < 1e-12 * expected.abs().max(1.0),
            "{bias:?}: {loss} vs {expected}"
        );
    }
}

#[test]
fn everything_dropped_leaves_no_weight_gradient() {
    let net = Mlp::new(MlpSpec::new(3, vec![2], 2)).unwrap();
    let layout = net.layout().clone();
    let prior = zero_prior(layout.clone(), 1.0, BiasMode::Informative).unwrap();
    let dropout = Dropout {
        p: 1.0,
        bias: McdBias::Spikymix,
    };
    let z = vec![0.0; layout.len()];
    let m = random_vec(layout.len(), 1.0, 8);
    let (_, grad) = mcd_loss_and_grad(
        &net,
        &m,
        &prior,
        &dropout,
        &random_batch(4, 3, 2, 9),
        20.0,
        1.0,
        &z,
        1.0,
    )
    .unwrap();
    for (g, is_bias) in grad.iter().zip(layout.bias_mask()) {
        if !is_bias {
            assert_eq!(*g, 0.0);
        }
    }
}

#[test]
fn noiseless_langevin_ascends_the_log_posterior() {
    let model = GaussianMean::new(1);
    let data = GaussianMean::dataset(&[vec![2.0]]);
    let prior = zero_prior(model.layout().clone(), 1.0, BiasMode::Informative).unwrap();
    let log_post = |t: f64| -0.5 * t * t - 0.5 * (t - 2.0) * (t - 2.0);
    let mut theta = vec![-4.0];
    let mut last = log_post(theta[0]);
    for _ in 0..100 {
        let (_, g) = model.loss_and_grad(&theta, &data.as_batch(), 1.0).unwrap();
        sgld_step(&mut theta, &prior, &g, 1.0, 0.01, 0.0, &[0.0]).unwrap();
        let now = log_post(theta[0]);
        assert!(now >= last);
        last = now;
    }
}

#[test]
fn moment_accumulator_hand_values_and_normal_draws() {
    let mut acc = MomentAccumulator::new(plain_layout(1));
    acc.update(&[1.0]);
    acc.update(&[3.0]);
    assert_eq!(acc.mean(), &[2.0]);
    assert_eq!(acc.variance(), vec![1.0]);

    let mut acc = MomentAccumulator::new(plain_layout(1));
    let mut rng = stream(11, 0);
    for _ in 0..10_000 {
        acc.update(&standard_normal_vec(&mut rng, 1));
    }
    assert!(acc.mean()[0].abs() < 0.05);
    assert!((acc.variance()[0] - 1.0).abs() < 0.05);
}

#[test]
fn single_sample_posterior_draws_that_sample() {
    let mut acc = MomentAccumulator::new(plain_layout(3));
    acc.update(&[0.5, -2.0, 7.0]);
    for seed in 0..3 {
        assert_eq!(sgld_sample(&acc, &mut stream(seed, 0)).as_slice(), &[0.5, -2.0, 7.0]);
    }
}

fn separable() -> (Dataset, Dataset) {
    let all = synth_blobs(5, 80, 10, 0.5, 21).unwrap();
    split(
        &all,
        SplitConfig {
            train_fraction: 0.5,
            seed: 21,
        },
    )
    .unwrap()
}

#[test]
fn sgld_counts_and_fits_separable_blobs() {
    let (train, valid) = separable();
    let net = Mlp::new(MlpSpec::new(10, vec![32], 5)).unwrap();
    let prior = zero_prior(net.layout().clone(), 1.0, BiasMode::Informative).unwrap();
    let n_inflate = 1e3;
    let cfg = SgldConfig {
        step_size: SgldConfig::step_size_for_lr(1e-2, 0.5, train.len(), n_inflate),
        n_inflate,
        nd: 0.1,
        burnin_epochs: 1,
        thin: 1,
        epochs: 2,
        batch_size: 16,
        ..SgldConfig::new(prior)
    };
    let theta0 = net.init_params(4);
    let short = sgld_fit(&net, &theta0, &train, &valid, &cfg).unwrap();
    assert_eq!(short.moments.count(), train.len().div_ceil(16) as u64);

    let long = sgld_fit(
        &net,
        &theta0,
        &train,
        &valid,
        &SgldConfig {
            epochs: 40,
            burnin_epochs: 20,
            thin: 5,
            ..cfg
        },
    )
    .unwrap();
    let (_, err) = evaluate(&net, long.moments.mean(), &valid.as_batch(), 1.0).unwrap();
    assert!(err < 0.05, "validation error {err}");
}

#[test]
fn fisher_matches_finite_difference_per_example_gradients() {
    let model = LogReg2::new();
    let data = Dataset::new(array![[-1.0], [0.3], [2.0]], vec![0, 1, 1], 2).unwrap();
    let theta = [0.8, -0.1];
    let n_inflate = 3.0;
    let fisher = fisher_accumulate(&model, &theta, &data, 1.0, n_inflate).unwrap();
    let mut expected = [0.0; 2];
    for n in 0..3 {
        let row = data.select(&[n]);
        let g = numeric_grad(|t| model.loss(t, &row, 1.0).unwrap(), &theta, 1e-6);
        for i in 0..2 {
            expected[i] += n_inflate * g[i] * g[i];
        }
    }
    for i in 0..2 {
        assert!(
            ((fisher[i] - expected[i]) / expected[i]).abs() < 1e-6,
            "{fisher:?} vs {expected:?}"
        );
    }
}

#[test]
fn fisher_vanishes_when_every_example_is_fit() {
    let model = GaussianMean::new(2);
    let data = GaussianMean::dataset(&[vec![1.0, -1.0], vec![1.0, -1.0], vec![1.0, -1.0]]);
    let fisher = fisher_accumulate(&model, &[1.0, -1.0], &data, 1.0, 5.0).unwrap();
    assert_eq!(fisher, vec![0.0, 0.0]);
}

#[test]
fn laplace_draws_have_the_posterior_variance() {
    let layout = plain_layout(4);
    let prior = zero_prior(layout.clone(), 1.0, BiasMode::Informative).unwrap();
    let star = FlatParams::new(vec![1.0, -2.0, 0.0, 3.0], layout).unwrap();
    let post = la_posterior(star, &[0.0, 3.0, 99.0, 1e4], &prior, 0.0).unwrap();
    let mut acc = MomentAccumulator::new(plain_layout(4));
    let mut rng = stream(12, 0);
    for _ in 0..10_000 {
        acc.update(la_sample(&post, &mut rng).as_slice());
    }
    for (got, want) in acc.variance().iter().zip(post.variance()) {
        assert!(((got - want) / want).abs() < 0.05, "{got} vs {want}");
    }
}

#[test]
fn point_posterior_ignores_sample_count_and_pairs_average_exactly() {
    let net = Mlp::new(MlpSpec::new(3, vec![4], 3)).unwrap();
    let inputs = random_batch(5, 3, 3, 13).inputs;
    let theta = net.init_params(14);
    let at_mean = predict(&net, &theta, inputs.view(), 0, 0, false).unwrap().probs;
    let sampled = predict(&net, &theta, inputs.view(), 5, 0, false).unwrap().probs;
    assert_eq!(at_mean, sampled);

    let other = net.init_params(15);
    let pair = predict_thetas(&net, &[theta.clone(), other.clone()], inputs.view())
        .unwrap()
        .probs;
    let expected = (probs_at(&net, theta.as_slice(), inputs.view()).unwrap()
        + probs_at(&net, other.as_slice(), inputs.view()).unwrap())
        / 2.0;
    assert_eq!(pair, expected);
}

#[test]
fn fitted_temperature_is_scale_equivariant() {
    let mut rng = stream(16, 0);
    let n = 400;
    let logits = Array2::from_shape_vec((n, 4), standard_normal_vec(&mut rng, n * 4))
        .unwrap()
        .mapv(|x| 3.0 * x);
    // argmax for two rows in three, a fixed other class for the rest
    let labels: Vec<usize> = logits
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let top = (0..4).fold(0, |b, k| if r[k] > r[b] { k } else { b });
            if i % 3 == 0 {
                (top + 1 + i % 3) % 4
            } else {
                top
            }
        })
        .collect();
    // rescale so that T = 1 is the optimum
    let t0 = fit_temperature(logits.view(), &labels).unwrap();
    let calibrated = logits.mapv(|x| x / t0);
    let t1 = fit_temperature(calibrated.view(), &labels).unwrap();
    assert!((t1 - 1.0).abs() < 1e-2, "T* = {t1}");
    let t2 = fit_temperature(calibrated.mapv(|x| 2.0 * x).view(), &labels).unwrap();
    assert!((t2 - 2.0).abs() < 2e-2, "T* = {t2}");
}

#[test]
fn calibrated_bins_plot_on_the_diagonal() {
    let probs = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
    let table = bin_accumulate(probs.view(), &[0, 1, 0], 10).unwrap();
    let csv = reliability_csv(&table.rows());
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[1], cols[2], "{line}");
    }
}

#[test]
fn tight_two_class_blobs_are_linearly_separable() {
    let ds = synth_blobs(2, 50, 4, 1e-3, 17).unwrap();
    let net = Mlp::new(MlpSpec::new(4, vec![], 2)).unwrap();
    let cfg = SgdConfig {
        epochs: 50,
        batch_size: 10,
        early_stop_patience: 0,
        ..SgdConfig::default()
    };
    let fit = train_vanilla(&net, &net.init_params(1), None, &ds, &ds, &cfg).unwrap();
    let (_, err) = evaluate(&net, fit.state.as_slice(), &ds.as_batch(), 1.0).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn prior_mean_round_trips_through_a_checkpoint() {
    let net = Mlp::new(MlpSpec::new(3, vec![4], 2)).unwrap();
    let theta = net.init_params(18);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.ckpt");
    Checkpoint::new("point", net.layout().clone())
        .with_vector("params", theta.to_vec())
        .write(&path)
        .unwrap();
    let prior = prior_from_checkpoint(&path, net.layout().clone(), 0.5, BiasMode::Informative).unwrap();
    assert_eq!(prior.mean(), theta.as_slice());
    assert!(prior_from_checkpoint(
        dir.path().join("missing.ckpt"),
        net.layout().clone(),
        0.5,
        BiasMode::Informative
    )
    .is_err());
}
