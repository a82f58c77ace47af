//! Diagonal Laplace approximation: a MAP fit followed by the empirical
//! Fisher, with samples drawn from the resulting Gaussian.

use bnn::calibration::{calibration_report, EceFormula};
use bnn::data::{split, synth_blobs, SplitConfig};
use bnn::laplace::{la_fit, DEFAULT_DAMPING};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::model::Model;
use bnn::params::{zero_prior, BiasMode};
use bnn::predictive::predict;
use bnn::sgd::SgdConfig;

fn main() -> bnn::Result<()> {
    let all = synth_blobs(4, 150, 8, 0.8, 3)?;
    let (train, test) = split(
        &all,
        SplitConfig {
            train_fraction: 0.6,
            seed: 3,
        },
    )?;
    let (train, valid) = split(
        &train,
        SplitConfig {
            train_fraction: 0.75,
            seed: 4,
        },
    )?;
    let net = Mlp::new(MlpSpec::new(8, vec![32, 32], 4))?;
    let prior = zero_prior(net.layout().clone(), 0.3, BiasMode::Informative)?;
    let sgd = SgdConfig {
        epochs: 60,
        batch_size: 32,
        ..SgdConfig::default()
    };
    let fit = la_fit(
        &net,
        &net.init_params(1),
        &prior,
        &train,
        &valid,
        &sgd,
        1.0,
        DEFAULT_DAMPING,
    )?;
    let v = fit.state.variance();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    println!(
        "posterior variance in [{lo:.3e}, {hi:.3e}], prior variance {:.3e}",
        prior.variance()
    );
    for nst in [0, 20] {
        let pred = predict(&net, &fit.state, test.inputs.view(), nst, 7, false)?;
        let r = calibration_report(pred.log_scores.view(), &test.labels, 1.0, 10, EceFormula::Standard)?;
        println!("nst {nst:>2}: error {:.4} ece {:.4} nll {:.4}", r.err, r.ece, r.nll);
    }
    Ok(())
}
