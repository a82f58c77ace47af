//! Mean-field Gaussian VI on synthetic blobs, predicting at the posterior
//! mean and by averaging sampled networks.

use bnn::calibration::{calibration_report, EceFormula};
use bnn::data::{split, synth_blobs, SplitConfig};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::model::Model;
use bnn::params::{zero_prior, BiasMode};
use bnn::predictive::predict;
use bnn::vi::{vi_fit, ViConfig};

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
    let prior = zero_prior(net.layout().clone(), 1.0, BiasMode::Informative)?;
    let cfg = ViConfig {
        epochs: 60,
        batch_size: 32,
        kld: 1.0,
        ..ViConfig::new(prior)
    };
    let fit = vi_fit(&net, &net.init_params(1), &train, &valid, &cfg)?;
    let scales = fit.state.scales();
    let mean_scale = scales.iter().sum::<f64>() / scales.len() as f64;
    println!("best epoch {}, mean posterior scale {mean_scale:.4}", fit.best_epoch);
    for nst in [0, 20] {
        let pred = predict(&net, &fit.state, test.inputs.view(), nst, 7, false)?;
        let r = calibration_report(pred.log_scores.view(), &test.labels, 1.0, 10, EceFormula::Standard)?;
        println!("nst {nst:>2}: error {:.4} ece {:.4} nll {:.4}", r.err, r.ece, r.nll);
    }
    Ok(())
}
