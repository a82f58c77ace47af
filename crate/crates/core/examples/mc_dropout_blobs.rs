//! MC-Dropout over parameters: dropped coordinates fall back to the prior
//! mean. Compares the three bias treatments.

use bnn::calibration::{calibration_report, EceFormula};
use bnn::data::{split, synth_blobs, SplitConfig};
use bnn::mc_dropout::{mcd_fit, Dropout, McdBias, McdConfig};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::model::Model;
use bnn::params::{zero_prior, BiasMode};
use bnn::predictive::{predict, McdPosterior};

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
    for bias in [McdBias::Gaussian, McdBias::Spikymix, McdBias::Ignore] {
        let dropout = Dropout::new(0.1, bias)?;
        let cfg = McdConfig {
            dropout,
            epochs: 60,
            batch_size: 32,
            ..McdConfig::new(prior.clone())
        };
        let fit = mcd_fit(&net, &net.init_params(1), &train, &valid, &cfg)?;
        let posterior = McdPosterior {
            state: fit.state,
            dropout,
            fallback: prior.mean().to_vec(),
        };
        for nst in [0, 20] {
            let pred = predict(&net, &posterior, test.inputs.view(), nst, 7, false)?;
            let r = calibration_report(pred.log_scores.view(), &test.labels, 1.0, 10, EceFormula::Standard)?;
            println!(
                "{:<8} nst {nst:>2}: error {:.4} ece {:.4} nll {:.4}",
                bias.name(),
                r.err,
                r.ece,
                r.nll
            );
        }
    }
    Ok(())
}
