//! Warm-start prior: pretrain on one task, save a checkpoint, then fit a VI
//! posterior on a related task with the prior centered at the checkpoint.

use bnn::checkpoint::Checkpoint;
use bnn::data::{blob_means, blobs_around, split, SplitConfig};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::model::{evaluate, Model};
use bnn::params::{prior_from_checkpoint, zero_prior, BiasMode};
use bnn::sgd::{train_vanilla, SgdConfig};
use bnn::vi::{vi_fit, ViConfig};

fn main() -> bnn::Result<()> {
    let means_a = blob_means(5, 10, 1);
    let shift = blob_means(5, 10, 2).mapv(|x| 0.5 * x);
    let means_b = &means_a + &shift;
    let (train_a, valid_a) = split(
        &blobs_around(&means_a, 60, 1.0, 3)?,
        SplitConfig {
            train_fraction: 0.7,
            seed: 3,
        },
    )?;
    let (train_b, valid_b) = split(
        &blobs_around(&means_b, 20, 1.0, 4)?,
        SplitConfig {
            train_fraction: 0.5,
            seed: 4,
        },
    )?;
    let net = Mlp::new(MlpSpec::new(10, vec![32], 5))?;

    let sgd = SgdConfig {
        epochs: 40,
        batch_size: 32,
        ..SgdConfig::default()
    };
    let pretrained = train_vanilla(&net, &net.init_params(5), None, &train_a, &valid_a, &sgd)?.state;
    let dir = tempfile_dir()?;
    let ckpt = dir.join("pretrained.ckpt");
    Checkpoint::new("point", net.layout().clone())
        .with_vector("params", pretrained.to_vec())
        .write(&ckpt)?;

    let warm_prior = prior_from_checkpoint(&ckpt, net.layout().clone(), 1.0, BiasMode::Informative)?;
    let cold_prior = zero_prior(net.layout().clone(), 1.0, BiasMode::Informative)?;
    let vi = |prior| ViConfig {
        epochs: 3,
        batch_size: 16,
        early_stop_patience: 0,
        ..ViConfig::new(prior)
    };
    let warm = vi_fit(&net, &pretrained, &train_b, &valid_b, &vi(warm_prior))?;
    let cold = vi_fit(&net, &net.init_params(5), &train_b, &valid_b, &vi(cold_prior))?;
    for (name, fit) in [("warm", &warm), ("cold", &cold)] {
        let (nll, err) = evaluate(&net, fit.state.m().as_slice(), &valid_b.as_batch(), 1.0)?;
        println!("{name}: validation nll {nll:.4} error {err:.4}");
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempfile_dir() -> bnn::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("bnn-warm-start-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| bnn::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}
