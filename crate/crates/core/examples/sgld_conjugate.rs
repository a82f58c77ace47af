//! SGLD on a conjugate Gaussian model, where the exact posterior is known:
//! prior N(0, 1) and one unit-noise observation y = 2 give N(1, 0.5).

use std::sync::Arc;

use bnn::data::Dataset;
use bnn::model::{Batch, Model};
use bnn::params::{zero_prior, BiasMode, FlatParams, ParamLayout};
use bnn::sgld::{sgld_fit, SgldConfig};
use ndarray::{Array2, ArrayView2};

/// Negative log-likelihood `½(θ − y)²` of unit-variance observations.
struct GaussianMean {
    layout: Arc<ParamLayout>,
}

impl Model for GaussianMean {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn forward_logits(&self, _theta: &[f64], inputs: ArrayView2<'_, f64>) -> bnn::Result<Array2<f64>> {
        Ok(Array2::zeros((inputs.nrows(), 1)))
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch, tau: f64) -> bnn::Result<(f64, Vec<f64>)> {
        let n = batch.len() as f64 * tau;
        let d = theta[0] - batch.inputs.column(0).sum() / batch.len() as f64;
        let ss: f64 = batch
            .inputs
            .column(0)
            .iter()
            .map(|y| 0.5 * (theta[0] - y).powi(2))
            .sum();
        Ok((ss / n, vec![d * batch.len() as f64 / n]))
    }
}

fn main() -> bnn::Result<()> {
    let model = GaussianMean {
        layout: Arc::new(ParamLayout::new([("mu", 1, false)])),
    };
    let data = Dataset::new(Array2::from_elem((1, 1), 2.0), vec![0], 1)?;
    let prior = zero_prior(model.layout().clone(), 1.0, BiasMode::Informative)?;
    let epochs = 400_000;
    let cfg = SgldConfig {
        step_size: 0.01,
        n_inflate: 1.0,
        nd: 1.0,
        burnin_epochs: epochs / 20,
        thin: 5,
        epochs,
        batch_size: 1,
        seed: 1,
        ..SgldConfig::new(prior)
    };
    let theta0 = FlatParams::zeros(model.layout().clone());
    let fit = sgld_fit(&model, &theta0, &data, &data, &cfg)?;
    println!(
        "{} samples: mean {:.4} (exact 1), variance {:.4} (exact 0.5)",
        fit.moments.count(),
        fit.moments.mean()[0],
        fit.moments.variance()[0]
    );
    Ok(())
}
