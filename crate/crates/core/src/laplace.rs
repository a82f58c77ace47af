//! Diagonal Laplace approximation around a MAP estimate.
//!
//! The posterior precision is the prior precision plus the diagonal of the
//! (inflated) empirical Fisher, `F_i = Ninflate · Σ_n (∂l_n/∂θ_i)²`:
//!
//! ```text
//! q(θ) = N(θ*, diag(v)),   v_i = 1 / (1/σ² + F_i + damping)
//! ```
//!
//! Under an uninformative bias prior, bias coordinates use `1 / (F_i + damping)`.

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{FlatParams, PriorSpec};
use crate::rng::standard_normal_vec;
use crate::sgd::{train_map, SgdConfig};
use crate::train::Fitted;

pub const DEFAULT_DAMPING: f64 = 1e-4;

const FISHER_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    theta_star: FlatParams,
    variance: Vec<f64>,
    damping: f64,
}

impl LaplacePosterior {
    pub fn theta_star(&self) -> &FlatParams {
        &self.theta_star
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("laplace", self.theta_star.layout().clone())
            .with_vector("theta_star", self.theta_star.to_vec())
            .with_vector("variance", self.variance.clone())
            .with_scalar("damping", self.damping)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let theta_star = FlatParams::new(ckpt.require_vector("theta_star")?.to_vec(), ckpt.layout().clone())?;
        Ok(LaplacePosterior {
            theta_star,
            variance: ckpt.require_vector("variance")?.to_vec(),
            damping: ckpt.scalar("damping").unwrap_or(DEFAULT_DAMPING),
        })
    }
}

/// `Ninflate · Σ_n (∇l_n(θ*)/τ)²` over `data`, accumulated in chunks with
/// the model's batched squared-gradient pass.
pub fn fisher_accumulate<M: Model + ?Sized>(
    model: &M,
    theta_star: &[f64],
    data: &Dataset,
    tau: f64,
    n_inflate: f64,
) -> Result<Vec<f64>> {
    let mut fisher = vec![0.0; model.num_params()];
    let mut start = 0;
    while start < data.len() {
        let end = (start + FISHER_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let part = model.sq_grad_sum(theta_star, &data.select(&idx), tau)?;
        for (f, p) in fisher.iter_mut().zip(&part) {
            *f += p;
        }
        start = end;
    }
    for f in &mut fisher {
        *f *= n_inflate;
    }
    Ok(fisher)
}

/// Reference for [`fisher_accumulate`]: one backward pass per example.
pub fn fisher_accumulate_per_example<M: Model + ?Sized>(
    model: &M,
    theta_star: &[f64],
    data: &Dataset,
    tau: f64,
    n_inflate: f64,
) -> Result<Vec<f64>> {
    let mut fisher = vec![0.0; model.num_params()];
    for i in 0..data.len() {
        let (_, g) = model.loss_and_grad(theta_star, &data.select(&[i]), tau)?;
        for (f, gi) in fisher.iter_mut().zip(&g) {
            *f += gi * gi;
        }
    }
    for f in &mut fisher {
        *f *= n_inflate;
    }
    Ok(fisher)
}

pub fn la_posterior(
    theta_star: FlatParams,
    fisher: &[f64],
    prior: &PriorSpec,
    damping: f64,
) -> Result<LaplacePosterior> {
    if fisher.len() != theta_star.len() {
        return Err(Error::Layout(format!(
            "Fisher has {} entries, parameters have {}",
            fisher.len(),
            theta_star.len()
        )));
    }
    if !(damping >= 0.0) {
        return Err(Error::Config(format!("damping must be >= 0, got {damping}")));
    }
    let prior_precision = 1.0 / prior.variance();
    let variance: Vec<f64> = fisher
        .iter()
        .zip(prior.prior_mask())
        .map(|(&f, has_prior)| {
            let p = if has_prior { prior_precision } else { 0.0 };
            1.0 / (p + f + damping)
        })
        .collect();
    if let Some(i) = variance.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "Laplace variance at coordinate {i} is not finite; increase the damping"
        )));
    }
    Ok(LaplacePosterior {
        theta_star,
        variance,
        damping,
    })
}

/// `θ = θ* + √v ⊙ ε`.
pub fn la_sample(post: &LaplacePosterior, rng: &mut ChaCha8Rng) -> FlatParams {
    let noise = standard_normal_vec(rng, post.variance.len());
    let values = post
        .theta_star
        .iter()
        .zip(&post.variance)
        .zip(noise)
        .map(|((t, v), e)| t + v.sqrt() * e)
        .collect();
    FlatParams::new(values, post.theta_star.layout().clone()).expect("finite Laplace sample")
}

/// MAP training followed by the Fisher pass over the training set.
#[allow(clippy::too_many_arguments)]
pub fn la_fit<M: Model + ?Sized>(
    model: &M,
    theta0: &FlatParams,
    prior: &PriorSpec,
    train: &Dataset,
    valid: &Dataset,
    cfg: &SgdConfig,
    n_inflate: f64,
    damping: f64,
) -> Result<Fitted<LaplacePosterior>> {
    let map = train_map(model, theta0, prior, train, valid, cfg, n_inflate)?;
    let fisher = fisher_accumulate(model, &map.state, train, cfg.tau, n_inflate)?;
    let post = la_posterior(map.state, &fisher, prior, damping)?;
    Ok(Fitted {
        state: post,
        history: map.history,
        best_epoch: map.best_epoch,
    })
}
