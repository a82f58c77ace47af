//! Stochastic gradient Langevin dynamics with a diagonal Gaussian summary of
//! the collected samples.
//!
//! One step with step size `η` and noise scale `nd`:
//!
//! ```text
//! θ ← θ + (η/2)(∇log p(θ) − N_eff ∇l̄_B(θ)) + nd·√η·ξ,   ξ ~ N(0, I)
//! ```
//!
//! where `l̄_B` is the minibatch-mean loss and `N_eff = |D|·Ninflate`. With
//! `nd = 1` this targets the tempered posterior `p(θ)·Π p(y|x,θ)^{Ninflate}`.
//! After the burn-in epochs every `thin`-th iterate updates a running
//! mean/variance; predictions sample from the resulting diagonal Gaussian.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, Model};
use crate::params::{prior_log_grad, FlatParams, ParamLayout, PriorSpec};
use crate::rng::{standard_normal_vec, stream, TRAIN_NOISE_STREAM};
use crate::train::{check_finite_loss, EpochRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub prior: PriorSpec,
    /// Step size `η` of the Langevin update.
    pub step_size: f64,
    pub n_inflate: f64,
    /// Noise multiplier; 1 is exact Langevin dynamics, 0 is noiseless.
    pub nd: f64,
    pub burnin_epochs: usize,
    /// Keep every `thin`-th post-burn-in iterate.
    pub thin: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub nst: usize,
    pub seed: u64,
    pub tau: f64,
}

impl SgldConfig {
    pub fn new(prior: PriorSpec) -> Self {
        SgldConfig {
            prior,
            step_size: 1e-5,
            n_inflate: 1e3,
            nd: 0.1,
            burnin_epochs: 20,
            thin: 10,
            epochs: 100,
            batch_size: 128,
            nst: 0,
            seed: 0,
            tau: 1.0,
        }
    }

    /// The step size whose likelihood drift equals the steady-state step of
    /// heavy-ball SGD with learning rate `lr` and momentum `momentum` on the
    /// minibatch-mean loss: `η = 2·lr / ((1 − momentum)·N_eff)`.
    pub fn step_size_for_lr(lr: f64, momentum: f64, n_train: usize, n_inflate: f64) -> f64 {
        2.0 * lr / ((1.0 - momentum) * n_train as f64 * n_inflate)
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "SGLD step size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.n_inflate > 0.0) {
            return Err(Error::Config(format!("Ninflate must be > 0, got {}", self.n_inflate)));
        }
        if !(self.nd >= 0.0) {
            return Err(Error::Config(format!("nd must be >= 0, got {}", self.nd)));
        }
        if self.thin == 0 || self.batch_size == 0 {
            return Err(Error::Config("thin and batch size must be >= 1".into()));
        }
        if self.epochs <= self.burnin_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must exceed burn-in ({}) so that samples are collected",
                self.epochs, self.burnin_epochs
            )));
        }
        let per_epoch = n_train.div_ceil(self.batch_size);
        let post = per_epoch * (self.epochs - self.burnin_epochs);
        if post < self.thin {
            return Err(Error::Config(format!(
                "only {post} post-burn-in iterations, fewer than thin = {}",
                self.thin
            )));
        }
        Ok(())
    }
}

/// Running per-coordinate mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl MomentAccumulator {
    pub fn new(layout: Arc<ParamLayout>) -> Self {
        let n = layout.len();
        MomentAccumulator {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            layout,
        }
    }

    pub fn update(&mut self, theta: &[f64]) {
        debug_assert_eq!(theta.len(), self.mean.len());
        self.count += 1;
        let c = self.count as f64;
        for ((mu, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(theta) {
            let d = x - *mu;
            *mu += d / c;
            *m2 += d * (x - *mu);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `M2 / count`; zeros before the second sample.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        let c = self.count as f64;
        self.m2.iter().map(|m2| (m2 / c).max(0.0)).collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("sgld", self.layout.clone())
            .with_vector("mean", self.mean.clone())
            .with_vector("m2", self.m2.clone())
            .with_scalar("count", self.count as f64)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let count = ckpt
            .scalar("count")
            .ok_or_else(|| Error::Layout("sgld checkpoint has no sample count".into()))?;
        Ok(MomentAccumulator {
            count: count as u64,
            mean: ckpt.require_vector("mean")?.to_vec(),
            m2: ckpt.require_vector("m2")?.to_vec(),
            layout: ckpt.layout().clone(),
        })
    }
}

pub fn moments_update(mut acc: MomentAccumulator, theta: &[f64]) -> MomentAccumulator {
    acc.update(theta);
    acc
}

/// Draws `θ ~ N(mean, diag(variance))`.
pub fn sgld_sample(acc: &MomentAccumulator, rng: &mut ChaCha8Rng) -> FlatParams {
    let noise = standard_normal_vec(rng, acc.mean.len());
    let values = acc
        .mean
        .iter()
        .zip(acc.variance())
        .zip(noise)
        .map(|((mu, var), e)| mu + var.sqrt() * e)
        .collect();
    FlatParams::new(values, acc.layout.clone()).expect("finite moments")
}

/// One Langevin update in place. `mean_grad` is the gradient of the
/// minibatch-mean loss; `noise` is ignored when `nd == 0`.
pub fn sgld_step(
    theta: &mut [f64],
    prior: &PriorSpec,
    mean_grad: &[f64],
    n_eff: f64,
    step_size: f64,
    nd: f64,
    noise: &[f64],
) -> Result<()> {
    let prior_grad = prior_log_grad(theta, prior)?;
    let half = 0.5 * step_size;
    let noise_scale = nd * step_size.sqrt();
    for i in 0..theta.len() {
        let mut next = theta[i] + half * (prior_grad[i] - n_eff * mean_grad[i]);
        if nd != 0.0 {
            next += noise_scale * noise[i];
        }
        if !next.is_finite() {
            return Err(Error::Numeric(format!(
                "SGLD iterate became non-finite at coordinate {i}"
            )));
        }
        theta[i] = next;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SgldFit {
    pub moments: MomentAccumulator,
    pub last: FlatParams,
    pub history: Vec<EpochRecord>,
}

/// Runs the chain for `cfg.epochs` epochs from `theta0`, collecting samples
/// after the burn-in. There is no early stopping. Validation metrics are
/// evaluated at the running mean once samples exist, else at the iterate.
pub fn sgld_fit<M: Model + ?Sized>(
    model: &M,
    theta0: &FlatParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &SgldConfig,
) -> Result<SgldFit> {
    cfg.validate(train.len())?;
    let layout = theta0.layout().clone();
    let n = layout.len();
    let mut theta = theta0.to_vec();
    let mut moments = MomentAccumulator::new(layout.clone());
    let mut rng = stream(cfg.seed, TRAIN_NOISE_STREAM);
    let n_eff = train.len() as f64 * cfg.n_inflate;
    let valid = valid.as_batch();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut post_burnin = 0usize;
    let mut noise = vec![0.0; n];

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch as u64) {
            let (loss, grad) = model.loss_and_grad(&theta, &batch, cfg.tau)?;
            loss_sum += loss * batch.len() as f64;
            if cfg.nd != 0.0 {
                noise = standard_normal_vec(&mut rng, n);
            }
            sgld_step(&mut theta, &cfg.prior, &grad, n_eff, cfg.step_size, cfg.nd, &noise)?;
            if epoch >= cfg.burnin_epochs {
                post_burnin += 1;
                if post_burnin.is_multiple_of(cfg.thin) {
                    moments.update(&theta);
                }
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        check_finite_loss(train_loss, epoch)?;
        let at = if moments.count() > 0 {
            moments.mean()
        } else {
            &theta[..]
        };
        let (valid_loss, valid_error) = evaluate(model, at, &valid, cfg.tau)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_error,
        });
        log::debug!("sgld epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} err {valid_error:.4}");
    }
    Ok(SgldFit {
        moments,
        last: FlatParams::new(theta, layout)?,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{zero_prior, BiasMode};

    fn layout(n: usize) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new([("w", n, false)]))
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25];
        let mut acc = MomentAccumulator::new(layout(1));
        for x in xs {
            acc.update(&[x]);
        }
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert_eq!(acc.count(), 5);
        assert!((acc.mean()[0] - mean).abs() < 1e-12);
        assert!((acc.variance()[0] - var).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_zero_variance() {
        let acc = moments_update(MomentAccumulator::new(layout(2)), &[3.0, -1.0]);
        assert_eq!(acc.variance(), vec![0.0, 0.0]);
        let mut rng = stream(0, 0);
        assert_eq!(sgld_sample(&acc, &mut rng).to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn noiseless_step_is_gradient_step() {
        let prior = zero_prior(layout(1), 1.0, BiasMode::Informative).unwrap();
        let mut theta = vec![1.0];
        sgld_step(&mut theta, &prior, &[0.5], 4.0, 0.1, 0.0, &[]).unwrap();
        // 1 + 0.05 (−1 − 2)
        assert!((theta[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn burnin_must_leave_epochs() {
        let prior = zero_prior(layout(1), 1.0, BiasMode::Informative).unwrap();
        let cfg = SgldConfig {
            epochs: 5,
            burnin_epochs: 5,
            ..SgldConfig::new(prior)
        };
        assert!(cfg.validate(100).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut acc = MomentAccumulator::new(layout(2));
        acc.update(&[1.0, 2.0]);
        acc.update(&[2.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        acc.to_checkpoint().write(&p).unwrap();
        assert_eq!(
            MomentAccumulator::from_checkpoint(&Checkpoint::read(&p).unwrap()).unwrap(),
            acc
        );
    }
}
