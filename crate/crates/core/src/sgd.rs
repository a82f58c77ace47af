//! SGD with momentum: the `vanilla` deterministic baseline (optional weight
//! decay toward zero or the prior mean) and the MAP stage of the Laplace
//! method.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, Model};
use crate::params::{FlatParams, ParamLayout, PriorSpec};
use crate::train::{check_finite_loss, EarlyStopping, EpochRecord, Fitted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdCenter {
    Zero,
    PriorMean,
}

/// Whether bias coordinates take part in the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasPenalty {
    Penalty,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub wd: f64,
    pub wd_center: WdCenter,
    pub bias_penalty: BiasPenalty,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub tau: f64,
    /// Seed of the minibatch shuffling stream.
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.5,
            epochs: 100,
            batch_size: 128,
            wd: 0.0,
            wd_center: WdCenter::Zero,
            bias_penalty: BiasPenalty::Penalty,
            early_stop_patience: 10,
            tau: 1.0,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.wd >= 0.0) {
            return Err(Error::Config(format!("wd must be >= 0, got {}", self.wd)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-coordinate L2 pull `coef_i · (θ_i − center_i)` added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecay {
    coef: Vec<f64>,
    center: Vec<f64>,
}

impl WeightDecay {
    /// `coef_i = wd` where `mask_i`, else 0.
    pub fn new(wd: f64, center: Vec<f64>, mask: &[bool]) -> Result<Self> {
        if center.len() != mask.len() {
            return Err(Error::Layout("weight-decay center and mask lengths differ".into()));
        }
        let coef = mask.iter().map(|&m| wd * if m { 1.0 } else { 0.0 }).collect();
        Ok(WeightDecay { coef, center })
    }

    pub fn coef(&self) -> &[f64] {
        &self.coef
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Adds `coef ⊙ (θ − c)` to `grad` and returns `½ Σ coef_i (θ_i − c_i)²`.
    pub fn apply(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut penalty = 0.0;
        for i in 0..theta.len() {
            let d = theta[i] - self.center[i];
            penalty += self.coef[i] * d * d;
            grad[i] += self.coef[i] * d;
        }
        0.5 * penalty
    }

    /// Decay configured by a [`SgdConfig`]; `prior_mean` is required when
    /// decaying toward it.
    pub fn from_config(cfg: &SgdConfig, layout: &ParamLayout, prior_mean: Option<&[f64]>) -> Result<Option<Self>> {
        if cfg.wd == 0.0 {
            return Ok(None);
        }
        let center = match (cfg.wd_center, prior_mean) {
            (WdCenter::Zero, _) => vec![0.0; layout.len()],
            (WdCenter::PriorMean, Some(m)) => m.to_vec(),
            (WdCenter::PriorMean, None) => {
                return Err(Error::Config(
                    "weight decay toward the prior mean needs a prior mean".into(),
                ));
            }
        };
        let mask: Vec<bool> = match cfg.bias_penalty {
            BiasPenalty::Penalty => vec![true; layout.len()],
            BiasPenalty::Ignore => layout.bias_mask().into_iter().map(|b| !b).collect(),
        };
        WeightDecay::new(cfg.wd, center, &mask).map(Some)
    }
}

/// One heavy-ball step: `v ← μ v + (g + wd·mask⊙(θ − c))`, `θ ← θ − lr·v`.
pub fn sgd_step(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    decay: Option<&WeightDecay>,
) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), velocity.len());
    match decay {
        Some(d) => {
            for i in 0..theta.len() {
                let g = grad[i] + d.coef[i] * (theta[i] - d.center[i]);
                velocity[i] = momentum * velocity[i] + g;
                theta[i] -= lr * velocity[i];
            }
        }
        None => {
            for i in 0..theta.len() {
                velocity[i] = momentum * velocity[i] + grad[i];
                theta[i] -= lr * velocity[i];
            }
        }
    }
}

/// Minibatch SGD on the mean loss plus an optional decay term, keeping the
/// best-validation-loss parameters.
pub fn train_sgd<M: Model + ?Sized>(
    model: &M,
    theta0: &FlatParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &SgdConfig,
    decay: Option<&WeightDecay>,
) -> Result<Fitted<FlatParams>> {
    cfg.validate()?;
    let layout = theta0.layout().clone();
    let mut theta = theta0.to_vec();
    let mut velocity = vec![0.0; theta.len()];
    let valid = valid.as_batch();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch as u64) {
            let (loss, grad) = model.loss_and_grad(&theta, &batch, cfg.tau)?;
            loss_sum += loss * batch.len() as f64;
            sgd_step(&mut theta, &grad, &mut velocity, cfg.lr, cfg.momentum, decay);
        }
        let train_loss = loss_sum / train.len() as f64;
        check_finite_loss(train_loss, epoch)?;
        let (valid_loss, valid_error) = evaluate(model, &theta, &valid, cfg.tau)?;
        check_finite_loss(valid_loss, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_error,
        });
        log::debug!("sgd epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} err {valid_error:.4}");
        if stopper.observe(epoch, valid_loss, || theta.clone()) {
            break;
        }
    }
    let fitted = stopper.finish(history)?;
    Ok(Fitted {
        state: FlatParams::new(fitted.state, layout)?,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
    })
}

/// The deterministic baseline: SGD with the decay described by `cfg`.
pub fn train_vanilla<M: Model + ?Sized>(
    model: &M,
    theta0: &FlatParams,
    prior_mean: Option<&[f64]>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &SgdConfig,
) -> Result<Fitted<FlatParams>> {
    let decay = WeightDecay::from_config(cfg, model.layout(), prior_mean)?;
    train_sgd(model, theta0, train, valid, cfg, decay.as_ref())
}

/// Coefficient of `½‖θ − θ̄‖²` in the data-size normalized MAP objective.
pub fn map_penalty_coef(prior: &PriorSpec, n_train: usize, n_inflate: f64) -> f64 {
    1.0 / (prior.variance() * n_train as f64 * n_inflate)
}

/// MAP estimate under `prior`: minimizes
/// `(1/|B|)Σ l + ½‖θ − θ̄‖² / (σ²·|D|·Ninflate)` by SGD. Bias coordinates
/// carry no prior term under an uninformative bias prior. `cfg.wd`,
/// `cfg.wd_center` and `cfg.bias_penalty` are ignored.
pub fn train_map<M: Model + ?Sized>(
    model: &M,
    theta0: &FlatParams,
    prior: &PriorSpec,
    train: &Dataset,
    valid: &Dataset,
    cfg: &SgdConfig,
    n_inflate: f64,
) -> Result<Fitted<FlatParams>> {
    let decay = map_decay(prior, train.len(), n_inflate)?;
    train_sgd(model, theta0, train, valid, cfg, decay.as_ref())
}

/// The prior pull of the MAP objective as a weight decay; `None` when the
/// coefficient vanishes (`σ = ∞`).
pub fn map_decay(prior: &PriorSpec, n_train: usize, n_inflate: f64) -> Result<Option<WeightDecay>> {
    if !(n_inflate > 0.0) {
        return Err(Error::Config(format!("Ninflate must be > 0, got {n_inflate}")));
    }
    let coef = map_penalty_coef(prior, n_train, n_inflate);
    if coef == 0.0 {
        return Ok(None);
    }
    WeightDecay::new(coef, prior.mean().to_vec(), &prior.prior_mask()).map(Some)
}

/// MAP objective on one minibatch and its gradient, as minimized by [`train_map`].
pub fn map_objective<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &Batch,
    prior: &PriorSpec,
    n_train: usize,
    n_inflate: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut grad) = model.loss_and_grad(theta, batch, tau)?;
    if let Some(d) = map_decay(prior, n_train, n_inflate)? {
        loss += d.apply(theta, &mut grad);
    }
    Ok((loss, grad))
}
