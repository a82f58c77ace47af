//! MC-Dropout as approximate inference with a spike-and-slab style posterior.
//!
//! Each coordinate is kept with probability `1 − p`; a dropped coordinate
//! falls back to the prior mean rather than zero:
//!
//! ```text
//! z_i ~ Bernoulli(1 − p),   θ = z ⊙ m + (1 − z) ⊙ θ̄
//! ```
//!
//! The KL term becomes a weighted L2 pull of `m` toward `θ̄`,
//! `(kld / 2σ²N) Σ_i w_i (m_i − θ̄_i)²`, with `w_i = 1 − p` for weights. Biases
//! follow [`McdBias`].

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, Model};
use crate::params::{FlatParams, ParamLayout, PriorSpec};
use crate::rng::{stream, MASK_STREAM};
use crate::sgd::sgd_step;
use crate::train::{check_finite_loss, EarlyStopping, EpochRecord, Fitted};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Treatment of bias coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McdBias {
    /// Never dropped; full Gaussian penalty.
    Gaussian,
    /// Dropped like weights, penalty weighted by `1 − p`.
    Spikymix,
    /// Never dropped, no penalty.
    Ignore,
}

impl McdBias {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(McdBias::Gaussian),
            "spikymix" => Ok(McdBias::Spikymix),
            "ignore" => Ok(McdBias::Ignore),
            other => Err(Error::Config(format!(
                "unknown MC-dropout bias option `{other}` (gaussian|spikymix|ignore)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            McdBias::Gaussian => "gaussian",
            McdBias::Spikymix => "spikymix",
            McdBias::Ignore => "ignore",
        }
    }
}

/// Drop probability and bias treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub p: f64,
    pub bias: McdBias,
}

impl Dropout {
    pub fn new(p: f64, bias: McdBias) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("p_drop must lie in [0, 1), got {p}")));
        }
        Ok(Dropout { p, bias })
    }

    /// Penalty weight `w_i` per coordinate.
    pub fn penalty_weights(&self, layout: &ParamLayout) -> Vec<f64> {
        let keep = 1.0 - self.p;
        layout
            .bias_mask()
            .into_iter()
            .map(|is_bias| match (is_bias, self.bias) {
                (false, _) | (true, McdBias::Spikymix) => keep,
                (true, McdBias::Gaussian) => 1.0,
                (true, McdBias::Ignore) => 0.0,
            })
            .collect()
    }
}

/// Scale of the penalty, `kld / (σ² N)`. Multiplied by [`Dropout::penalty_weights`]
/// it gives the per-coordinate decay coefficient.
pub fn penalty_scale(kld: f64, prior: &PriorSpec, n_total: f64) -> f64 {
    kld / (prior.variance() * n_total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdState {
    m: FlatParams,
}

impl McdState {
    pub fn new(m: FlatParams) -> Self {
        McdState { m }
    }

    pub fn m(&self) -> &FlatParams {
        &self.m
    }

    pub fn into_m(self) -> FlatParams {
        self.m
    }

    pub fn to_checkpoint(&self, dropout: &Dropout, prior: &PriorSpec) -> Checkpoint {
        Checkpoint::new("mc_dropout", self.m.layout().clone())
            .with_vector("m", self.m.to_vec())
            .with_vector("prior_mean", prior.mean().to_vec())
            .with_scalar("p_drop", dropout.p)
            .with_tag("bias", dropout.bias.name())
    }

    /// State, dropout setting and fallback mean stored by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Dropout, Vec<f64>)> {
        let m = FlatParams::new(ckpt.require_vector("m")?.to_vec(), ckpt.layout().clone())?;
        let p = ckpt
            .scalar("p_drop")
            .ok_or_else(|| Error::Layout("mc_dropout checkpoint has no p_drop".into()))?;
        let bias = McdBias::parse(ckpt.tag("bias").unwrap_or("spikymix"))?;
        let fallback = ckpt.require_vector("prior_mean")?.to_vec();
        Ok((McdState { m }, Dropout::new(p, bias)?, fallback))
    }
}

/// Keep-mask: 1 keeps `m_i`, 0 falls back to the prior mean. Bias
/// coordinates are always kept unless the bias option is `spikymix`.
pub fn mcd_mask(layout: &ParamLayout, dropout: &Dropout, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - dropout.p;
    layout
        .bias_mask()
        .into_iter()
        .map(|is_bias| {
            let fixed = is_bias && dropout.bias != McdBias::Spikymix;
            if fixed || rng.random::<f64>() < keep {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `θ = z ⊙ m + (1 − z) ⊙ θ̄`.
pub fn mcd_reparam(m: &[f64], fallback: &[f64], z: &[f64]) -> Vec<f64> {
    m.iter()
        .zip(fallback)
        .zip(z)
        .map(|((m, c), z)| z * m + (1.0 - z) * c)
        .collect()
}

/// Loss and gradient in `m` for one minibatch under the frozen mask `z`:
/// `∇ = ∇l(θ) ⊙ z + (kld/σ²N) w ⊙ (m − θ̄)`.
#[allow(clippy::too_many_arguments)]
pub fn mcd_loss_and_grad<M: Model + ?Sized>(
    model: &M,
    m: &[f64],
    prior: &PriorSpec,
    dropout: &Dropout,
    batch: &Batch,
    n_total: f64,
    kld: f64,
    z: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if z.len() != m.len() || m.len() != prior.mean().len() {
        return Err(Error::Layout("mask, mean and prior lengths differ".into()));
    }
    let theta = mcd_reparam(m, prior.mean(), z);
    let (data_loss, g) = model.loss_and_grad(&theta, batch, tau)?;
    let scale = penalty_scale(kld, prior, n_total);
    let weights = dropout.penalty_weights(model.layout());
    let mut penalty = 0.0;
    let mut grad = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let coef = scale * weights[i];
        let d = m[i] - prior.mean()[i];
        penalty += coef * d * d;
        grad.push(g[i] * z[i] + coef * d);
    }
    Ok((data_loss + 0.5 * penalty, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdConfig {
    pub prior: PriorSpec,
    pub dropout: Dropout,
    pub kld: f64,
    pub nst: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub early_stop_patience: usize,
}

impl McdConfig {
    pub fn new(prior: PriorSpec) -> Self {
        McdConfig {
            prior,
            dropout: Dropout {
                p: 0.1,
                bias: McdBias::Spikymix,
            },
            kld: 1e-3,
            nst: 0,
            lr: 1e-2,
            momentum: 0.5,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            tau: 1.0,
            early_stop_patience: 10,
        }
    }
}

/// Momentum SGD on `m` with a fresh mask per minibatch and early stopping on
/// the validation NLL at `θ = m`.
pub fn mcd_fit<M: Model + ?Sized>(
    model: &M,
    m0: &FlatParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &McdConfig,
) -> Result<Fitted<McdState>> {
    Dropout::new(cfg.dropout.p, cfg.dropout.bias)?;
    if !(cfg.kld >= 0.0) || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config("kld must be >= 0, lr > 0 and momentum in [0, 1)".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("batch size and epochs must be >= 1".into()));
    }
    let layout = m0.layout().clone();
    let mut m = m0.to_vec();
    let mut velocity = vec![0.0; m.len()];
    let mut rng = stream(cfg.seed, MASK_STREAM);
    let n_total = train.len() as f64;
    let valid = valid.as_batch();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch as u64) {
            let z = mcd_mask(&layout, &cfg.dropout, &mut rng);
            let (loss, grad) = mcd_loss_and_grad(
                model,
                &m,
                &cfg.prior,
                &cfg.dropout,
                &batch,
                n_total,
                cfg.kld,
                &z,
                cfg.tau,
            )?;
            loss_sum += loss * batch.len() as f64;
            sgd_step(&mut m, &grad, &mut velocity, cfg.lr, cfg.momentum, None);
        }
        let train_loss = loss_sum / train.len() as f64;
        check_finite_loss(train_loss, epoch)?;
        let (valid_loss, valid_error) = evaluate(model, &m, &valid, cfg.tau)?;
        check_finite_loss(valid_loss, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_error,
        });
        log::debug!("mcd epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} err {valid_error:.4}");
        if stopper.observe(epoch, valid_loss, || m.clone()) {
            break;
        }
    }
    let fitted = stopper.finish(history)?;
    Ok(Fitted {
        state: McdState::new(FlatParams::new(fitted.state, layout)?),
        history: fitted.history,
        best_epoch: fitted.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new([("w", 4, false), ("b", 2, true)]))
    }

    #[test]
    fn zero_drop_keeps_everything() {
        let d = Dropout::new(0.0, McdBias::Spikymix).unwrap();
        let mut rng = stream(1, 0);
        assert_eq!(mcd_mask(&layout(), &d, &mut rng), vec![1.0; 6]);
        assert_eq!(d.penalty_weights(&layout()), vec![1.0; 6]);
    }

    #[test]
    fn bias_options() {
        let l = layout();
        let mut rng = stream(3, 0);
        for bias in [McdBias::Gaussian, McdBias::Ignore] {
            let d = Dropout::new(0.9, bias).unwrap();
            for _ in 0..20 {
                let z = mcd_mask(&l, &d, &mut rng);
                assert_eq!(&z[4..], &[1.0, 1.0]);
            }
        }
        let w = Dropout::new(0.25, McdBias::Gaussian).unwrap().penalty_weights(&l);
        assert_eq!(w, vec![0.75, 0.75, 0.75, 0.75, 1.0, 1.0]);
        let w = Dropout::new(0.25, McdBias::Ignore).unwrap().penalty_weights(&l);
        assert_eq!(&w[4..], &[0.0, 0.0]);
        let w = Dropout::new(0.25, McdBias::Spikymix).unwrap().penalty_weights(&l);
        assert_eq!(&w[4..], &[0.75, 0.75]);
    }

    #[test]
    fn reparam_selects_mean_or_fallback() {
        let theta = mcd_reparam(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0], &[1.0, 0.0, 1.0]);
        assert_eq!(theta, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_drop_probability() {
        assert!(Dropout::new(1.0, McdBias::Gaussian).is_err());
        assert!(Dropout::new(-0.1, McdBias::Gaussian).is_err());
        assert!(McdBias::parse("nope").is_err());
    }
}
