//! Mean-field Gaussian variational inference (Bayes-by-Backprop).
//!
//! The posterior is `q(θ) = N(m, diag(s²))` with `s = g(s̃)` for a positive
//! link `g`. Training minimizes the data-size normalized negative ELBO with a
//! single reparameterized sample `θ = m + ε ⊙ s` per minibatch:
//!
//! ```text
//! loss = (1/|B|) Σ l(x, y; θ) + (kld/N) Σ_i ½(log σ²/s_i² − 1 + s_i²/σ² + (m_i − θ̄_i)²/σ²)
//! ```
//!
//! Gradients for a general link follow from the chain rule:
//!
//! ```text
//! ∂/∂m  = ∇l(θ) + (kld/N)(m − θ̄)/σ²
//! ∂/∂s̃ = ∇l(θ) ⊙ ε ⊙ g'(s̃) + (kld/N)(g'(s̃)/s)(s²/σ² − 1)
//! ```
//!
//! For `g = exp`, `g'(s̃)/s = 1` and the KL part reduces to `s²/σ² − 1`.
//! For softplus `g'(s̃) = sigmoid(s̃)`; for the hinge `g'(s̃) = 1[s̃ > s_min]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, Model};
use crate::params::{FlatParams, ParamLayout, PriorSpec};
use crate::rng::{standard_normal_vec, stream, TRAIN_NOISE_STREAM};
use crate::sgd::sgd_step;
use crate::train::{check_finite_loss, EarlyStopping, EpochRecord, Fitted};

pub const HINGE_S_MIN: f64 = 1e-8;

/// Positive link `s = g(s̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Exp,
    Softplus,
    /// `max(s̃, s_min)`.
    Hinge(f64),
}

impl Link {
    pub fn hinge() -> Self {
        Link::Hinge(HINGE_S_MIN)
    }

    pub fn apply(self, st: f64) -> f64 {
        match self {
            Link::Exp => st.exp(),
            Link::Softplus => softplus(st),
            Link::Hinge(s_min) => st.max(s_min),
        }
    }

    /// `g'(s̃)`.
    pub fn derivative(self, st: f64) -> f64 {
        match self {
            Link::Exp => st.exp(),
            Link::Softplus => sigmoid(st),
            Link::Hinge(s_min) => {
                if st > s_min {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `(g(s̃), g'(s̃))` sharing the transcendental work.
    pub fn apply_with_derivative(self, st: f64) -> (f64, f64) {
        match self {
            Link::Exp => {
                let s = st.exp();
                (s, s)
            }
            Link::Softplus => {
                let e = (-st.abs()).exp();
                let s = st.max(0.0) + e.ln_1p();
                let ds = if st >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (s, ds)
            }
            Link::Hinge(_) => (self.apply(st), self.derivative(st)),
        }
    }

    /// `s̃` with `g(s̃) = s`, for `s > 0`.
    pub fn inverse(self, s: f64) -> f64 {
        match self {
            Link::Exp => s.ln(),
            // log(e^s − 1) = s + log(1 − e^{−s})
            Link::Softplus => s + (-(-s).exp_m1()).ln(),
            Link::Hinge(_) => s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Exp => "exp",
            Link::Softplus => "softplus",
            Link::Hinge(_) => "hinge",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Link::Exp),
            "softplus" => Ok(Link::Softplus),
            "hinge" => Ok(Link::hinge()),
            other => Err(Error::Config(format!("unknown link `{other}` (exp|softplus|hinge)"))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViState {
    m: FlatParams,
    s_tilde: Vec<f64>,
    link: Link,
}

impl ViState {
    pub fn new(m: FlatParams, s_tilde: Vec<f64>, link: Link) -> Result<Self> {
        if s_tilde.len() != m.len() {
            return Err(Error::Layout(format!(
                "s_tilde has {} entries, m has {}",
                s_tilde.len(),
                m.len()
            )));
        }
        Ok(ViState { m, s_tilde, link })
    }

    /// Mean `m`, every scale set to `s0`.
    pub fn init(m: FlatParams, link: Link, s0: f64) -> Result<Self> {
        if !(s0 > 0.0) {
            return Err(Error::Config(format!("initial scale must be > 0, got {s0}")));
        }
        let st = link.inverse(s0);
        let n = m.len();
        ViState::new(m, vec![st; n], link)
    }

    pub fn m(&self) -> &FlatParams {
        &self.m
    }

    pub fn s_tilde(&self) -> &[f64] {
        &self.s_tilde
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn scales(&self) -> Vec<f64> {
        self.s_tilde.iter().map(|&st| self.link.apply(st)).collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        self.m.layout()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("vi", self.layout().clone())
            .with_vector("m", self.m.to_vec())
            .with_vector("s_tilde", self.s_tilde.clone())
            .with_tag("link", self.link.name());
        if let Link::Hinge(s_min) = self.link {
            ckpt = ckpt.with_scalar("s_min", s_min);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let link = match (ckpt.tag("link"), ckpt.scalar("s_min")) {
            (Some("hinge"), Some(s_min)) => Link::Hinge(s_min),
            (Some(name), _) => Link::parse(name)?,
            (None, _) => return Err(Error::Layout("vi checkpoint has no link tag".into())),
        };
        let m = FlatParams::new(ckpt.require_vector("m")?.to_vec(), ckpt.layout().clone())?;
        ViState::new(m, ckpt.require_vector("s_tilde")?.to_vec(), link)
    }
}

/// `θ = m + noise ⊙ g(s̃)`.
pub fn vi_sample(state: &ViState, noise: &[f64]) -> Result<FlatParams> {
    if noise.len() != state.m.len() {
        return Err(Error::Layout(format!(
            "noise has {} entries, state has {}",
            noise.len(),
            state.m.len()
        )));
    }
    let theta = state
        .m
        .iter()
        .zip(&state.s_tilde)
        .zip(noise)
        .map(|((m, &st), e)| m + e * state.link.apply(st))
        .collect();
    FlatParams::new(theta, state.layout().clone())
}

/// `KL(q ‖ p)` summed over the coordinates that carry a prior.
pub fn vi_kl(state: &ViState, prior: &PriorSpec) -> f64 {
    let var = prior.variance();
    prior
        .prior_mask()
        .into_iter()
        .enumerate()
        .filter(|&(_, has_prior)| has_prior)
        .map(|(i, _)| kl_coord(state.link.apply(state.s_tilde[i]), state.m[i] - prior.mean()[i], var))
        .sum()
}

fn kl_coord(s: f64, d: f64, var: f64) -> f64 {
    let s2 = s * s;
    0.5 * ((var / s2).ln() - 1.0 + s2 / var + d * d / var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViLossGrad {
    pub loss: f64,
    pub grad_m: Vec<f64>,
    pub grad_s_tilde: Vec<f64>,
}

/// Single-sample negative ELBO and its gradients at `θ = m + noise ⊙ s`.
#[allow(clippy::too_many_arguments)]
pub fn vi_loss_and_grads<M: Model + ?Sized>(
    model: &M,
    state: &ViState,
    prior: &PriorSpec,
    batch: &Batch,
    n_total: f64,
    kld: f64,
    noise: &[f64],
    tau: f64,
) -> Result<ViLossGrad> {
    if !(n_total > 0.0) {
        return Err(Error::Config(format!("data size must be > 0, got {n_total}")));
    }
    let n = state.m.len();
    let mut scale = Vec::with_capacity(n);
    let mut slope = Vec::with_capacity(n);
    for &st in &state.s_tilde {
        let (s, ds) = state.link.apply_with_derivative(st);
        scale.push(s);
        slope.push(ds);
    }
    let theta: Vec<f64> = (0..n).map(|i| state.m[i] + noise[i] * scale[i]).collect();
    let (data_loss, g) = model.loss_and_grad(&theta, batch, tau)?;
    let mut grad_s_tilde: Vec<f64> = (0..n).map(|i| g[i] * noise[i] * slope[i]).collect();
    let mut grad_m = g;
    let mut loss = data_loss;
    if kld != 0.0 {
        let var = prior.variance();
        let weight = kld / n_total;
        let mask = prior.prior_mask();
        let mut kl = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let s = scale[i];
            let d = state.m[i] - prior.mean()[i];
            grad_m[i] += weight * d / var;
            grad_s_tilde[i] += weight * slope[i] / s * (s * s / var - 1.0);
            kl += kl_coord(s, d, var);
        }
        loss += weight * kl;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite VI loss {loss}")));
    }
    Ok(ViLossGrad {
        loss,
        grad_m,
        grad_s_tilde,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViConfig {
    pub prior: PriorSpec,
    pub kld: f64,
    pub nst: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub early_stop_patience: usize,
    pub link: Link,
    /// Initial posterior scale; `None` means `σ/100`.
    pub init_scale: Option<f64>,
}

impl ViConfig {
    pub fn new(prior: PriorSpec) -> Self {
        ViConfig {
            prior,
            kld: 1e-3,
            nst: 0,
            lr: 1e-2,
            momentum: 0.5,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            tau: 1.0,
            early_stop_patience: 10,
            link: Link::Softplus,
            init_scale: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.kld >= 0.0) {
            return Err(Error::Config(format!("kld must be >= 0, got {}", self.kld)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be > 0 and momentum in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fits `q` starting from mean `m0` and scale `cfg.init_scale` (default σ/100).
pub fn vi_fit<M: Model + ?Sized>(
    model: &M,
    m0: &FlatParams,
    train: &Dataset,
    valid: &Dataset,
    cfg: &ViConfig,
) -> Result<Fitted<ViState>> {
    let s0 = cfg.init_scale.unwrap_or(cfg.prior.sigma() / 100.0);
    let state = ViState::init(m0.clone(), cfg.link, s0)?;
    vi_train(model, state, train, valid, cfg)
}

/// Momentum SGD on `(m, s̃)` with one fresh ε per minibatch and early
/// stopping on the validation NLL of the mean `m`.
pub fn vi_train<M: Model + ?Sized>(
    model: &M,
    mut state: ViState,
    train: &Dataset,
    valid: &Dataset,
    cfg: &ViConfig,
) -> Result<Fitted<ViState>> {
    cfg.validate()?;
    let n = state.m.len();
    let layout = state.layout().clone();
    let mut m = state.m.to_vec();
    let mut vel_m = vec![0.0; n];
    let mut vel_s = vec![0.0; n];
    let mut rng = stream(cfg.seed, TRAIN_NOISE_STREAM);
    let n_total = train.len() as f64;
    let valid = valid.as_batch();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch as u64) {
            let noise = standard_normal_vec(&mut rng, n);
            state.m = FlatParams::new(m.clone(), layout.clone())?;
            let lg = vi_loss_and_grads(model, &state, &cfg.prior, &batch, n_total, cfg.kld, &noise, cfg.tau)?;
            loss_sum += lg.loss * batch.len() as f64;
            sgd_step(&mut m, &lg.grad_m, &mut vel_m, cfg.lr, cfg.momentum, None);
            sgd_step(
                &mut state.s_tilde,
                &lg.grad_s_tilde,
                &mut vel_s,
                cfg.lr,
                cfg.momentum,
                None,
            );
        }
        state.m = FlatParams::new(m.clone(), layout.clone())?;
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
        log::debug!("vi epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} err {valid_error:.4}");
        if stopper.observe(epoch, valid_loss, || state.clone()) {
            break;
        }
    }
    stopper.finish(history)
}
