//! Posterior-predictive class probabilities by Monte-Carlo averaging:
//!
//! ```text
//! p(y | x, D) ≈ (1/S) Σ_s softmax(f(x; θ_s)),   θ_s ~ q(θ)
//! ```
//!
//! With `nst = 0` a single forward pass at the posterior center is used.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::laplace::{la_sample, LaplacePosterior};
use crate::mc_dropout::{mcd_mask, mcd_reparam, Dropout, McdState};
use crate::model::{argmax, log_softmax, Model};
use crate::params::{FlatParams, ParamLayout};
use crate::rng::{standard_normal_vec, stream};
use crate::sgld::{sgld_sample, MomentAccumulator};
use crate::vi::{vi_sample, ViState};

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Point,
    Vi,
    McDropout,
    Sgld,
    Laplace,
}

/// Uniform access to a fitted posterior.
pub trait PosteriorSampler {
    fn kind(&self) -> SamplerKind;

    fn layout(&self) -> &Arc<ParamLayout>;

    /// Deterministic center used when `nst = 0`.
    fn mean(&self) -> FlatParams;

    fn draw(&self, rng: &mut ChaCha8Rng) -> FlatParams;
}

impl PosteriorSampler for FlatParams {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Point
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        FlatParams::layout(self)
    }

    fn mean(&self) -> FlatParams {
        self.clone()
    }

    fn draw(&self, _rng: &mut ChaCha8Rng) -> FlatParams {
        self.clone()
    }
}

impl PosteriorSampler for ViState {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Vi
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        ViState::layout(self)
    }

    fn mean(&self) -> FlatParams {
        self.m().clone()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> FlatParams {
        let noise = standard_normal_vec(rng, self.m().len());
        vi_sample(self, &noise).expect("noise length matches state")
    }
}

impl PosteriorSampler for MomentAccumulator {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Sgld
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        MomentAccumulator::layout(self)
    }

    fn mean(&self) -> FlatParams {
        FlatParams::new(MomentAccumulator::mean(self).to_vec(), self.layout().clone()).expect("finite SGLD mean")
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> FlatParams {
        sgld_sample(self, rng)
    }
}

impl PosteriorSampler for LaplacePosterior {
    fn kind(&self) -> SamplerKind {
        SamplerKind::Laplace
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        self.theta_star().layout()
    }

    fn mean(&self) -> FlatParams {
        self.theta_star().clone()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> FlatParams {
        la_sample(self, rng)
    }
}

/// MC-Dropout posterior: the learned mean, the drop setting and the
/// fallback (prior mean) taken by dropped coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct McdPosterior {
    pub state: McdState,
    pub dropout: Dropout,
    pub fallback: Vec<f64>,
}

impl PosteriorSampler for McdPosterior {
    fn kind(&self) -> SamplerKind {
        SamplerKind::McDropout
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        self.state.m().layout()
    }

    fn mean(&self) -> FlatParams {
        self.state.m().clone()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> FlatParams {
        let z = mcd_mask(self.layout(), &self.dropout, rng);
        let theta = mcd_reparam(self.state.m(), &self.fallback, &z);
        FlatParams::new(theta, self.layout().clone()).expect("finite dropout sample")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    /// Row-stochastic `N × K` predictive probabilities.
    pub probs: Array2<f64>,
    /// Scores that reproduce `probs` under softmax: the logits when
    /// `nst = 0`, otherwise `log probs`. Temperature scaling acts on these.
    pub log_scores: Array2<f64>,
    /// Per-draw probabilities, kept on request.
    pub per_sample: Option<Vec<Array2<f64>>>,
}

fn chunked_logits<M: Model + ?Sized>(model: &M, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = inputs.nrows();
    let mut out = Array2::zeros((n, model.num_classes()));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = model.forward_logits(theta, inputs.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&logits);
        start = end;
    }
    Ok(out)
}

/// Softmax probabilities of one parameter vector.
pub fn probs_at<M: Model + ?Sized>(model: &M, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(log_softmax(&chunked_logits(model, theta, inputs)?).mapv_into(f64::exp))
}

/// Arithmetic mean of the softmax outputs of the given parameter vectors,
/// summed in the given order.
pub fn predict_thetas<M: Model + ?Sized>(
    model: &M,
    thetas: &[FlatParams],
    inputs: ArrayView2<'_, f64>,
) -> Result<PredictiveResult> {
    if thetas.is_empty() {
        return Err(Error::Config("need at least one parameter vector".into()));
    }
    let mut sum = Array2::<f64>::zeros((inputs.nrows(), model.num_classes()));
    for theta in thetas {
        sum += &probs_at(model, theta, inputs)?;
    }
    let probs = sum / thetas.len() as f64;
    Ok(from_probs(probs, None))
}

fn from_probs(probs: Array2<f64>, per_sample: Option<Vec<Array2<f64>>>) -> PredictiveResult {
    let log_scores = probs.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
    PredictiveResult {
        probs,
        log_scores,
        per_sample,
    }
}

/// Predictive distribution on `inputs`. Draw `s` uses the ChaCha stream `s`
/// of `seed`, so results do not depend on evaluation order.
pub fn predict<M: Model + ?Sized, P: PosteriorSampler + ?Sized>(
    model: &M,
    sampler: &P,
    inputs: ArrayView2<'_, f64>,
    nst: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<PredictiveResult> {
    if nst == 0 {
        let logits = chunked_logits(model, &sampler.mean(), inputs)?;
        let probs = log_softmax(&logits).mapv_into(f64::exp);
        let per_sample = keep_samples.then(|| vec![probs.clone()]);
        return Ok(PredictiveResult {
            probs,
            log_scores: logits,
            per_sample,
        });
    }
    let mut sum = Array2::<f64>::zeros((inputs.nrows(), model.num_classes()));
    let mut kept = keep_samples.then(|| Vec::with_capacity(nst));
    for draw in 0..nst {
        let mut rng = stream(seed, draw as u64);
        let theta = sampler.draw(&mut rng);
        let p = probs_at(model, &theta, inputs)?;
        sum += &p;
        if let Some(k) = kept.as_mut() {
            k.push(p);
        }
    }
    Ok(from_probs(sum / nst as f64, kept))
}

/// Fraction of rows whose argmax (ties to the lowest index) differs from the label.
pub fn error_rate(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), labels.len(), "one label per row");
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// CSV with a `label` column followed by `p0..p{K-1}`.
pub fn probs_csv(probs: &Array2<f64>, labels: &[usize]) -> String {
    let mut out = String::from("label");
    for k in 0..probs.ncols() {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for (row, y) in probs.axis_iter(Axis(0)).zip(labels) {
        let _ = write!(out, "{y}");
        for p in row {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

pub fn write_probs_csv(probs: &Array2<f64>, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, probs_csv(probs, labels)).map_err(|e| Error::io(path, e))
}
