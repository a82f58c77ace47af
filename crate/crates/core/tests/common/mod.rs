#![allow(dead_code)]

use std::sync::Arc;

use bnn::data::{synth_blobs, Dataset};
use bnn::model::{Batch, Model};
use bnn::params::ParamLayout;
use bnn::Result;
use ndarray::{Array2, ArrayView2};

/// Unit-noise Gaussian observations of an unknown mean:
/// `l(y; θ) = ½‖y − θ‖²`. Inputs are the observations, labels are ignored.
pub struct GaussianMean {
    layout: Arc<ParamLayout>,
}

impl GaussianMean {
    pub fn new(dim: usize) -> Self {
        GaussianMean {
            layout: Arc::new(ParamLayout::new([("mu", dim, false)])),
        }
    }

    pub fn dataset(observations: &[Vec<f64>]) -> Dataset {
        let dim = observations[0].len();
        let flat: Vec<f64> = observations.iter().flatten().copied().collect();
        let inputs = Array2::from_shape_vec((observations.len(), dim), flat).unwrap();
        Dataset::new(inputs, vec![0; observations.len()], 1).unwrap()
    }
}

impl Model for GaussianMean {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn forward_logits(&self, _theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((inputs.nrows(), 1)))
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)> {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for row in batch.inputs.rows() {
            for (i, &y) in row.iter().enumerate() {
                let d = theta[i] - y;
                loss += 0.5 * d * d;
                grad[i] += d;
            }
        }
        Ok((loss / (n * tau), grad.into_iter().map(|g| g / (n * tau)).collect()))
    }
}

/// Binary logistic regression on a scalar input with parameters `(w, b)`:
/// class-1 logit `w·x + b`, class-0 logit 0.
pub struct LogReg2 {
    layout: Arc<ParamLayout>,
}

impl LogReg2 {
    pub fn new() -> Self {
        LogReg2 {
            layout: Arc::new(ParamLayout::new([("w", 1, false), ("b", 1, true)])),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Model for LogReg2 {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn forward_logits(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((inputs.nrows(), 2));
        for (i, row) in inputs.rows().into_iter().enumerate() {
            out[[i, 1]] = theta[0] * row[0] + theta[1];
        }
        Ok(out)
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)> {
        let n = batch.len() as f64;
        let (mut loss, mut gw, mut gb) = (0.0, 0.0, 0.0);
        for (row, &y) in batch.inputs.rows().into_iter().zip(&batch.labels) {
            let z = theta[0] * row[0] + theta[1];
            // softplus(z) − y·z
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y as f64 * z;
            let r = sigmoid(z) - y as f64;
            gw += r * row[0];
            gb += r;
        }
        Ok((loss / (n * tau), vec![gw / (n * tau), gb / (n * tau)]))
    }
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Small separable-ish blobs problem: train/valid halves of 4 classes in 6-D.
pub fn small_blobs(seed: u64) -> (Dataset, Dataset) {
    let all = synth_blobs(4, 60, 6, 1.0, seed).unwrap();
    bnn::data::split(
        &all,
        bnn::data::SplitConfig {
            train_fraction: 0.5,
            seed,
        },
    )
    .unwrap()
}

pub fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, labels).unwrap()
}

pub fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub mod grad_checks {
    //! Relative errors between analytic gradients and central finite
    //! differences on a (4, [5], 3) network with minibatches of 8.

    use super::{numeric_grad, random_batch, random_vec, rel_error};
    use bnn::mc_dropout::{mcd_loss_and_grad, mcd_mask, Dropout, McdBias};
    use bnn::mlp::{Mlp, MlpSpec};
    use bnn::model::Model;
    use bnn::params::{BiasMode, FlatParams, PriorSpec};
    use bnn::rng::{standard_normal_vec, stream};
    use bnn::sgd::map_objective;
    use bnn::vi::{vi_loss_and_grads, Link, ViState};

    const H: f64 = 1e-6;

    pub fn small_mlp() -> Mlp {
        Mlp::new(MlpSpec::new(4, vec![5], 3)).unwrap()
    }

    fn prior_for(mlp: &Mlp, sigma: f64, bias: BiasMode, seed: u64) -> PriorSpec {
        let layout = mlp.layout().clone();
        PriorSpec::new(random_vec(layout.len(), 0.3, seed), sigma, bias, layout).unwrap()
    }

    pub fn backbone(seed: u64, tau: f64) -> f64 {
        let mlp = small_mlp();
        let batch = random_batch(8, 4, 3, seed);
        let theta = mlp.init_params(seed);
        let (_, g) = mlp.loss_and_grad(&theta, &batch, tau).unwrap();
        let fd = numeric_grad(|t| mlp.loss(t, &batch, tau).unwrap(), &theta, H);
        rel_error(&g, &fd)
    }

    /// `(m error, s̃ error)` with the noise frozen.
    pub fn vi(link: Link, bias: BiasMode, seed: u64) -> (f64, f64) {
        let mlp = small_mlp();
        let n = mlp.num_params();
        let batch = random_batch(8, 4, 3, seed);
        let prior = prior_for(&mlp, 0.8, bias, seed + 1);
        let m = mlp.init_params(seed + 2);
        // scales in [0.05, 0.3], well above the hinge floor
        let s_tilde: Vec<f64> = random_vec(n, 1.0, seed + 3)
            .iter()
            .map(|u| link.inverse(0.175 + 0.125 * u))
            .collect();
        let noise = standard_normal_vec(&mut stream(seed + 4, 0), n);
        let (n_total, kld) = (50.0, 2.0);
        let loss_at = |m: &[f64], st: &[f64]| {
            let state = ViState::new(
                FlatParams::new(m.to_vec(), mlp.layout().clone()).unwrap(),
                st.to_vec(),
                link,
            )
            .unwrap();
            vi_loss_and_grads(&mlp, &state, &prior, &batch, n_total, kld, &noise, 1.0).unwrap()
        };
        let lg = loss_at(&m, &s_tilde);
        let fd_m = numeric_grad(|x| loss_at(x, &s_tilde).loss, &m, H);
        let fd_s = numeric_grad(|x| loss_at(&m, x).loss, &s_tilde, H);
        (rel_error(&lg.grad_m, &fd_m), rel_error(&lg.grad_s_tilde, &fd_s))
    }

    /// Mask frozen.
    pub fn mc_dropout(bias: McdBias, seed: u64) -> f64 {
        let mlp = small_mlp();
        let batch = random_batch(8, 4, 3, seed);
        let prior = prior_for(&mlp, 0.5, BiasMode::Informative, seed + 1);
        let dropout = Dropout::new(0.3, bias).unwrap();
        let z = mcd_mask(mlp.layout(), &dropout, &mut stream(seed + 2, 0));
        let m = mlp.init_params(seed + 3);
        let f = |x: &[f64]| mcd_loss_and_grad(&mlp, x, &prior, &dropout, &batch, 40.0, 3.0, &z, 1.0).unwrap();
        let fd = numeric_grad(|x| f(x).0, &m, H);
        rel_error(&f(&m).1, &fd)
    }

    pub fn map(bias: BiasMode, seed: u64) -> f64 {
        let mlp = small_mlp();
        let batch = random_batch(8, 4, 3, seed);
        let prior = prior_for(&mlp, 0.1, bias, seed + 1);
        let theta = mlp.init_params(seed + 2);
        let f = |x: &[f64]| map_objective(&mlp, x, &batch, &prior, 20, 2.0, 1.0).unwrap();
        let fd = numeric_grad(|x| f(x).0, &theta, H);
        rel_error(&f(&theta).1, &fd)
    }
}
