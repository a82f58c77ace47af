//! Fully connected ReLU network with softmax cross-entropy.
//!
//! Weights of layer `l` are stored row-major as an `in × out` matrix named
//! `W{l+1}`, followed by the bias `b{l+1}` of length `out`, so the forward
//! pass is `Z = A·W + b`.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, Batch, Model};
use crate::params::{FlatParams, ParamLayout};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Arc<ParamLayout>,
    // (in, out, weight offset, bias offset) per layer
    layers: Vec<(usize, usize, usize, usize)>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        let dims = spec.dims();
        if dims.contains(&0) {
            return Err(Error::Config(format!("all MLP dimensions must be >= 1, got {dims:?}")));
        }
        let mut spans = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            spans.push((format!("W{}", l + 1), w[0] * w[1], false));
            spans.push((format!("b{}", l + 1), w[1], true));
        }
        let layout = ParamLayout::new(spans);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let e = &layout.entries()[2 * l];
                (w[0], w[1], e.offset, e.offset + e.len)
            })
            .collect();
        Ok(Mlp {
            spec,
            layout: Arc::new(layout),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Fan-in scaled uniform weights `U(−√(6/fan_in), √(6/fan_in))`, which keep
    /// the activation scale through ReLU layers, and zero biases.
    pub fn init_params(&self, seed: u64) -> FlatParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.len()];
        for &(fan_in, fan_out, w_off, _) in &self.layers {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[w_off..w_off + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        FlatParams::new(values, self.layout.clone()).expect("uniform init is finite")
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len() {
            return Err(Error::Layout(format!(
                "theta has {} entries, network expects {}",
                theta.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::Data(format!(
                "label {y} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn weights<'a>(&self, theta: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (fin, fout, w, b) = self.layers[l];
        let wv = ArrayView2::from_shape((fin, fout), &theta[w..w + fin * fout]).unwrap();
        let bv = ArrayView1::from(&theta[b..b + fout]);
        (wv, bv)
    }

    /// Returns post-ReLU hidden activations (one per hidden layer) and the
    /// output logits.
    fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        self.check_theta(theta)?;
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Data(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        let depth = self.layers.len();
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(depth - 1);
        for l in 0..depth {
            let (w, b) = self.weights(theta, l);
            let input = if l == 0 { x } else { hidden[l - 1].view() };
            let mut z = Array2::zeros((input.nrows(), w.ncols()));
            general_mat_mul(1.0, &input, &w, 0.0, &mut z);
            z += &b;
            if l + 1 < depth {
                z.mapv_inplace(|v| v.max(0.0));
                hidden.push(z);
            } else {
                return Ok((hidden, z));
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Backpropagates `dz` (gradient at the logits) through the network.
    ///
    /// With `squared`, each weight gradient accumulates `Σ_n (a_n δ_nᵀ)²`
    /// instead of `Σ_n a_n δ_nᵀ`; per-example products are separable, so
    /// `(A∘A)ᵀ(Δ∘Δ)` gives the sum of squared per-example gradients exactly.
    fn backward(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        hidden: &[Array2<f64>],
        mut dz: Array2<f64>,
        squared: bool,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; self.layout.len()];
        for l in (0..self.layers.len()).rev() {
            let (fin, fout, w_off, b_off) = self.layers[l];
            let input = if l == 0 { x } else { hidden[l - 1].view() };
            {
                let (gw, gb) = grad[w_off..].split_at_mut(b_off - w_off);
                let mut gw = ArrayViewMut2::from_shape((fin, fout), gw).unwrap();
                if squared {
                    let a2 = input.mapv(|v| v * v);
                    let d2 = dz.mapv(|v| v * v);
                    general_mat_mul(1.0, &a2.t(), &d2, 0.0, &mut gw);
                    for (g, s) in gb[..fout].iter_mut().zip(d2.sum_axis(Axis(0))) {
                        *g = s;
                    }
                } else {
                    general_mat_mul(1.0, &input.t(), &dz, 0.0, &mut gw);
                    for (g, s) in gb[..fout].iter_mut().zip(dz.sum_axis(Axis(0))) {
                        *g = s;
                    }
                }
            }
            if l > 0 {
                let (w, _) = self.weights(theta, l);
                let mut da = Array2::zeros((dz.nrows(), fin));
                general_mat_mul(1.0, &dz, &w.t(), 0.0, &mut da);
                da.zip_mut_with(&hidden[l - 1], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = da;
            }
        }
        grad
    }

    /// `softmax(z) − onehot(y)` scaled by `scale`, and the summed CE.
    fn output_delta(&self, logits: &Array2<f64>, labels: &[usize], scale: f64) -> (f64, Array2<f64>) {
        let mut dz = log_softmax(logits);
        let mut ce = 0.0;
        for (mut row, &y) in dz.rows_mut().into_iter().zip(labels) {
            ce -= row[y];
            row.mapv_inplace(f64::exp);
            row[y] -= 1.0;
            row.mapv_inplace(|v| v * scale);
        }
        (ce, dz)
    }
}

impl Model for Mlp {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn forward_logits(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(theta, inputs).map(|(_, z)| z)
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let x = batch.inputs.view();
        let (hidden, logits) = self.forward(theta, x)?;
        let n = batch.len() as f64;
        let (ce, dz) = self.output_delta(&logits, &batch.labels, 1.0 / (n * tau));
        let grad = self.backward(theta, x, &hidden, dz, false);
        Ok((ce / n / tau, grad))
    }

    fn sq_grad_sum(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let x = batch.inputs.view();
        let (hidden, logits) = self.forward(theta, x)?;
        let (_, dz) = self.output_delta(&logits, &batch.labels, 1.0 / tau);
        Ok(self.backward(theta, x, &hidden, dz, true))
    }
}

/// Builds an [`Mlp`] and draws its initial parameters.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<FlatParams> {
    Ok(Mlp::new(spec.clone())?.init_params(seed))
}

/// Convenience wrapper: logits of `theta` on `batch`.
pub fn forward_logits(mlp: &Mlp, theta: &FlatParams, batch: &Batch) -> Result<Array2<f64>> {
    mlp.forward_logits(theta, batch.inputs.view())
}

/// Convenience wrapper around [`Model::loss_and_grad`].
pub fn loss_and_grad(mlp: &Mlp, theta: &FlatParams, batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)> {
    mlp.loss_and_grad(theta, batch, tau)
}
