//! The differentiable-model contract every inference method is written
//! against, plus softmax/cross-entropy helpers.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::params::ParamLayout;

/// Rows of inputs with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A one-row batch holding example `i`.
    pub fn row(&self, i: usize) -> Batch {
        Batch {
            inputs: self.inputs.slice(s![i..i + 1, ..]).to_owned(),
            labels: vec![self.labels[i]],
        }
    }
}

/// A classifier whose parameters are passed in, never stored.
///
/// `loss_and_grad` returns the batch-mean loss divided by the temperature
/// `tau` and its exact gradient with respect to `theta`.
pub trait Model {
    fn layout(&self) -> &Arc<ParamLayout>;

    fn num_classes(&self) -> usize;

    fn num_params(&self) -> usize {
        self.layout().len()
    }

    fn forward_logits(&self, theta: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<(f64, Vec<f64>)>;

    /// Batch-mean loss without the gradient.
    fn loss(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<f64> {
        let logits = self.forward_logits(theta, batch.inputs.view())?;
        Ok(mean_cross_entropy(&logits, &batch.labels)? / tau)
    }

    /// `Σ_n (∇_θ l_n / τ)²` over the examples of `batch`, squared elementwise.
    ///
    /// The default runs one backward pass per example.
    fn sq_grad_sum(&self, theta: &[f64], batch: &Batch, tau: f64) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.num_params()];
        for i in 0..batch.len() {
            let (_, g) = self.loss_and_grad(theta, &batch.row(i), tau)?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi * gi;
            }
        }
        Ok(acc)
    }
}

/// Row-wise log-softmax via max-subtracted log-sum-exp.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv_into(f64::exp)
}

/// Mean of `−log softmax(z)_y` over rows.
pub fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let k = logits.ncols();
    let logp = log_softmax(logits);
    let mut total = 0.0;
    for (row, &y) in logp.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        total -= row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Mean loss and error rate of `theta` on `batch`, evaluated in row chunks to
/// bound memory.
pub fn evaluate<M: Model + ?Sized>(model: &M, theta: &[f64], batch: &Batch, tau: f64) -> Result<(f64, f64)> {
    const CHUNK: usize = 2048;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut errors = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let logits = model.forward_logits(theta, batch.inputs.slice(s![start..end, ..]))?;
        let labels = &batch.labels[start..end];
        loss_sum += mean_cross_entropy(&logits, labels)? * (end - start) as f64;
        errors += logits
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) != y)
            .count();
        start = end;
    }
    Ok((loss_sum / n as f64 / tau, errors as f64 / n as f64))
}
