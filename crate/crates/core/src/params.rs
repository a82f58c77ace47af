//! Flat parameter storage, layouts with bias tagging, and the isotropic
//! Gaussian prior shared by every inference method.
//!
//! All model parameters live in one contiguous `f64` vector. A
//! [`ParamLayout`] names the spans of that vector (one per weight or bias
//! tensor) and records which spans are biases, since several methods treat
//! bias coordinates differently.

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub is_bias: bool,
}

/// Named, contiguous spans covering `[0, len)` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    /// Builds a layout from `(name, len, is_bias)` triples, assigning offsets
    /// in order.
    pub fn new<S: Into<String>>(spans: impl IntoIterator<Item = (S, usize, bool)>) -> Self {
        let mut offset = 0;
        let entries = spans
            .into_iter()
            .map(|(name, len, is_bias)| {
                let entry = LayoutEntry {
                    name: name.into(),
                    offset,
                    len,
                    is_bias,
                };
                offset += len;
                entry
            })
            .collect();
        ParamLayout { entries, total: offset }
    }

    /// Validates explicit entries: contiguous, non-overlapping, starting at 0.
    pub fn from_entries(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut expected = 0;
        for e in &entries {
            if e.offset != expected {
                return Err(Error::Layout(format!(
                    "entry `{}` starts at {} but previous span ends at {}",
                    e.name, e.offset, expected
                )));
            }
            expected += e.len;
        }
        Ok(ParamLayout {
            entries,
            total: expected,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Per-coordinate bias flags.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in self.entries.iter().filter(|e| e.is_bias) {
            mask[e.offset..e.offset + e.len].fill(true);
        }
        mask
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Errors with the first entry whose name, length or bias flag differs.
    pub fn check_matches(&self, other: &ParamLayout) -> Result<()> {
        for (i, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a.name != b.name || a.len != b.len || a.is_bias != b.is_bias {
                return Err(Error::Layout(format!(
                    "entry {i}: expected `{}` (len {}, bias {}), found `{}` (len {}, bias {})",
                    a.name, a.len, a.is_bias, b.name, b.len, b.is_bias
                )));
            }
        }
        let n = self.entries.len().min(other.entries.len());
        if let Some(extra) = other.entries.get(n) {
            return Err(Error::Layout(format!("unexpected extra entry `{}`", extra.name)));
        }
        if let Some(missing) = self.entries.get(n) {
            return Err(Error::Layout(format!("missing entry `{}`", missing.name)));
        }
        Ok(())
    }
}

/// A parameter vector tied to its layout. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is {}", values[i])));
        }
        Ok(FlatParams { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        FlatParams {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Returns the span of values belonging to the named entry.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .entry(name)
            .map(|e| &self.values[e.offset..e.offset + e.len])
    }
}

impl Deref for FlatParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// How the prior treats bias coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// Same Gaussian prior as the weights.
    Informative,
    /// Flat prior `p(θ_b) ∝ 1`: biases contribute no prior term.
    Uninformative,
}

/// Isotropic Gaussian prior `N(mean, sigma² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    mean: Vec<f64>,
    sigma: f64,
    bias_mode: BiasMode,
    layout: Arc<ParamLayout>,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, sigma: f64, bias_mode: BiasMode, layout: Arc<ParamLayout>) -> Result<Self> {
        check_sigma(sigma)?;
        if mean.len() != layout.len() {
            return Err(Error::Layout(format!(
                "prior mean has {} entries, layout has {}",
                mean.len(),
                layout.len()
            )));
        }
        Ok(PriorSpec {
            mean,
            sigma,
            bias_mode,
            layout,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias_mode
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Per-coordinate flag: does the Gaussian prior apply here?
    pub fn prior_mask(&self) -> Vec<bool> {
        match self.bias_mode {
            BiasMode::Informative => vec![true; self.layout.len()],
            BiasMode::Uninformative => self.layout.bias_mask().into_iter().map(|b| !b).collect(),
        }
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(PriorSpec { sigma, ..self.clone() })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    // sigma = +inf is allowed: it is the flat-prior limit.
    if sigma > 0.0 && !sigma.is_nan() {
        Ok(())
    } else {
        Err(Error::Config(format!("prior sigma must be > 0, got {sigma}")))
    }
}

/// Gradient of `log N(θ; θ̄, σ² I)`: `−(θ − θ̄)/σ²`, and zero on bias
/// coordinates under an uninformative bias prior.
pub fn prior_log_grad(theta: &[f64], prior: &PriorSpec) -> Result<Vec<f64>> {
    if theta.len() != prior.mean.len() {
        return Err(Error::Layout(format!(
            "theta has {} entries, prior mean has {}",
            theta.len(),
            prior.mean.len()
        )));
    }
    let var = prior.variance();
    let mut grad: Vec<f64> = theta.iter().zip(&prior.mean).map(|(t, m)| -(t - m) / var).collect();
    if prior.bias_mode == BiasMode::Uninformative {
        for e in prior.layout.entries().iter().filter(|e| e.is_bias) {
            grad[e.offset..e.offset + e.len].fill(0.0);
        }
    }
    Ok(grad)
}

/// Zero-mean prior: no prior information.
pub fn zero_prior(layout: Arc<ParamLayout>, sigma: f64, bias_mode: BiasMode) -> Result<PriorSpec> {
    PriorSpec::new(vec![0.0; layout.len()], sigma, bias_mode, layout)
}

/// Prior centered at the parameters stored in a checkpoint (warm start).
///
/// The checkpoint layout must match `layout` entry for entry.
pub fn prior_from_checkpoint(
    path: impl AsRef<Path>,
    layout: Arc<ParamLayout>,
    sigma: f64,
    bias_mode: BiasMode,
) -> Result<PriorSpec> {
    check_sigma(sigma)?;
    let ckpt = Checkpoint::read(path)?;
    layout.check_matches(ckpt.layout())?;
    let mean = ckpt.center()?.to_vec();
    PriorSpec::new(mean, sigma, bias_mode, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new([("w", 2, false), ("b", 1, true)]))
    }

    #[test]
    fn layout_offsets_cover_range() {
        let l = layout();
        assert_eq!(l.len(), 3);
        assert_eq!(l.entries()[1].offset, 2);
        assert_eq!(l.bias_mask(), vec![false, false, true]);
    }

    #[test]
    fn from_entries_rejects_gaps() {
        let bad = vec![
            LayoutEntry {
                name: "a".into(),
                offset: 0,
                len: 2,
                is_bias: false,
            },
            LayoutEntry {
                name: "b".into(),
                offset: 3,
                len: 1,
                is_bias: true,
            },
        ];
        assert!(matches!(ParamLayout::from_entries(bad), Err(Error::Layout(_))));
    }

    #[test]
    fn flat_params_reject_non_finite() {
        let err = FlatParams::new(vec![0.0, f64::NAN, 1.0], layout()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(FlatParams::new(vec![0.0; 2], layout()).is_err());
    }

    #[test]
    fn grad_vanishes_at_mean() {
        let prior = PriorSpec::new(vec![0.3, -1.0, 2.0], 0.7, BiasMode::Informative, layout()).unwrap();
        let g = prior_log_grad(&[0.3, -1.0, 2.0], &prior).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_informative_and_uninformative() {
        let prior = zero_prior(layout(), 1.0, BiasMode::Informative).unwrap();
        assert_eq!(prior_log_grad(&[0.5, 0.0, 0.5], &prior).unwrap(), vec![-0.5, 0.0, -0.5]);
        let prior = zero_prior(layout(), 1.0, BiasMode::Uninformative).unwrap();
        assert_eq!(prior_log_grad(&[0.5, 0.0, 0.5], &prior).unwrap(), vec![-0.5, 0.0, 0.0]);
    }

    #[test]
    fn zero_prior_mean_and_sigma_checks() {
        let p = zero_prior(layout(), 1.0, BiasMode::Informative).unwrap();
        assert_eq!(p.mean(), &[0.0, 0.0, 0.0]);
        assert!(matches!(
            zero_prior(layout(), 0.0, BiasMode::Informative),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            zero_prior(layout(), -1.0, BiasMode::Informative),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn length_mismatch_is_layout_error() {
        let p = zero_prior(layout(), 1.0, BiasMode::Informative).unwrap();
        assert!(matches!(prior_log_grad(&[1.0], &p), Err(Error::Layout(_))));
    }

    #[test]
    fn check_matches_names_extra_entry() {
        let a = ParamLayout::new([("w", 2, false)]);
        let b = ParamLayout::new([("w", 2, false), ("extra", 4, true)]);
        let msg = a.check_matches(&b).unwrap_err().to_string();
        assert!(msg.contains("extra"), "{msg}");
    }
}
