//! Pieces shared by every trainer: per-epoch records, early stopping and the
//! metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_error: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,valid_loss,valid_error";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.valid_loss, r.valid_error);
    }
    out
}

pub fn write_metrics_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}

/// Result of a training run: the state restored from the best validation
/// epoch, plus the full history.
#[derive(Debug, Clone)]
pub struct Fitted<S> {
    pub state: S,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Tracks the best validation loss; `patience == 0` disables stopping but
/// still restores the best state.
pub(crate) struct EarlyStopping<S> {
    patience: usize,
    best: Option<(f64, usize, S)>,
    stale: usize,
}

impl<S: Clone> EarlyStopping<S> {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns true when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, valid_loss: f64, state: impl FnOnce() -> S) -> bool {
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => valid_loss < *best,
        };
        if improved {
            self.best = Some((valid_loss, epoch, state()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub(crate) fn finish(self, history: Vec<EpochRecord>) -> Result<Fitted<S>> {
        let (_, best_epoch, state) = self
            .best
            .ok_or_else(|| Error::Config("training ran for zero epochs".into()))?;
        Ok(Fitted {
            state,
            history,
            best_epoch,
        })
    }
}

pub(crate) fn check_finite_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "training diverged: loss {loss} at epoch {epoch}"
        )))
    }
}
