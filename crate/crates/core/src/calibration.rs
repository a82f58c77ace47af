//! Classwise calibration metrics, reliability plots and temperature scaling.
//!
//! Every (example, class) pair is one entry: its confidence is `p(y = j | x)`
//! and it is correct when `j` is the true label. Entries are binned by
//! confidence into `M` equal-width bins.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::log_softmax;
use crate::predictive::error_rate;

pub const DEFAULT_BINS: usize = 15;
pub const NLL_FLOOR: f64 = 1e-12;
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
const TEMPERATURE_TOL: f64 = 1e-4;
const CHECK_GRID: usize = 200;

/// Which ECE definition to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EceFormula {
    /// `Σ_m (n_m / NK) |acc_m − conf_m|` with per-bin averages.
    #[default]
    Standard,
    /// `(1/M) Σ_m (n_m / NK) |Σacc_m − Σconf_m|` with raw per-bin sums.
    Unnormalized,
}

impl EceFormula {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EceFormula::Standard),
            "unnormalized" => Ok(EceFormula::Unnormalized),
            other => Err(Error::Config(format!(
                "unknown ECE formula `{other}` (standard|unnormalized)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    pub binsize: Vec<u64>,
    pub acc_sum: Vec<f64>,
    pub conf_sum: Vec<f64>,
}

impl BinTable {
    pub fn new(bins: usize) -> Self {
        BinTable {
            binsize: vec![0; bins],
            acc_sum: vec![0.0; bins],
            conf_sum: vec![0.0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.binsize.len()
    }

    pub fn total(&self) -> u64 {
        self.binsize.iter().sum()
    }

    /// Elementwise sum of two tables with the same bin count.
    pub fn merge(&mut self, other: &BinTable) {
        assert_eq!(self.bins(), other.bins());
        for m in 0..self.bins() {
            self.binsize[m] += other.binsize[m];
            self.acc_sum[m] += other.acc_sum[m];
            self.conf_sum[m] += other.conf_sum[m];
        }
    }

    /// Nonempty bins as (center, accuracy, confidence, weight).
    pub fn rows(&self) -> Vec<ReliabilityRow> {
        let total = self.total() as f64;
        let width = 1.0 / self.bins() as f64;
        (0..self.bins())
            .filter(|&m| self.binsize[m] > 0)
            .map(|m| {
                let n = self.binsize[m] as f64;
                ReliabilityRow {
                    bin_center: (m as f64 + 0.5) * width,
                    accuracy: self.acc_sum[m] / n,
                    confidence: self.conf_sum[m] / n,
                    weight: n / total,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_center: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub weight: f64,
}

/// Bin index of a confidence: `min(floor(p·M), M − 1)`.
pub fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn bin_accumulate(probs: ArrayView2<'_, f64>, labels: &[usize], bins: usize) -> Result<BinTable> {
    if bins == 0 {
        return Err(Error::Config("number of bins must be >= 1".into()));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::Data(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut table = BinTable::new(bins);
    for (row, &y) in probs.axis_iter(Axis(0)).zip(labels) {
        for (j, &p) in row.iter().enumerate() {
            let m = bin_index(p, bins);
            table.binsize[m] += 1;
            if j == y {
                table.acc_sum[m] += 1.0;
            }
            table.conf_sum[m] += p;
        }
    }
    Ok(table)
}

/// `(ece, mce)`. MCE is the largest per-bin gap `|acc_m − conf_m|` over
/// nonempty bins under either formula.
pub fn ece_mce(table: &BinTable, formula: EceFormula) -> (f64, f64) {
    let total = table.total() as f64;
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    for m in 0..table.bins() {
        let size = table.binsize[m];
        if size == 0 {
            continue;
        }
        let n = size as f64;
        let gap = (table.acc_sum[m] / n - table.conf_sum[m] / n).abs();
        mce = mce.max(gap);
        ece += match formula {
            EceFormula::Standard => n / total * gap,
            EceFormula::Unnormalized => n / total * (table.acc_sum[m] - table.conf_sum[m]).abs(),
        };
    }
    if formula == EceFormula::Unnormalized {
        ece /= table.bins() as f64;
    }
    (ece, mce)
}

/// Mean `−log max(p_y, 1e−12)`.
pub fn nll(probs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), labels.len(), "one label per row");
    let total: f64 = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| -row[y].max(NLL_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// `softmax(scores / T)` row-wise.
pub fn apply_temperature(scores: ArrayView2<'_, f64>, temperature: f64) -> Array2<f64> {
    log_softmax(&scores.mapv(|z| z / temperature)).mapv_into(f64::exp)
}

/// Exact mean NLL of `softmax(scores / T)`.
pub fn temperature_nll(scores: ArrayView2<'_, f64>, labels: &[usize], temperature: f64) -> f64 {
    let logp = log_softmax(&scores.mapv(|z| z / temperature));
    let total: f64 = logp.axis_iter(Axis(0)).zip(labels).map(|(row, &y)| -row[y]).sum();
    total / labels.len() as f64
}

fn golden_section(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Temperature minimizing the validation NLL over `[0.05, 20]`.
///
/// Golden-section search is checked against a coarse grid; if a grid point
/// does better, the search is rerun on the bracket around it. A label vector
/// with a single class gives `T = 1` with a warning.
pub fn fit_temperature(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        log::warn!("temperature fit skipped: validation labels contain a single class");
        return Ok(1.0);
    }
    let f = |t: f64| temperature_nll(scores, labels, t);
    let (lo, hi) = TEMPERATURE_RANGE;
    let mut best = golden_section(&f, lo, hi, TEMPERATURE_TOL);
    let mut best_val = f(best);

    let ratio = (hi / lo).ln() / (CHECK_GRID - 1) as f64;
    let grid: Vec<f64> = (0..CHECK_GRID).map(|i| lo * (ratio * i as f64).exp()).collect();
    let (gi, gval) = grid
        .iter()
        .map(|&t| f(t))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if gval < best_val {
        let a = grid[gi.saturating_sub(1)];
        let b = grid[(gi + 1).min(CHECK_GRID - 1)];
        let t = golden_section(&f, a, b, TEMPERATURE_TOL);
        let v = f(t);
        (best, best_val) = if v <= gval { (t, v) } else { (grid[gi], gval) };
    }
    if !best_val.is_finite() {
        return Err(Error::Numeric("temperature objective is not finite".into()));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub temperature: f64,
    pub err: f64,
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub bins: Vec<ReliabilityRow>,
    #[serde(skip)]
    pub table: Option<BinTable>,
}

/// Metrics of `softmax(scores / T)` against `labels`.
pub fn calibration_report(
    scores: ArrayView2<'_, f64>,
    labels: &[usize],
    temperature: f64,
    bins: usize,
    formula: EceFormula,
) -> Result<CalibrationReport> {
    let probs = apply_temperature(scores, temperature);
    let table = bin_accumulate(probs.view(), labels, bins)?;
    let (ece, mce) = ece_mce(&table, formula);
    Ok(CalibrationReport {
        temperature,
        err: error_rate(&probs, labels),
        ece,
        mce,
        nll: nll(probs.view(), labels),
        bins: table.rows(),
        table: Some(table),
    })
}

pub const RELIABILITY_HEADER: &str = "bin_center,accuracy,confidence,weight";

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from(RELIABILITY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.bin_center, r.accuracy, r.confidence, r.weight);
    }
    out
}

/// Reliability diagram: per-bin accuracy bars, confidence markers and the
/// `y = x` diagonal, annotated with ECE, MCE and NLL.
pub fn reliability_svg(rows: &[ReliabilityRow], bins: usize, ece: f64, mce: f64, nll: f64, title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let x = |v: f64| PAD + v * SIZE;
    let y = |v: f64| PAD + (1.0 - v) * SIZE;
    let width = SIZE / bins as f64;
    let mut svg = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        total / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for r in rows {
        let left = x(r.bin_center) - width / 2.0;
        let top = y(r.accuracy);
        let _ = writeln!(
            svg,
            r##"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" fill-opacity="0.8" stroke="white"/>"##,
            width,
            y(0.0) - top
        );
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#dd8452"/>"##,
            x(r.bin_center),
            y(r.confidence)
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            x(v),
            y(0.0) + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#,
        total / 2.0,
        total - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        total / 2.0,
        total / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">ECE {:.3}%  MCE {:.3}%  NLL {:.4}</text>"#,
        x(0.0) + 8.0,
        y(1.0) + 18.0,
        100.0 * ece,
        100.0 * mce,
        nll
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the reliability CSV and SVG for a report.
pub fn reliability_emit(
    report: &CalibrationReport,
    bins: usize,
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
    title: &str,
) -> Result<()> {
    let csv_path = csv_path.as_ref();
    fs::write(csv_path, reliability_csv(&report.bins)).map_err(|e| Error::io(csv_path, e))?;
    let svg_path = svg_path.as_ref();
    let svg = reliability_svg(&report.bins, bins, report.ece, report.mce, report.nll, title);
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))
}
