//! Command-line front end: flag parsing, per-method dispatch, evaluation and
//! run artifacts.
//!
//! A run writes into its output directory:
//!
//! - `config.json`: the parsed [`RunConfig`]
//! - `metrics.csv`: per-epoch training and validation metrics
//! - `posterior.ckpt`: the fitted posterior
//! - `results.csv`: test metrics for `nst = 0` and the requested `nst`, each
//!   at `T = 1` and at the validation-fitted temperature
//! - `reliability_T1.{csv,svg}` and `reliability_Tstar.{csv,svg}`
//!
//! and prints one `FINAL method=<m> nst=<s> err=<e> ece=<a> mce=<b> nll=<c>`
//! line per evaluated `nst`. Error rates and calibration errors are fractions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::calibration::{calibration_report, fit_temperature, reliability_emit, CalibrationReport, EceFormula};
use crate::checkpoint::Checkpoint;
use crate::data::{load_mnist, split, synth_blobs, Dataset, SplitConfig};
use crate::error::{Error, Result};
use crate::laplace::la_fit;
use crate::mc_dropout::{mcd_fit, Dropout, McdBias, McdConfig};
use crate::mlp::{Mlp, MlpSpec};
use crate::model::Model;
use crate::params::{BiasMode, FlatParams, PriorSpec};
use crate::predictive::{predict, McdPosterior, PosteriorSampler};
use crate::rng::derive_seed;
use crate::sgd::{train_vanilla, BiasPenalty, SgdConfig, WdCenter};
use crate::sgld::{sgld_fit, SgldConfig};
use crate::train::{write_metrics_csv, EpochRecord};
use crate::vi::{vi_fit, Link, ViConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Vi,
    #[value(name = "mc_dropout", alias = "mc-dropout")]
    McDropout,
    Sgld,
    La,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Vi => "vi",
            Method::McDropout => "mc_dropout",
            Method::Sgld => "sgld",
            Method::La => "la",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Mnist {
        dir: PathBuf,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    Vanilla {
        wd: f64,
        bias: BiasPenalty,
    },
    Vi {
        prior_sig: f64,
        bias: BiasMode,
        kld: f64,
        link: Link,
        init_scale: f64,
    },
    McDropout {
        prior_sig: f64,
        bias: McdBias,
        kld: f64,
        p_drop: f64,
    },
    Sgld {
        prior_sig: f64,
        bias: BiasMode,
        ninflate: f64,
        nd: f64,
        burnin: usize,
        thin: usize,
    },
    La {
        prior_sig: f64,
        bias: BiasMode,
        ninflate: f64,
        damping: f64,
    },
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Vanilla { .. } => Method::Vanilla,
            MethodConfig::Vi { .. } => Method::Vi,
            MethodConfig::McDropout { .. } => Method::McDropout,
            MethodConfig::Sgld { .. } => Method::Sgld,
            MethodConfig::La { .. } => Method::La,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub nst: usize,
    pub bins: usize,
    pub ece_formula: EceFormula,
}

/// Everything that determines a run. Serialized verbatim to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backbone: MlpSpec,
    pub pretrained: Option<PathBuf>,
    pub seed: u64,
    pub optim: OptimConfig,
    pub params: MethodConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn method(&self) -> Method {
        self.params.method()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Parsed command line: the run plus flags that do not affect results.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: RunConfig,
    pub force: bool,
}

#[derive(Parser, Debug)]
#[command(
    name = "bnn",
    about = "Train a Bayesian MLP classifier and report error and calibration",
    version
)]
struct Args {
    /// Inference method.
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1000,1000,1000")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    momentum: f64,
    #[arg(long, alias = "batch_size", default_value_t = 128)]
    batch_size: usize,
    /// Master seed; init, shuffling and sampling use derived seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint used as initial parameters and prior mean.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Early-stopping patience in epochs (0 disables).
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Likelihood temperature dividing the loss.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,

    /// [vanilla] weight decay coefficient.
    #[arg(long)]
    wd: Option<f64>,
    /// Bias treatment: penalty|ignore (vanilla), informative|uninformative
    /// (vi, sgld, la), gaussian|spikymix|ignore (mc_dropout).
    #[arg(long)]
    bias: Option<String>,
    /// Prior standard deviation.
    #[arg(long, alias = "prior_sig")]
    prior_sig: Option<f64>,
    /// [vi, mc_dropout] KL discount factor.
    #[arg(long)]
    kld: Option<f64>,
    /// Posterior samples at test time; 0 predicts at the posterior mean.
    #[arg(long)]
    nst: Option<usize>,
    /// [mc_dropout] drop probability.
    #[arg(long, alias = "p_drop")]
    p_drop: Option<f64>,
    /// [sgld, la] data inflation factor.
    #[arg(long, alias = "Ninflate")]
    ninflate: Option<f64>,
    /// [sgld] noise discount factor.
    #[arg(long)]
    nd: Option<f64>,
    /// [sgld] burn-in epochs.
    #[arg(long)]
    burnin: Option<usize>,
    /// [sgld] thinning interval in batch iterations.
    #[arg(long)]
    thin: Option<usize>,
    /// [la] damping added to the posterior precision.
    #[arg(long)]
    damping: Option<f64>,
    /// [vi] positive link for the posterior scale: exp|softplus|hinge.
    #[arg(long)]
    link: Option<String>,
    /// [vi] initial posterior scale; defaults to prior-sig/100.
    #[arg(long, alias = "init_scale")]
    init_scale: Option<f64>,

    /// Confidence bins for ECE/MCE.
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// standard|unnormalized.
    #[arg(long, alias = "ece_formula", default_value = "standard")]
    ece_formula: String,
    #[arg(long, alias = "out_dir")]
    out_dir: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,

    /// [mnist] directory with the four IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// [blobs] number of classes.
    #[arg(long)]
    blob_classes: Option<usize>,
    /// [blobs] points per class.
    #[arg(long)]
    blob_per_class: Option<usize>,
    /// [blobs] input dimension.
    #[arg(long)]
    blob_dim: Option<usize>,
    /// [blobs] within-class standard deviation.
    #[arg(long)]
    blob_spread: Option<f64>,
}

pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

fn reject(flag: &str, given: bool, allowed: &[Method], method: Method) -> Result<()> {
    if given && !allowed.contains(&method) {
        let names: Vec<&str> = allowed.iter().map(|m| m.name()).collect();
        return Err(Error::Config(format!(
            "--{flag} does not apply to --method {} (only {})",
            method.name(),
            names.join(", ")
        )));
    }
    Ok(())
}

fn positive(flag: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("--{flag} must be a finite number > 0, got {v}")))
    }
}

fn non_negative(flag: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("--{flag} must be a finite number >= 0, got {v}")))
    }
}

fn bias_mode(s: Option<&str>) -> Result<BiasMode> {
    match s.unwrap_or("informative") {
        "informative" => Ok(BiasMode::Informative),
        "uninformative" => Ok(BiasMode::Uninformative),
        other => Err(Error::Config(format!(
            "--bias `{other}` is not valid here (informative|uninformative)"
        ))),
    }
}

fn from_args(a: Args) -> Result<Invocation> {
    use Method::*;
    let m = a.method;
    let bayes = [Vi, McDropout, Sgld, La];
    reject("wd", a.wd.is_some(), &[Vanilla], m)?;
    reject("prior-sig", a.prior_sig.is_some(), &bayes, m)?;
    reject("kld", a.kld.is_some(), &[Vi, McDropout], m)?;
    reject("nst", a.nst.is_some(), &bayes, m)?;
    reject("p-drop", a.p_drop.is_some(), &[McDropout], m)?;
    reject("ninflate", a.ninflate.is_some(), &[Sgld, La], m)?;
    reject("nd", a.nd.is_some(), &[Sgld], m)?;
    reject("burnin", a.burnin.is_some(), &[Sgld], m)?;
    reject("thin", a.thin.is_some(), &[Sgld], m)?;
    reject("damping", a.damping.is_some(), &[La], m)?;
    reject("link", a.link.is_some(), &[Vi], m)?;
    reject("init-scale", a.init_scale.is_some(), &[Vi], m)?;

    let default_sig = if m == La { 0.01 } else { 1.0 };
    let prior_sig = positive("prior-sig", a.prior_sig.unwrap_or(default_sig))?;
    let bias = a.bias.as_deref();
    let params = match m {
        Vanilla => MethodConfig::Vanilla {
            wd: non_negative("wd", a.wd.unwrap_or(0.0))?,
            bias: match bias.unwrap_or("penalty") {
                "penalty" => BiasPenalty::Penalty,
                "ignore" => BiasPenalty::Ignore,
                other => {
                    return Err(Error::Config(format!(
                        "--bias `{other}` is not valid here (penalty|ignore)"
                    )));
                }
            },
        },
        Vi => MethodConfig::Vi {
            prior_sig,
            bias: bias_mode(bias)?,
            kld: non_negative("kld", a.kld.unwrap_or(1e-3))?,
            link: Link::parse(a.link.as_deref().unwrap_or("softplus"))
                .map_err(|_| Error::Config("--link must be exp, softplus or hinge".into()))?,
            init_scale: positive("init-scale", a.init_scale.unwrap_or(prior_sig / 100.0))?,
        },
        McDropout => {
            let p_drop = a.p_drop.unwrap_or(0.1);
            if !(0.0..1.0).contains(&p_drop) {
                return Err(Error::Config(format!("--p-drop must lie in [0, 1), got {p_drop}")));
            }
            MethodConfig::McDropout {
                prior_sig,
                bias: McdBias::parse(bias.unwrap_or("spikymix"))
                    .map_err(|_| Error::Config("--bias must be gaussian, spikymix or ignore".into()))?,
                kld: non_negative("kld", a.kld.unwrap_or(1e-3))?,
                p_drop,
            }
        }
        Sgld => {
            let thin = a.thin.unwrap_or(10);
            if thin == 0 {
                return Err(Error::Config("--thin must be >= 1".into()));
            }
            let burnin = a.burnin.unwrap_or(20);
            if burnin >= a.epochs {
                return Err(Error::Config(format!(
                    "--burnin ({burnin}) must be smaller than --epochs ({})",
                    a.epochs
                )));
            }
            MethodConfig::Sgld {
                prior_sig,
                bias: bias_mode(bias)?,
                ninflate: positive("ninflate", a.ninflate.unwrap_or(1e3))?,
                nd: non_negative("nd", a.nd.unwrap_or(0.1))?,
                burnin,
                thin,
            }
        }
        La => MethodConfig::La {
            prior_sig,
            bias: bias_mode(bias)?,
            ninflate: positive("ninflate", a.ninflate.unwrap_or(1e3))?,
            damping: non_negative("damping", a.damping.unwrap_or(crate::laplace::DEFAULT_DAMPING))?,
        },
    };

    let (dataset, input_dim, classes) = match a.dataset {
        DatasetKind::Mnist => {
            for (flag, given) in [
                ("blob-classes", a.blob_classes.is_some()),
                ("blob-per-class", a.blob_per_class.is_some()),
                ("blob-dim", a.blob_dim.is_some()),
                ("blob-spread", a.blob_spread.is_some()),
            ] {
                if given {
                    return Err(Error::Config(format!("--{flag} only applies to --dataset blobs")));
                }
            }
            let dir = a.data_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR));
            (DatasetConfig::Mnist { dir }, 784, 10)
        }
        DatasetKind::Blobs => {
            if a.data_dir.is_some() {
                return Err(Error::Config("--data-dir only applies to --dataset mnist".into()));
            }
            let classes = a.blob_classes.unwrap_or(5);
            let dim = a.blob_dim.unwrap_or(10);
            let per_class = a.blob_per_class.unwrap_or(200);
            if classes < 2 || dim == 0 || per_class < 4 {
                return Err(Error::Config(
                    "--blob-classes must be >= 2, --blob-dim >= 1 and --blob-per-class >= 4".into(),
                ));
            }
            let spread = positive("blob-spread", a.blob_spread.unwrap_or(1.5))?;
            (
                DatasetConfig::Blobs {
                    classes,
                    per_class,
                    dim,
                    spread,
                },
                dim,
                classes,
            )
        }
    };

    if a.hidden.contains(&0) {
        return Err(Error::Config("--hidden widths must be >= 1".into()));
    }
    if a.epochs == 0 {
        return Err(Error::Config("--epochs must be >= 1".into()));
    }
    if a.batch_size == 0 {
        return Err(Error::Config("--batch-size must be >= 1".into()));
    }
    if a.bins == 0 {
        return Err(Error::Config("--bins must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&a.momentum) {
        return Err(Error::Config(format!(
            "--momentum must lie in [0, 1), got {}",
            a.momentum
        )));
    }
    let ece_formula = EceFormula::parse(&a.ece_formula)
        .map_err(|_| Error::Config("--ece-formula must be standard or unnormalized".into()))?;

    Ok(Invocation {
        config: RunConfig {
            dataset,
            backbone: MlpSpec::new(input_dim, a.hidden, classes),
            pretrained: a.pretrained,
            seed: a.seed,
            optim: OptimConfig {
                epochs: a.epochs,
                lr: positive("lr", a.lr)?,
                momentum: a.momentum,
                batch_size: a.batch_size,
                patience: a.patience,
                tau: positive("tau", a.tau)?,
            },
            params,
            eval: EvalConfig {
                nst: a.nst.unwrap_or(0),
                bins: a.bins,
                ece_formula,
            },
            out_dir: a.out_dir,
        },
        force: a.force,
    })
}

/// Parses `argv` (including the program name). Help and version requests
/// come back as `Err(clap::Error)` with a zero exit code.
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Result<Invocation>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Args::try_parse_from(argv).map(from_args)
}

/// Seeds of the independent random components of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub sampler: u64,
}

impl RunSeeds {
    pub fn from_master(seed: u64) -> Self {
        RunSeeds {
            data: derive_seed(seed, 0),
            init: derive_seed(seed, 1),
            shuffle: derive_seed(seed, 2),
            sampler: derive_seed(seed, 3),
        }
    }
}

/// Train, validation and test sets of a run.
pub fn load_splits(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let half = |s| SplitConfig {
        train_fraction: 0.5,
        seed: s,
    };
    match cfg {
        DatasetConfig::Mnist { dir } => {
            let (full, test) = load_mnist(dir)?;
            let (train, valid) = split(&full, half(seed))?;
            Ok((train, valid, test))
        }
        DatasetConfig::Blobs {
            classes,
            per_class,
            dim,
            spread,
        } => {
            let all = synth_blobs(*classes, *per_class, *dim, *spread, seed)?;
            let (rest, test) = split(&all, half(seed))?;
            let (train, valid) = split(&rest, half(seed.wrapping_add(1)))?;
            Ok((train, valid, test))
        }
    }
}

/// One row of `results.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub nst: usize,
    pub temperature: f64,
    pub err: f64,
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
}

impl EvalRow {
    fn from_report(nst: usize, r: &CalibrationReport) -> Self {
        EvalRow {
            nst,
            temperature: r.temperature,
            err: r.err,
            ece: r.ece,
            mce: r.mce,
            nll: r.nll,
        }
    }

    pub fn final_line(&self, method: Method) -> String {
        format!(
            "FINAL method={} nst={} err={:.6} ece={:.6} mce={:.6} nll={:.6}",
            method.name(),
            self.nst,
            self.err,
            self.ece,
            self.mce,
            self.nll
        )
    }
}

pub const RESULTS_HEADER: &str = "nst,temperature,err,ece,mce,nll";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// `T = 1` and fitted-temperature rows for `nst = 0`, then for the
    /// requested `nst` when it is positive.
    pub results: Vec<EvalRow>,
}

struct Trained {
    sampler: Box<dyn PosteriorSampler>,
    checkpoint: Checkpoint,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(cfg: &RunConfig, model: &Mlp, train: &Dataset, valid: &Dataset, seeds: RunSeeds) -> Result<Trained> {
    let layout = model.layout().clone();
    let (theta0, center) = match &cfg.pretrained {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            layout.check_matches(ckpt.layout())?;
            let c = FlatParams::new(ckpt.center()?.to_vec(), layout.clone())?;
            (c.clone(), c.to_vec())
        }
        None => (model.init_params(seeds.init), vec![0.0; layout.len()]),
    };
    let prior = |sigma: f64, bias: BiasMode| PriorSpec::new(center.clone(), sigma, bias, layout.clone());
    let o = &cfg.optim;
    let sgd = |wd: f64, bias_penalty: BiasPenalty| SgdConfig {
        lr: o.lr,
        momentum: o.momentum,
        epochs: o.epochs,
        batch_size: o.batch_size,
        wd,
        wd_center: if cfg.pretrained.is_some() {
            WdCenter::PriorMean
        } else {
            WdCenter::Zero
        },
        bias_penalty,
        early_stop_patience: o.patience,
        tau: o.tau,
        seed: seeds.shuffle,
    };

    Ok(match &cfg.params {
        MethodConfig::Vanilla { wd, bias } => {
            let fit = train_vanilla(model, &theta0, Some(&center), train, valid, &sgd(*wd, *bias))?;
            let ckpt = Checkpoint::new("point", layout.clone()).with_vector("params", fit.state.to_vec());
            Trained {
                sampler: Box::new(fit.state),
                checkpoint: ckpt,
                history: fit.history,
                best_epoch: fit.best_epoch,
            }
        }
        MethodConfig::Vi {
            prior_sig,
            bias,
            kld,
            link,
            init_scale,
        } => {
            let vc = ViConfig {
                kld: *kld,
                nst: cfg.eval.nst,
                lr: o.lr,
                momentum: o.momentum,
                epochs: o.epochs,
                batch_size: o.batch_size,
                seed: seeds.shuffle,
                tau: o.tau,
                early_stop_patience: o.patience,
                link: *link,
                init_scale: Some(*init_scale),
                prior: prior(*prior_sig, *bias)?,
            };
            let fit = vi_fit(model, &theta0, train, valid, &vc)?;
            Trained {
                checkpoint: fit.state.to_checkpoint(),
                sampler: Box::new(fit.state),
                history: fit.history,
                best_epoch: fit.best_epoch,
            }
        }
        MethodConfig::McDropout {
            prior_sig,
            bias,
            kld,
            p_drop,
        } => {
            let p = prior(*prior_sig, BiasMode::Informative)?;
            let mc = McdConfig {
                dropout: Dropout::new(*p_drop, *bias)?,
                kld: *kld,
                nst: cfg.eval.nst,
                lr: o.lr,
                momentum: o.momentum,
                epochs: o.epochs,
                batch_size: o.batch_size,
                seed: seeds.shuffle,
                tau: o.tau,
                early_stop_patience: o.patience,
                prior: p.clone(),
            };
            let fit = mcd_fit(model, &theta0, train, valid, &mc)?;
            let checkpoint = fit.state.to_checkpoint(&mc.dropout, &p);
            Trained {
                sampler: Box::new(McdPosterior {
                    state: fit.state,
                    dropout: mc.dropout,
                    fallback: center.clone(),
                }),
                checkpoint,
                history: fit.history,
                best_epoch: fit.best_epoch,
            }
        }
        MethodConfig::Sgld {
            prior_sig,
            bias,
            ninflate,
            nd,
            burnin,
            thin,
        } => {
            let sc = SgldConfig {
                prior: prior(*prior_sig, *bias)?,
                step_size: SgldConfig::step_size_for_lr(o.lr, o.momentum, train.len(), *ninflate),
                n_inflate: *ninflate,
                nd: *nd,
                burnin_epochs: *burnin,
                thin: *thin,
                epochs: o.epochs,
                batch_size: o.batch_size,
                nst: cfg.eval.nst,
                seed: seeds.shuffle,
                tau: o.tau,
            };
            let fit = sgld_fit(model, &theta0, train, valid, &sc)?;
            let best_epoch = fit.history.len() - 1;
            Trained {
                checkpoint: fit.moments.to_checkpoint(),
                sampler: Box::new(fit.moments),
                history: fit.history,
                best_epoch,
            }
        }
        MethodConfig::La {
            prior_sig,
            bias,
            ninflate,
            damping,
        } => {
            let p = prior(*prior_sig, *bias)?;
            let fit = la_fit(
                model,
                &theta0,
                &p,
                train,
                valid,
                &sgd(0.0, BiasPenalty::Penalty),
                *ninflate,
                *damping,
            )?;
            Trained {
                checkpoint: fit.state.to_checkpoint(),
                sampler: Box::new(fit.state),
                history: fit.history,
                best_epoch: fit.best_epoch,
            }
        }
    })
}

fn results_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.nst, r.temperature, r.err, r.ece, r.mce, r.nll
        );
    }
    out
}

/// Runs one configuration end to end and writes its artifacts.
pub fn run(inv: &Invocation) -> Result<RunSummary> {
    let cfg = &inv.config;
    let out = &cfg.out_dir;
    prepare_out_dir(out, inv.force)?;
    let config_path = out.join("config.json");
    fs::write(&config_path, cfg.to_json()?).map_err(|e| Error::io(&config_path, e))?;

    let seeds = RunSeeds::from_master(cfg.seed);
    let (train_set, valid_set, test_set) = load_splits(&cfg.dataset, seeds.data)?;
    if train_set.dim() != cfg.backbone.input_dim || train_set.num_classes > cfg.backbone.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} inputs and {} classes; backbone expects {} and {}",
            train_set.dim(),
            train_set.num_classes,
            cfg.backbone.input_dim,
            cfg.backbone.num_classes
        )));
    }
    let model = Mlp::new(cfg.backbone.clone())?;
    log::info!(
        "{}: {} parameters, {} train / {} valid / {} test examples",
        cfg.method().name(),
        model.num_params(),
        train_set.len(),
        valid_set.len(),
        test_set.len()
    );

    let trained = train(cfg, &model, &train_set, &valid_set, seeds)?;
    write_metrics_csv(&trained.history, out.join("metrics.csv"))?;
    trained.checkpoint.write(out.join("posterior.ckpt"))?;

    let mut nsts = vec![0];
    if cfg.eval.nst > 0 {
        nsts.push(cfg.eval.nst);
    }
    let mut results = Vec::new();
    let mut last_reports = None;
    for &nst in &nsts {
        let sampler = trained.sampler.as_ref();
        let valid_pred = predict(&model, sampler, valid_set.inputs.view(), nst, seeds.sampler, false)?;
        let t_star = fit_temperature(valid_pred.log_scores.view(), &valid_set.labels)?;
        let test_pred = predict(&model, sampler, test_set.inputs.view(), nst, seeds.sampler, false)?;
        let bins = cfg.eval.bins;
        let labels = &test_set.labels;
        let at_one = calibration_report(test_pred.log_scores.view(), labels, 1.0, bins, cfg.eval.ece_formula)?;
        let at_star = calibration_report(test_pred.log_scores.view(), labels, t_star, bins, cfg.eval.ece_formula)?;
        results.push(EvalRow::from_report(nst, &at_one));
        results.push(EvalRow::from_report(nst, &at_star));
        last_reports = Some((nst, at_one, at_star));
    }
    if let Some((nst, at_one, at_star)) = last_reports {
        let title = |t: &str| format!("{} nst={nst} {t}", cfg.method().name());
        reliability_emit(
            &at_one,
            cfg.eval.bins,
            out.join("reliability_T1.csv"),
            out.join("reliability_T1.svg"),
            &title("T=1"),
        )?;
        reliability_emit(
            &at_star,
            cfg.eval.bins,
            out.join("reliability_Tstar.csv"),
            out.join("reliability_Tstar.svg"),
            &title(&format!("T={:.3}", at_star.temperature)),
        )?;
    }
    let results_path = out.join("results.csv");
    fs::write(&results_path, results_csv(&results)).map_err(|e| Error::io(&results_path, e))?;

    Ok(RunSummary {
        history: trained.history,
        best_epoch: trained.best_epoch,
        results,
    })
}

/// Parses, runs and prints the `FINAL` lines; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let inv = match parse_args(argv) {
        Ok(Ok(inv)) => inv,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&inv) {
        Ok(summary) => {
            let method = inv.config.method();
            for row in summary.results.iter().step_by(2) {
                println!("{}", row.final_line(method));
            }
            for row in summary.results.iter().skip(1).step_by(2) {
                println!(
                    "CALIBRATED method={} nst={} T={:.4} err={:.6} ece={:.6} mce={:.6} nll={:.6}",
                    method.name(),
                    row.nst,
                    row.temperature,
                    row.err,
                    row.ece,
                    row.mce,
                    row.nll
                );
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
