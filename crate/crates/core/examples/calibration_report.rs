//! Calibration of a deterministic network before and after temperature
//! scaling, with reliability diagrams written as CSV and SVG.
//!
//! Usage: `calibration_report [OUT_DIR]` (default `runs/calibration`).

use bnn::calibration::{calibration_report, fit_temperature, reliability_emit, EceFormula};
use bnn::data::{split, synth_blobs, SplitConfig};
use bnn::mlp::{Mlp, MlpSpec};
use bnn::predictive::predict;
use bnn::sgd::{train_vanilla, SgdConfig};

fn main() -> bnn::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/calibration".into()));
    std::fs::create_dir_all(&out).map_err(|e| bnn::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let all = synth_blobs(6, 120, 6, 0.9, 11)?;
    let (train, test) = split(
        &all,
        SplitConfig {
            train_fraction: 0.6,
            seed: 11,
        },
    )?;
    let (train, valid) = split(
        &train,
        SplitConfig {
            train_fraction: 0.75,
            seed: 12,
        },
    )?;
    let net = Mlp::new(MlpSpec::new(6, vec![64, 64], 6))?;
    let cfg = SgdConfig {
        epochs: 200,
        batch_size: 16,
        early_stop_patience: 0,
        ..SgdConfig::default()
    };
    let fit = train_vanilla(&net, &net.init_params(2), None, &train, &valid, &cfg)?;
    let valid_scores = predict(&net, &fit.state, valid.inputs.view(), 0, 0, false)?.log_scores;
    let t_star = fit_temperature(valid_scores.view(), &valid.labels)?;
    let scores = predict(&net, &fit.state, test.inputs.view(), 0, 0, false)?.log_scores;
    for (name, t) in [("T1", 1.0), ("Tstar", t_star)] {
        let r = calibration_report(scores.view(), &test.labels, t, 15, EceFormula::Standard)?;
        println!(
            "T {t:.3}: error {:.4} ece {:.4} mce {:.4} nll {:.4}",
            r.err, r.ece, r.mce, r.nll
        );
        let title = format!("blobs T={t:.3}");
        reliability_emit(
            &r,
            15,
            out.join(format!("reliability_{name}.csv")),
            out.join(format!("reliability_{name}.svg")),
            &title,
        )?;
    }
    println!("reliability diagrams in {}", out.display());
    Ok(())
}
