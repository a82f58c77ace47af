use std::path::{Path, PathBuf};
use std::process::Command;

use bnn::cli::{main_with_args, parse_args, run, RunConfig, RESULTS_HEADER};

fn blob_args(method: &str, out: &Path) -> Vec<String> {
    let mut v: Vec<String> = [
        "bnn",
        "--method",
        method,
        "--dataset",
        "blobs",
        "--hidden",
        "16",
        "--epochs",
        "4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.push("--out-dir".into());
    v.push(out.display().to_string());
    v
}

fn with(mut args: Vec<String>, extra: &[&str]) -> Vec<String> {
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn existing_output_directory_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(main_with_args(blob_args("vanilla", &out)), 0);
    let before = std::fs::read(out.join("results.csv")).unwrap();
    assert_eq!(main_with_args(blob_args("vanilla", &out)), 1);
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), before);
    assert_eq!(main_with_args(with(blob_args("vanilla", &out), &["--force"])), 0);
}

#[test]
fn laplace_with_samples_reports_both_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("la");
    let inv = parse_args(with(blob_args("la", &out), &["--nst", "5"]))
        .unwrap()
        .unwrap();
    let summary = run(&inv).unwrap();
    let nsts: Vec<usize> = summary.results.iter().map(|r| r.nst).collect();
    assert_eq!(nsts, vec![0, 0, 5, 5]);
    assert!(summary.results.iter().all(|r| r.err.is_finite() && r.nll.is_finite()));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(RESULTS_HEADER));
    assert_eq!(lines.count(), 4);
}

#[test]
fn every_method_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["vanilla", "vi", "mc_dropout", "sgld", "la"] {
        let out = dir.path().join(method);
        let mut args = blob_args(method, &out);
        if method == "sgld" {
            args = with(args, &["--burnin", "1", "--thin", "2"]);
        }
        assert_eq!(main_with_args(args), 0, "{method}");
        for file in [
            "config.json",
            "metrics.csv",
            "posterior.ckpt",
            "results.csv",
            "reliability_T1.csv",
            "reliability_T1.svg",
            "reliability_Tstar.csv",
            "reliability_Tstar.svg",
        ] {
            assert!(out.join(file).is_file(), "{method}: missing {file}");
        }
    }
}

#[test]
fn saved_config_reproduces_the_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mcd");
    let args = with(
        blob_args("mc_dropout", &out),
        &["--p-drop", "0.2", "--bias", "gaussian", "--nst", "3"],
    );
    let inv = parse_args(args).unwrap().unwrap();
    run(&inv).unwrap();
    let json = std::fs::read_to_string(out.join("config.json")).unwrap();
    assert_eq!(RunConfig::from_json(&json).unwrap(), inv.config);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ok = main_with_args(blob_args("vanilla", &dir.path().join("ok")));
    assert_eq!(ok, 0);
    // flag that does not belong to the method
    let misused = main_with_args(with(blob_args("vanilla", &dir.path().join("a")), &["--kld", "1"]));
    assert_eq!(misused, 1);
    let unknown = main_with_args(with(blob_args("vanilla", &dir.path().join("b")), &["--bogus"]));
    assert_eq!(unknown, 1);
    let missing_data = main_with_args([
        "bnn",
        "--method",
        "vanilla",
        "--data-dir",
        &dir.path().join("nowhere").display().to_string(),
        "--out-dir",
        &dir.path().join("c").display().to_string(),
    ]);
    assert_eq!(missing_data, 1);
    let diverged = main_with_args(with(blob_args("vanilla", &dir.path().join("d")), &["--lr", "1e30"]));
    assert_eq!(diverged, 2);
}

#[test]
fn binary_prints_final_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("vi");
    let args = with(blob_args("vi", &out), &["--nst", "2"]);
    let output = Command::new(env!("CARGO_BIN_EXE_bnn"))
        .args(&args[1..])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    let finals: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FINAL method=vi ")).collect();
    assert_eq!(finals.len(), 2);
    assert!(finals[0].contains(" nst=0 ") && finals[1].contains(" nst=2 "));
}

fn scripts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts")
}

#[test]
fn experiment_scripts_parse() {
    let mut count = 0;
    for table in ["table1.sh", "table2.sh", "table3.sh"] {
        let text = std::fs::read_to_string(scripts_dir().join(table)).unwrap();
        for line in text.lines().filter(|l| l.starts_with("run ")) {
            let mut words = line.split_whitespace().skip(1);
            let name = words.next().unwrap();
            let mut args = vec!["bnn".to_string(), "--out-dir".into(), format!("runs/{name}")];
            args.extend(words.map(String::from));
            match parse_args(&args) {
                Ok(Ok(_)) => count += 1,
                Ok(Err(e)) => panic!("{table}: `{line}`: {e}"),
                Err(e) => panic!("{table}: `{line}`: {e}"),
            }
        }
    }
    assert_eq!(count, 12 + 6 + 3);
}
