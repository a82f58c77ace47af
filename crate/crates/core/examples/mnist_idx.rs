//! Reads MNIST from IDX files and prints split sizes and class counts.
//!
//! Usage: `mnist_idx [DIR]` (default `data/mnist`). Without the files, a tiny
//! synthetic IDX pair is written to a temporary directory and read back.

use bnn::data::{load_idx, load_mnist, split, synth_blobs, write_idx, Dataset, SplitConfig};

fn class_counts(ds: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; ds.num_classes];
    for &y in &ds.labels {
        counts[y] += 1;
    }
    counts
}

fn main() -> bnn::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into());
    match load_mnist(&dir) {
        Ok((train, test)) => {
            let (fit, valid) = split(
                &train,
                SplitConfig {
                    train_fraction: 0.5,
                    seed: 0,
                },
            )?;
            println!(
                "{} train / {} valid / {} test, {} inputs",
                fit.len(),
                valid.len(),
                test.len(),
                train.dim()
            );
            println!("train class counts {:?}", class_counts(&train));
        }
        Err(e) => {
            println!("no MNIST in {dir} ({e}); round-tripping a synthetic IDX pair");
            let raw = synth_blobs(3, 4, 6, 0.1, 0)?;
            let ds = Dataset::new(
                raw.inputs.mapv(|x| 1.0 / (1.0 + (-x).exp())),
                raw.labels.clone(),
                raw.num_classes,
            )?;
            let tmp = std::env::temp_dir();
            let (img, lab) = (
                tmp.join("bnn-demo-images-idx3-ubyte"),
                tmp.join("bnn-demo-labels-idx1-ubyte"),
            );
            write_idx(&ds, 2, 3, &img, &lab)?;
            let back = load_idx(&img, &lab)?;
            let worst = back
                .inputs
                .iter()
                .zip(&ds.inputs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!(
                "{} images, labels equal: {}, max quantization error {worst:.4}",
                back.len(),
                back.labels == ds.labels
            );
        }
    }
    Ok(())
}
