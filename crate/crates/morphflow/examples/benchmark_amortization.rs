//! Measure the speed advantage of learned registration.
//!
//! A trained network aligns a pair in one forward pass; per-pair energy
//! minimization must iterate. This benchmark times both on the same pairs,
//! with the optimizer required to reach within 5% of the energy the network
//! achieves, and prints the median wall times. Run with:
//!
//! ```text
//! cargo run --release --example benchmark_amortization
//! ```

use std::path::PathBuf;

use morphflow::eval::benchmark_runtime;
use morphflow::net::{load_params, ArchConfig};
use morphflow::synth::{write_dataset, PhantomSpec};
use morphflow::train::{train, TrainConfig};
use morphflow::varopt::VarOptConfig;

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/benchmark_amortization");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![32, 32],
        n_structures: 2,
        deform_amplitude: 3.0,
        deform_smoothness: 3.0,
        seed: 31,
    };
    let manifest = write_dataset(&spec, 8, &dir)?;
    let splits = manifest.split(&[6, 2])?;
    splits[0].save(&dir.join("manifest_train.json"))?;
    splits[1].save(&dir.join("manifest_bench.json"))?;

    let cfg = TrainConfig {
        learning_rate: 5e-4,
        iterations: 400,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 0,
        dataset: dir.join("manifest_train.json"),
        validation: None,
        out_dir: dir.join("run"),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg)?;
    let params = load_params(outcome.checkpoints.last().expect("final checkpoint"))?;

    let rows = benchmark_runtime(
        &params,
        &dir.join("manifest_bench.json"),
        5,
        &VarOptConfig::default(),
    )?;
    for row in &rows {
        println!(
            "{:<8} median {:>9.2} ms (sd {:>8.2})",
            row.method, row.median_ms, row.sd_ms
        );
    }
    let net = rows.iter().find(|r| r.method == "network").expect("network row");
    let base = rows.iter().find(|r| r.method == "baseline").expect("baseline row");
    println!("speedup: {:.1}x", base.median_ms / net.median_ms);
    Ok(())
}
