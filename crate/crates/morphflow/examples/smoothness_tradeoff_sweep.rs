//! Sweep the smoothness weight λ and watch the accuracy/regularity trade.
//!
//! Trains one small network per λ on the same data and reports validation
//! overlap together with the mean roughness (diffusion energy) of the fields
//! each network predicts. Larger λ should buy smoother fields. Takes a few
//! minutes in release mode:
//!
//! ```text
//! cargo run --release --example smoothness_tradeoff_sweep
//! ```

use std::path::PathBuf;

use morphflow::net::ArchConfig;
use morphflow::synth::{write_dataset, PhantomSpec};
use morphflow::train::{sweep_lambda, write_sweep_csv, TrainConfig};

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/smoothness_tradeoff_sweep");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![32, 32],
        n_structures: 2,
        deform_amplitude: 3.0,
        deform_smoothness: 3.0,
        seed: 23,
    };
    let manifest = write_dataset(&spec, 10, &dir)?;
    let splits = manifest.split(&[8, 2])?;
    splits[0].save(&dir.join("manifest_train.json"))?;
    splits[1].save(&dir.join("manifest_val.json"))?;

    let base = TrainConfig {
        learning_rate: 5e-4,
        iterations: 300,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 0,
        dataset: dir.join("manifest_train.json"),
        validation: Some(dir.join("manifest_val.json")),
        out_dir: dir.join("sweep"),
        ..TrainConfig::default()
    };
    let rows = sweep_lambda(&base, &[0.0, 1.0, 4.0])?;
    write_sweep_csv(&rows, &dir.join("sweep.csv"))?;

    println!("{:>6} {:>10} {:>14}", "lambda", "mean Dice", "mean roughness");
    for row in &rows {
        println!(
            "{:>6} {:>10.4} {:>14.2}",
            row.lambda, row.mean_dice, row.mean_smooth_energy
        );
    }
    println!("full table written to {}", dir.join("sweep.csv").display());
    Ok(())
}
