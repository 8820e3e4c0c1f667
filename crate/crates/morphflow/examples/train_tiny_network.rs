//! Train a small registration network end to end on synthetic pairs.
//!
//! Builds a 2D dataset, trains the compact architecture preset for a few
//! hundred iterations, and reports how the loss and validation overlap move.
//! Takes about a minute in release mode:
//!
//! ```text
//! cargo run --release --example train_tiny_network
//! ```

use std::path::PathBuf;

use morphflow::net::ArchConfig;
use morphflow::synth::{write_dataset, PhantomSpec};
use morphflow::train::{identity_validation_dice, train, validation_dice, TrainConfig};

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/train_tiny_network");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![32, 32],
        n_structures: 2,
        deform_amplitude: 3.0,
        deform_smoothness: 3.0,
        seed: 11,
    };
    let manifest = write_dataset(&spec, 12, &dir)?;
    let splits = manifest.split(&[10, 2])?;
    splits[0].save(&dir.join("manifest_train.json"))?;
    splits[1].save(&dir.join("manifest_val.json"))?;

    let cfg = TrainConfig {
        learning_rate: 5e-4,
        iterations: 400,
        seed: 0,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 0,
        dataset: dir.join("manifest_train.json"),
        validation: Some(dir.join("manifest_val.json")),
        out_dir: dir.join("run"),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg)?;

    let first = &outcome.log[0];
    let last = outcome.log.last().expect("non-empty log");
    println!("iteration {:>4}: loss {:>10.3}", first.iter, first.loss);
    println!("iteration {:>4}: loss {:>10.3}", last.iter, last.loss);

    let id = identity_validation_dice(&dir.join("manifest_val.json"))?;
    let net = validation_dice(&outcome.params, &dir.join("manifest_val.json"))?;
    println!("validation Dice: identity {id:.3} -> network {net:.3}");
    println!("checkpoints: {:?}", outcome.checkpoints);
    Ok(())
}
