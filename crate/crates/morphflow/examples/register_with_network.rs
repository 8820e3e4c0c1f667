//! Register a held-out pair with a freshly trained network.
//!
//! One forward pass maps (fixed, moving) to a dense displacement field; the
//! moving image and its segmentation are then resampled through that field.
//! Reports per-structure overlap before and after. Run with:
//!
//! ```text
//! cargo run --release --example register_with_network
//! ```

use std::path::PathBuf;
use std::time::Instant;

use morphflow::dataset::Dataset;
use morphflow::eval::dice;
use morphflow::net::{load_params, predict_field, ArchConfig};
use morphflow::synth::{write_dataset, PhantomSpec};
use morphflow::train::{train, TrainConfig};
use morphflow::warp::{sample_linear, sample_nearest};

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/register_with_network");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![32, 32],
        n_structures: 2,
        deform_amplitude: 3.0,
        deform_smoothness: 3.0,
        seed: 29,
    };
    let manifest = write_dataset(&spec, 13, &dir)?;
    let splits = manifest.split(&[12, 1])?;
    splits[0].save(&dir.join("manifest_train.json"))?;
    splits[1].save(&dir.join("manifest_test.json"))?;

    let cfg = TrainConfig {
        learning_rate: 5e-4,
        iterations: 500,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 0,
        dataset: dir.join("manifest_train.json"),
        validation: None,
        out_dir: dir.join("run"),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg)?;
    let params = load_params(outcome.checkpoints.last().expect("final checkpoint"))?;

    // Register the held-out pair: one forward pass, no per-pair optimization.
    let test = Dataset::open(&dir.join("manifest_test.json"))?.load_pair(0)?;
    let started = Instant::now();
    let field = predict_field(&params, &test.fixed, &test.moving)?;
    println!("forward pass took {:.1} ms", started.elapsed().as_secs_f64() * 1e3);

    let warped_img = sample_linear(&test.moving, &field)?;
    let warped_seg = sample_nearest(&test.seg_moving, &field)?;
    morphflow::volume::save_volume(&warped_img, &dir.join("warped.vol"))?;
    field.save(&dir.join("predicted.field"))?;

    for &label in &test.seg_fixed.label_set() {
        let before = dice(&test.seg_fixed, &test.seg_moving, label)?;
        let after = dice(&test.seg_fixed, &warped_seg, label)?;
        println!("structure {label}: Dice {before:.3} -> {after:.3}");
    }
    println!("field and warped volume written under {}", dir.display());
    Ok(())
}
