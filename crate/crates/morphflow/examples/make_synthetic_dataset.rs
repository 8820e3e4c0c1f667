//! Generate a small synthetic registration dataset and inspect it.
//!
//! Each pair shares one atlas image as the fixed volume; the moving volume is
//! the atlas resampled through a random smooth displacement field, so every
//! pair comes with dense ground truth. Run with:
//!
//! ```text
//! cargo run --release --example make_synthetic_dataset
//! ```

use std::path::PathBuf;

use morphflow::dataset::Dataset;
use morphflow::synth::{write_dataset, PhantomSpec};

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/make_synthetic_dataset");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![64, 64],
        n_structures: 4,
        deform_amplitude: 5.0,
        deform_smoothness: 4.0,
        seed: 7,
    };
    let manifest = write_dataset(&spec, 6, &dir)?;
    println!("wrote {} pairs under {}", manifest.entries.len(), dir.display());

    // Split into train/val/test the same way the command-line tool does.
    let splits = manifest.split(&[4, 1, 1])?;
    for (name, part) in ["train", "val", "test"].iter().zip(&splits) {
        part.save(&dir.join(format!("manifest_{name}.json")))?;
        println!("  manifest_{name}.json: {} pairs", part.entries.len());
    }

    // Load one pair back and summarize it.
    let ds = Dataset::open(&dir.join("manifest.json"))?;
    let pair = ds.load_pair(0)?;
    println!(
        "pair 0: shape {:?}, labels {:?}, peak displacement {:.2} voxels",
        pair.fixed.shape,
        pair.seg_fixed.label_set(),
        pair.gt_field.max_abs_offset(),
    );
    for &label in &pair.seg_fixed.label_set() {
        println!(
            "  structure {label}: {} voxels (fixed), {} voxels (moving)",
            pair.seg_fixed.label_volume(label),
            pair.seg_moving.label_volume(label),
        );
    }
    Ok(())
}
