//! Render displacement fields as color images.
//!
//! Each offset component is clipped to ±10 voxels and mapped to a color
//! channel (red = fastest axis, green = next), with mid-gray meaning zero
//! displacement. Also writes the fixed, moving, and warped images as
//! grayscale PNGs for a visual before/after. Run with:
//!
//! ```text
//! cargo run --release --example export_field_image
//! ```

use std::path::{Path, PathBuf};

use morphflow::eval::{export_field_rgb, invert_field};
use morphflow::synth::{generate_pair, PhantomSpec};
use morphflow::volume::Volume;
use morphflow::warp::sample_linear;

/// Write one volume slice as an 8-bit grayscale PNG, mapping [0, 1] to [0, 255].
fn save_gray(v: &Volume, path: &Path) -> morphflow::Result<()> {
    let (h, w) = (v.shape[0] as u32, v.shape[1] as u32);
    let bytes: Vec<u8> = v
        .data
        .iter()
        .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w, h, bytes).expect("buffer sized to shape");
    img.save(path).map_err(|e| morphflow::Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn main() -> morphflow::Result<()> {
    let dir = PathBuf::from("example_out/export_field_image");
    std::fs::create_dir_all(&dir).expect("create output directory");

    let spec = PhantomSpec {
        shape: vec![96, 96],
        n_structures: 5,
        deform_amplitude: 6.0,
        deform_smoothness: 5.0,
        seed: 13,
    };
    let pair = generate_pair(&spec)?;

    export_field_rgb(&pair.gt_field, 0, 0, &dir.join("field.png"))?;
    save_gray(&pair.fixed, &dir.join("fixed.png"))?;
    save_gray(&pair.moving, &dir.join("moving.png"))?;

    // The stored field is the one that generated the moving image, so the
    // field that aligns moving back onto fixed is its inverse.
    let aligning = invert_field(&pair.gt_field);
    export_field_rgb(&aligning, 0, 0, &dir.join("aligning_field.png"))?;
    let realigned = sample_linear(&pair.moving, &aligning)?;
    save_gray(&realigned, &dir.join("realigned.png"))?;

    println!("wrote fixed.png, moving.png, realigned.png,");
    println!("      field.png (generator), aligning_field.png (its inverse)");
    println!("under {}", dir.display());
    Ok(())
}
