//! Split the visual field into fovea, near and far periphery for a gaze
//! point and blend three renditions of an image accordingly.
//!
//! cargo run --example foveated_composite [out.png]

use std::path::PathBuf;

use foveated::imaging::{composite_foveated, gaussian_blur, partition_weights, FieldGeometry, ImagePatch, RegionPartition};

fn main() -> foveated::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-composite.png"));
    let full = ImagePatch::load(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images/00_astronaut.png").as_ref())?;
    // Shown 30 cm wide at 60 cm, so the image spans about ±14°.
    let geom = FieldGeometry::new((full.width(), full.height()), 0.3, 0.6)?;
    let part = RegionPartition {
        gaze_px: (full.width() as f64 * 0.4, full.height() as f64 * 0.35),
        ..RegionPartition::centered(&geom)
    };
    let w = partition_weights(&geom, &part)?;
    let near = gaussian_blur(&full, 1.5)?;
    let far = gaussian_blur(&full, 4.0)?;
    composite_foveated(&full, &near, &far, &w)?.save_png(&out)?;
    println!(
        "{:.4}°/px, near boundary at {:.0} px, far boundary at {:.0} px from gaze; wrote {}",
        geom.degrees_per_pixel(),
        geom.degrees_to_pixels(part.near_boundary_deg),
        geom.degrees_to_pixels(part.far_boundary_deg),
        out.display()
    );
    Ok(())
}
