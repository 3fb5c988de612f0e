//! Decompose a photograph into a Laplacian pyramid, report per-band energy,
//! and check that collapsing it gives the image back.
//!
//! cargo run --example laplacian_pyramid [image.png]

use std::path::PathBuf;

use foveated::imaging::{build_laplacian_pyramid, collapse_pyramid, ImagePatch};

fn main() -> foveated::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images/08_camera.png")));
    let img = ImagePatch::load(&path)?;
    let pyr = build_laplacian_pyramid(&img, 5)?;
    for l in 0..pyr.n_levels() {
        let b = pyr.level(l);
        let energy = b.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / b.data().len() as f64;
        let kind = if l + 1 == pyr.n_levels() { "residual" } else { "band" };
        println!("level {l} ({kind}) {}×{}: mean square {energy:.5}", b.height(), b.width());
    }
    let back = collapse_pyramid(&pyr)?;
    println!("round-trip max error {:.2e}", back.buf().max_abs_diff(img.buf()));
    Ok(())
}
