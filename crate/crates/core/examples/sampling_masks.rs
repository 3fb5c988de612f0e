//! Blue-noise versus white-noise sampling: spectra, spacing, and the
//! densified image each mask produces.
//!
//! cargo run --example sampling_masks [out_dir]

use std::path::PathBuf;

use foveated::imaging::ImagePatch;
use foveated::sampling::{
    densify, low_frequency_energy, min_sample_distance, subsample, uniform_random_mask, void_and_cluster_mask,
};

fn main() -> foveated::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-masks"));
    std::fs::create_dir_all(&out).map_err(|e| foveated::Error::io(&out, e))?;
    let img = ImagePatch::load(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images/02_chelsea.png").as_ref())?
        .crop(0, 0, 128, 128)?;
    for (name, mask) in [
        ("void_and_cluster", void_and_cluster_mask(128, 128, 0.12, 1)?),
        ("uniform", uniform_random_mask(128, 128, 0.12, 1)?),
    ] {
        let dense = densify(&subsample(&img, &mask)?)?;
        let mse = dense.data().iter().zip(img.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
            / img.data().len() as f64;
        println!(
            "{name:>16}: {} samples, min spacing {:.2} px, low-frequency energy {:.3e}, densified mse {mse:.5}",
            mask.count(),
            min_sample_distance(&mask),
            low_frequency_energy(&mask)
        );
        mask.save_png(&out.join(format!("{name}_mask.png")))?;
        dense.save_png(&out.join(format!("{name}_densified.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
