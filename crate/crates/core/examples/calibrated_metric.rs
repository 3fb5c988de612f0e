//! Calibrate the layer-weighted backbone metric on a synthetic blur ladder,
//! then predict full-image detection rates for increasingly blurred copies.
//!
//! cargo run --release --example calibrated_metric [model.json]

use std::path::{Path, PathBuf};

use foveated::calibration::synthetic::{blur_ladder_set, fit_ladder_model, BLUR_LADDER};
use foveated::calibration::{predict_full_image, LmConfig};
use foveated::datasets::plan_crops;
use foveated::features::Vgg19;
use foveated::imaging::{gaussian_blur, FieldGeometry, ImagePatch};

fn main() -> foveated::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("calvgg.json"));
    let images = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images"));
    let vgg = Vgg19::<f32>::from_env_or_surrogate(0)?;
    let (crops, srcs) = plan_crops(images, 4, 64, 1)?;
    let ex = crops
        .iter()
        .map(|c| srcs[&c.source].crop(c.offset.0, c.offset.1, 64, 64))
        .collect::<foveated::Result<Vec<_>>>()?;
    let set = blur_ladder_set(&vgg, &ex, &[8.0, 20.0], Some(60), 1)?;
    let model = fit_ladder_model(
        &set,
        &LmConfig {
            restarts: 8,
            ..Default::default()
        },
    )?;
    model.save(&out)?;
    for c in &model.calibrations {
        println!("{:>4.1}°: fit mse {:.2e}", c.eccentricity_deg, c.mse);
    }
    let reference = ImagePatch::load(&images.join("03_rocket.png"))?.crop(100, 100, 128, 128)?;
    let geom = FieldGeometry::new((128, 128), 0.598, 0.7)?;
    for s in std::iter::once(0.0).chain(BLUR_LADDER) {
        let test = if s == 0.0 { reference.clone() } else { gaussian_blur(&reference, s)? };
        let p = predict_full_image(&model, Some(&vgg), &reference, &test, geom.center(), &geom, 64)?;
        println!("σ = {s:.2}: predicted detection rate {:.4}", p.mean);
    }
    println!("model saved to {}", out.display());
    Ok(())
}
