//! Gram-matrix texture statistics: how far apart two textures are, and how
//! a blurred copy compares.
//!
//! Uses real backbone weights when the weight directory variable points at
//! them, otherwise a seeded surrogate network.
//!
//! cargo run --example gram_statistics

use foveated::features::{extract_features, gram_loss, gram_matrices, style_layers, Vgg19};
use foveated::imaging::{gaussian_blur, ImagePatch};

fn main() -> foveated::Result<()> {
    let vgg = Vgg19::<f32>::from_env_or_surrogate(0)?;
    println!("backbone: {:?}", vgg.source());
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images");
    let load = |n: &str| -> foveated::Result<ImagePatch> {
        ImagePatch::load(format!("{dir}/{n}.png").as_ref())?.crop(32, 32, 64, 64)
    };
    let layers = style_layers();
    let w = vec![1.0; layers.len()];
    let brick = load("05_brick")?;
    let grams = |img: &ImagePatch| -> foveated::Result<_> { Ok(gram_matrices(&extract_features(&vgg, img, &layers)?)) };
    let reference = grams(&brick)?;
    for (name, other) in [
        ("brick (self)", brick.clone()),
        ("brick, blurred σ=2", gaussian_blur(&brick, 2.0)?),
        ("grass", load("06_grass")?),
        ("gravel", load("07_gravel")?),
    ] {
        println!("{name:>20}: Gram loss {:.4e}", gram_loss(&reference, &grams(&other)?, &w)?);
    }
    Ok(())
}
