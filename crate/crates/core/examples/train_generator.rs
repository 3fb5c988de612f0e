//! Train a small reconstruction generator on densified crops for a few
//! hundred steps and save a checkpoint plus one reconstruction.
//!
//! cargo run --release --example train_generator [out_dir] [steps]

use std::path::{Path, PathBuf};

use foveated::datasets::{build_generator_dataset, load_train_data, GeneratorDatasetConfig, Region};
use foveated::gan::{reconstruct, Adversary, LossVariant, ReconLoss, TrainConfig, Trainer};

fn main() -> foveated::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-train"));
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let images = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images"));
    let gen = build_generator_dataset(
        images,
        &out.join("dataset"),
        &GeneratorDatasetConfig {
            n_patches: 16,
            patch: 64,
            mask_pool: 2,
            ..Default::default()
        },
    )?;
    // The standard critic needs no distorted set.
    let variant = LossVariant {
        recon: ReconLoss::L2,
        adversary: Adversary::Standard,
    };
    let data = load_train_data(&gen, None, Region::Near, variant.adversary)?;
    let mut cfg = TrainConfig {
        variant,
        batch_size: 2,
        n_critic: 1,
        chunk: 2,
        max_steps: Some(steps),
        ..Default::default()
    };
    cfg.critic.patch_size = 64;
    let mut t = Trainer::new(cfg, &data)?;
    let before = t.training_mse()?;
    let summary = t.run(Some(&out.join("checkpoint")))?;
    println!(
        "{} steps ({:?}): training mse {before:.5} -> {:.5}",
        summary.steps,
        summary.stop,
        t.training_mse()?
    );
    reconstruct(&t.generator, &data.inputs[0])?.save_png(&out.join("reconstruction.png"))?;
    data.inputs[0].save_png(&out.join("input.png"))?;
    data.targets[0].save_png(&out.join("target.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
