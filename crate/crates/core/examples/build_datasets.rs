//! Build a small generator dataset (natural crops with near and far
//! densified inputs), then verify its manifest.
//!
//! cargo run --example build_datasets [out_dir]

use std::path::{Path, PathBuf};

use foveated::datasets::{build_generator_dataset, verify_manifest, EntryKind, GeneratorDatasetConfig, Region, MANIFEST_FILE};

fn main() -> foveated::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-dataset"));
    let images = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images"));
    let cfg = GeneratorDatasetConfig {
        n_patches: 20,
        patch: 64,
        mask_pool: 2,
        seed: 4,
        ..Default::default()
    };
    let m = build_generator_dataset(images, &out, &cfg)?;
    for r in [Region::Near, Region::Far] {
        println!(
            "{}: {} densified inputs at rate {:.3}",
            r.name(),
            m.select(EntryKind::DensifiedInput, Some(r)).len(),
            cfg.rate(r)
        );
    }
    let rep = verify_manifest(&out.join(MANIFEST_FILE))?;
    println!("{} entries, verification ok: {}", rep.entries, rep.ok());
    Ok(())
}
