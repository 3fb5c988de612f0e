//! Constrained texture synthesis with each artifact strategy, reporting the
//! loss, the checkerboard energy and how well the guiding pixels are kept.
//!
//! cargo run --release --example constrained_synthesis [out_dir]

use std::path::PathBuf;

use foveated::features::Vgg19;
use foveated::imaging::ImagePatch;
use foveated::synthesis::{checkerboard_energy, synthesize, Strategy, SynthesisConfig};

fn main() -> foveated::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-synthesis"));
    std::fs::create_dir_all(&out).map_err(|e| foveated::Error::io(&out, e))?;
    let vgg = Vgg19::<f32>::from_env_or_surrogate(0)?;
    let ex = ImagePatch::load(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images/07_gravel.png").as_ref())?
        .crop(40, 40, 48, 48)?;
    println!("exemplar checkerboard energy {:.3e}", checkerboard_energy(&ex));
    for strategy in [Strategy::Unmitigated, Strategy::BlurInit, Strategy::TwoStage] {
        let cfg = SynthesisConfig {
            strategy,
            guiding_percent: 9.09,
            max_iters: 150,
            stage2_iters: 80,
            seed: 3,
            ..Default::default()
        };
        let r = synthesize(&vgg, &ex, &cfg)?;
        let q = r.image.quantized()?;
        let drift = r
            .mask
            .positions()
            .iter()
            .flat_map(|&(y, x)| (0..3).map(move |c| (c, y, x)))
            .map(|(c, y, x)| (q.get(c, y, x) - ex.get(c, y, x)).abs())
            .fold(0.0f32, f32::max);
        println!(
            "strategy {strategy}: loss {:.3e} -> {:.3e}, checkerboard {:.3e}, guiding drift {:.1}/255",
            r.initial_loss(),
            r.final_loss(),
            checkerboard_energy(&r.image),
            drift * 255.0
        );
        r.image.save_png(&out.join(format!("strategy_{strategy}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
