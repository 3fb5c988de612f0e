//! The whole pipeline on the small preset: datasets, synthesis, training,
//! reconstruction, compositing, evaluation and the plot.
//! Takes several minutes on one CPU core.
//!
//! cargo run --release --example pipeline_smoke [work_dir]

use std::path::PathBuf;

use foveated::pipeline::{run_end_to_end, PipelineConfig};

fn main() -> foveated::Result<()> {
    let work = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("foveated-smoke"));
    let mut cfg = PipelineConfig::layered(PipelineConfig::smoke(), None, &["seed=1".into()])?;
    cfg.paths.images = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/images"));
    cfg.paths.work_dir = work.clone();
    let report = run_end_to_end(&cfg)?;
    for s in &report.stages {
        println!("{:<14} {:?} ({} artifacts)", s.name, s.status, s.artifacts.len());
        for (k, v) in &s.metrics {
            println!("    {k} = {v:.5}");
        }
    }
    println!("report and outputs in {}", work.display());
    Ok(())
}
