//! Pipeline plumbing shared by the command-line front end: layered
//! configuration, the end-to-end run, and curve plots.

pub mod config;
pub mod plot;
pub mod run;

pub use config::{EvalConfig, Paths, PipelineConfig, RegionConfig};
pub use plot::{plot_curves, PlotSummary};
pub use run::{run_end_to_end, RunReport, StageRecord, StageStatus, REPORT_FILE, STAGES};
