//! End-to-end run: datasets, training, reconstruction, compositing,
//! evaluation and plots, with a machine-readable report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::plot::plot_curves;
use crate::calibration::calvgg::{sweep_far_boundary, write_sweep_csv, MethodOutputs, SweepScene};
use crate::calibration::synthetic::{blur_ladder_set, fit_ladder_model};
use crate::datasets::{
    build_critic_dataset, build_generator_dataset, list_images, load_train_data, plan_crops, DatasetManifest, Region,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::features::{Vgg19, WeightSource};
use crate::gan::train::region_checkpoint;
use crate::gan::{load_generator, reconstruct, Adversary, LossVariant, TrainConfig, Trainer};
use crate::imaging::{composite_foveated, partition_weights, ImagePatch, RegionPartition};
use crate::sampling::{densify, subsample, void_and_cluster_mask};
use crate::util::{stream_seed, write_atomic};

pub const REPORT_FILE: &str = "report.json";
const LOCK_FILE: &str = ".lock";

/// Stage names in execution order.
pub const STAGES: [&str; 7] = ["build-dataset", "synthesize", "train", "reconstruct", "composite", "evaluate", "plot"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
    /// Paths relative to the work directory.
    pub artifacts: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub backbone: WeightSource,
    pub stages: Vec<StageRecord>,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Exclusive ownership of a work directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(work_dir: &Path) -> Result<Self> {
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        let path = work_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                work_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// File-system friendly method name (`l2+adv*` → `l2_adv_star`).
pub fn slug(name: &str) -> String {
    name.replace('+', "_").replace('*', "_star")
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    work: PathBuf,
    vgg: Vgg19<f32>,
    /// `(name, reference crop)` per test image.
    tests: Vec<(String, ImagePatch)>,
    /// Per method: per image `(near, far)` reconstructions.
    recon: BTreeMap<String, Vec<(ImagePatch, ImagePatch)>>,
}

impl Ctx<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.work).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn gen_dir(&self) -> PathBuf {
        self.work.join("datasets/generator")
    }

    fn critic_dir(&self) -> PathBuf {
        self.work.join("datasets/critic")
    }

    fn checkpoint_root(&self, v: &LossVariant) -> PathBuf {
        self.work.join("checkpoints").join(slug(&v.name()))
    }
}

type StageOut = (Vec<String>, BTreeMap<String, f64>);

fn stage_build(c: &mut Ctx) -> Result<StageOut> {
    let images = list_images(&c.cfg.paths.images)?;
    if images.is_empty() {
        return Err(Error::invalid(format!("no images in {}", c.cfg.paths.images.display())));
    }
    let gcfg = crate::datasets::GeneratorDatasetConfig {
        seed: stream_seed(c.cfg.seed, &[30]),
        ..c.cfg.generator_dataset.clone()
    };
    let m = build_generator_dataset(&c.cfg.paths.images, &c.gen_dir(), &gcfg)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("entries".into(), m.entries.len() as f64);
    Ok((vec![c.rel(&c.gen_dir().join(MANIFEST_FILE))], metrics))
}

fn stage_synthesize(c: &mut Ctx) -> Result<StageOut> {
    let mut metrics = BTreeMap::new();
    if !needs_distorted(c.cfg) {
        metrics.insert("skipped".into(), 1.0);
        return Ok((Vec::new(), metrics));
    }
    let ccfg = crate::datasets::CriticDatasetConfig {
        seed: stream_seed(c.cfg.seed, &[31]),
        ..c.cfg.critic_dataset.clone()
    };
    let m = build_critic_dataset(&c.vgg, &c.cfg.paths.images, &c.critic_dir(), &c.cfg.thresholds(), &ccfg)?;
    metrics.insert("entries".into(), m.entries.len() as f64);
    for r in Region::ALL {
        metrics.insert(format!("{}/guiding_percent", r.name()), c.cfg.thresholds().percent_for(r)?);
    }
    Ok((vec![c.rel(&c.critic_dir().join(MANIFEST_FILE))], metrics))
}

fn stage_train(c: &mut Ctx) -> Result<StageOut> {
    let gen = DatasetManifest::load(&c.gen_dir().join(MANIFEST_FILE))?;
    let critic_path = c.critic_dir().join(MANIFEST_FILE);
    let critic = if critic_path.exists() {
        Some(DatasetManifest::load(&critic_path)?)
    } else {
        None
    };
    let mut artifacts = Vec::new();
    let mut metrics = BTreeMap::new();
    for v in &c.cfg.variants {
        for (ri, r) in Region::ALL.into_iter().enumerate() {
            let data = load_train_data(&gen, critic.as_ref(), r, v.adversary)?;
            let dir = region_checkpoint(&c.checkpoint_root(v), r.name());
            let tcfg = TrainConfig {
                variant: *v,
                seed: stream_seed(c.cfg.seed, &[32, ri as u64]),
                ..c.cfg.train.clone()
            };
            let mut trainer = if dir.join(crate::gan::train::STATE_FILE).exists() {
                info!("resuming {} {} from {}", v.name(), r.name(), dir.display());
                Trainer::resume(&dir, &data)?
            } else {
                Trainer::new(tcfg, &data)?
            };
            let summary = trainer.run(Some(&dir))?;
            let key = format!("{}/{}", v.name(), r.name());
            metrics.insert(format!("{key}/steps"), summary.steps as f64);
            metrics.insert(format!("{key}/training_mse"), trainer.training_mse()?);
            if let Some(row) = summary.final_row {
                metrics.insert(format!("{key}/gp_norm"), row.gp_norm);
                metrics.insert(format!("{key}/recon_term"), row.recon_term);
            }
            artifacts.push(c.rel(&dir));
        }
    }
    Ok((artifacts, metrics))
}

fn center_crop(img: &ImagePatch, size: usize) -> Result<ImagePatch> {
    let (h, w) = (img.height(), img.width());
    if h < size || w < size {
        return Err(Error::invalid(format!("test image {h}×{w} is smaller than {size}")));
    }
    img.crop((h - size) / 2, (w - size) / 2, size, size)
}

fn stage_reconstruct(c: &mut Ctx) -> Result<StageOut> {
    let e = &c.cfg.evaluation;
    let images = list_images(&c.cfg.paths.images)?;
    let out = c.work.join("reconstructions");
    let mut artifacts = Vec::new();
    let mut metrics = BTreeMap::new();
    c.tests.clear();
    c.recon.clear();
    let mut interp = Vec::new();
    for (i, path) in images.iter().take(e.n_images).enumerate() {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let reference = center_crop(&ImagePatch::load(path)?, e.image_size)?;
        let ref_path = out.join("reference").join(format!("{name}.png"));
        reference.save_png(&ref_path)?;
        artifacts.push(c.rel(&ref_path));
        let mut dense = Vec::new();
        for (ri, r) in Region::ALL.into_iter().enumerate() {
            let rate = c.cfg.generator_dataset.rate(r);
            let mask = void_and_cluster_mask(e.image_size, e.image_size, rate, stream_seed(c.cfg.seed, &[33, i as u64, ri as u64]))?;
            let d = densify(&subsample(&reference, &mask)?)?;
            let p = out.join("densified").join(r.name()).join(format!("{name}.png"));
            d.save_png(&p)?;
            dense.push(d);
        }
        interp.push((dense[0].clone(), dense[1].clone()));
        for v in &c.cfg.variants {
            let mut pair = Vec::new();
            for (ri, r) in Region::ALL.into_iter().enumerate() {
                let g = load_generator(&region_checkpoint(&c.checkpoint_root(v), r.name()))?;
                let rec = reconstruct(&g, &dense[ri])?;
                let p = out.join(slug(&v.name())).join(r.name()).join(format!("{name}.png"));
                rec.save_png(&p)?;
                artifacts.push(c.rel(&p));
                let mse = crate::calibration::metrics::mse(&reference, &rec)?;
                *metrics.entry(format!("{}/{}/mse", v.name(), r.name())).or_insert(0.0) += mse / e.n_images.min(images.len()) as f64;
                pair.push(rec);
            }
            let far = pair.pop().expect("two regions");
            let near = pair.pop().expect("two regions");
            c.recon.entry(v.name()).or_default().push((near, far));
        }
        c.tests.push((name, reference));
    }
    if c.tests.is_empty() {
        return Err(Error::invalid("no test images"));
    }
    c.recon.insert("interpolation".into(), interp);
    Ok((artifacts, metrics))
}

fn stage_composite(c: &mut Ctx) -> Result<StageOut> {
    let geom = c.cfg.evaluation.geometry()?;
    let r = &c.cfg.regions;
    let part = RegionPartition {
        gaze_px: geom.center(),
        near_boundary_deg: r.near_boundary_deg,
        far_boundary_deg: r.far_boundary_deg,
        blend_band_deg: r.blend_band_deg,
    };
    let weights = partition_weights(&geom, &part)?;
    let mut artifacts = Vec::new();
    let mut metrics = BTreeMap::new();
    for (method, outs) in &c.recon {
        let mut total = 0.0;
        for ((name, reference), (near, far)) in c.tests.iter().zip(outs) {
            let comp = composite_foveated(reference, near, far, &weights)?;
            total += crate::calibration::metrics::mse(reference, &comp)?;
            let p = c.work.join("composites").join(slug(method)).join(format!("{name}.png"));
            comp.save_png(&p)?;
            artifacts.push(c.rel(&p));
        }
        metrics.insert(format!("{method}/mse"), total / c.tests.len() as f64);
    }
    Ok((artifacts, metrics))
}

fn stage_evaluate(c: &mut Ctx) -> Result<StageOut> {
    let e = &c.cfg.evaluation;
    let (crops, images) = plan_crops(&c.cfg.paths.images, e.calibration_exemplars, e.calibration_patch, stream_seed(c.cfg.seed, &[34]))?;
    let exemplars: Vec<ImagePatch> = crops
        .iter()
        .map(|cr| images[&cr.source].crop(cr.offset.0, cr.offset.1, e.calibration_patch, e.calibration_patch))
        .collect::<Result<_>>()?;
    let set = blur_ladder_set(&c.vgg, &exemplars, &e.calibration_eccentricities, None, stream_seed(c.cfg.seed, &[35]))?;
    let lm = crate::calibration::LmConfig {
        seed: stream_seed(c.cfg.seed, &[36]),
        ..e.lm
    };
    let model = fit_ladder_model(&set, &lm)?;
    let model_path = c.work.join("calibration/calvgg.json");
    model.save(&model_path)?;
    let geom = e.geometry()?;
    let scenes: Vec<SweepScene> = c
        .tests
        .iter()
        .map(|(name, reference)| SweepScene {
            name: name.clone(),
            reference: reference.clone(),
            gaze_px: geom.center(),
            geom,
        })
        .collect();
    let methods: Vec<MethodOutputs> = c
        .recon
        .iter()
        .map(|(m, outs)| MethodOutputs {
            method: m.clone(),
            near: outs.iter().map(|o| Some(o.0.clone())).collect(),
            far: outs.iter().map(|o| Some(o.1.clone())).collect(),
        })
        .collect();
    let rep = sweep_far_boundary(
        &model,
        Some(&c.vgg),
        &scenes,
        &methods,
        &e.boundaries,
        c.cfg.regions.near_boundary_deg,
        c.cfg.regions.blend_band_deg,
        e.patch,
    )?;
    let csv = c.work.join("evaluation/sweep.csv");
    write_sweep_csv(&csv, &rep.rows)?;
    let mut metrics = BTreeMap::new();
    for (i, cal) in model.calibrations.iter().enumerate() {
        metrics.insert(format!("calibration/{i}/mse"), cal.mse);
    }
    for m in &methods {
        let rows: Vec<f64> = rep.rows.iter().filter(|r| r.method == m.method).map(|r| r.detection_rate).collect();
        if !rows.is_empty() {
            metrics.insert(format!("{}/mean_detection_rate", m.method), rows.iter().sum::<f64>() / rows.len() as f64);
        }
    }
    metrics.insert("missing".into(), rep.missing.len() as f64);
    Ok((vec![c.rel(&model_path), c.rel(&csv)], metrics))
}

fn stage_plot(c: &mut Ctx) -> Result<StageOut> {
    let png = c.work.join("evaluation/sweep.png");
    let s = plot_curves(&c.work.join("evaluation/sweep.csv"), &png)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("series".into(), s.series.len() as f64);
    Ok((vec![c.rel(&png)], metrics))
}

fn save_report(work: &Path, report: &RunReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::format("report", e.to_string()))?;
    write_atomic(&work.join(REPORT_FILE), &json)
}

/// Execute every stage in order. The report is written after each stage; a
/// failing stage stops the run, is marked failed in the report, and its
/// error is returned tagged with the stage name. Completed artifacts stay on
/// disk, and a rerun resumes datasets and training where they stopped.
pub fn run_end_to_end(cfg: &PipelineConfig) -> Result<RunReport> {
    let work = cfg.paths.work_dir.clone();
    let _lock = RunLock::acquire(&work)?;
    let mut report = RunReport {
        seed: cfg.seed,
        backbone: WeightSource::Surrogate { seed: cfg.seed },
        stages: STAGES
            .iter()
            .map(|s| StageRecord {
                name: s.to_string(),
                status: StageStatus::Pending,
                error: None,
                artifacts: Vec::new(),
                metrics: BTreeMap::new(),
            })
            .collect(),
    };
    let fail = |report: &mut RunReport, i: usize, e: Error| -> Error {
        report.stages[i].status = StageStatus::Failed;
        report.stages[i].error = Some(e.to_string());
        let _ = save_report(&work, report);
        e.in_stage(STAGES[i])
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(&mut report, 0, e));
    }
    if !cfg.paths.images.is_dir() {
        let e = Error::invalid(format!("image directory {} does not exist", cfg.paths.images.display()));
        return Err(fail(&mut report, 0, e));
    }
    let vgg = match Vgg19::from_env_or_surrogate(stream_seed(cfg.seed, &[37])) {
        Ok(v) => v,
        Err(e) => return Err(fail(&mut report, 0, e)),
    };
    report.backbone = vgg.source().clone();
    let mut ctx = Ctx {
        cfg,
        work: work.clone(),
        vgg,
        tests: Vec::new(),
        recon: BTreeMap::new(),
    };
    let stages: [fn(&mut Ctx) -> Result<StageOut>; 7] = [
        stage_build,
        stage_synthesize,
        stage_train,
        stage_reconstruct,
        stage_composite,
        stage_evaluate,
        stage_plot,
    ];
    for (i, f) in stages.iter().enumerate() {
        info!("stage {}", STAGES[i]);
        let t0 = std::time::Instant::now();
        match f(&mut ctx) {
            Ok((artifacts, metrics)) => {
                let s = &mut report.stages[i];
                s.status = StageStatus::Ok;
                s.artifacts = artifacts;
                s.metrics = metrics;
                save_report(&work, &report).map_err(|e| e.in_stage(STAGES[i]))?;
                info!("stage {} done in {:.1}s", STAGES[i], t0.elapsed().as_secs_f64());
            }
            Err(e) => return Err(fail(&mut report, i, e)),
        }
    }
    Ok(report)
}

/// Whether any training variant's critic needs the distorted set.
pub fn needs_distorted(cfg: &PipelineConfig) -> bool {
    cfg.variants.iter().any(|v| v.adversary == Adversary::Ours)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_image_dir_fails_first_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::smoke();
        cfg.paths.images = dir.path().join("nope");
        cfg.paths.work_dir = dir.path().join("work");
        let err = run_end_to_end(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("stage build-dataset failed"), "{err}");
        let report: RunReport =
            serde_json::from_slice(&fs::read(cfg.paths.work_dir.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report.stages[0].status, StageStatus::Failed);
        assert!(report.stages[1..].iter().all(|s| s.status == StageStatus::Pending));
        // Lock released.
        assert!(!cfg.paths.work_dir.join(LOCK_FILE).exists());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("l2+adv*"), "l2_adv_star");
        assert_eq!(slug("lapl+adv"), "lapl_adv");
    }
}
