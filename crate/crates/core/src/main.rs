use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use foveated::calibration::calvgg::{sweep_far_boundary, write_sweep_csv, MethodOutputs, SweepScene};
use foveated::calibration::synthetic::{blur_ladder_set, fit_ladder_model};
use foveated::calibration::{calibrate_scalar, calibrate_vgg, predict_full_image, CalibratedMetric, MetricId};
use foveated::datasets::{
    build_critic_dataset, build_generator_dataset, list_images, load_train_data, plan_crops, verify_manifest,
    CriticDatasetConfig, DatasetManifest, GeneratorDatasetConfig, Region,
};
use foveated::features::{sha256_hex, Vgg19, VGG19_FILE, WEIGHT_DIR_ENV};
use foveated::gan::{reconstruct, reconstruct_from_checkpoint, load_generator, LossVariant, TrainConfig, Trainer};
use foveated::imaging::{composite_foveated, partition_weights, FieldGeometry, ImagePatch, RegionPartition};
use foveated::pipeline::{plot_curves, run_end_to_end, PipelineConfig};
use foveated::sampling::{densify, low_frequency_energy, subsample, uniform_random_mask, void_and_cluster_mask};
use foveated::synthesis::{batch_synthesize, synthesize, Strategy, SynthesisConfig};
use foveated::util::{stream_seed, write_atomic};
use foveated::{Error, Result};

#[derive(Parser)]
#[command(name = "foveated", version, about = "Foveated reconstruction toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small smoke preset instead of the full defaults.
    #[arg(long, global = true)]
    smoke: bool,
    /// Dotted-key override, e.g. `train.max_steps=500`. Repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a blue-noise (or white-noise) sampling mask as PNG.
    MakeMask {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Sampling rate in (0, 1].
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the generator (natural + densified) or critic (pristine + distorted) dataset.
    BuildDataset {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_patches: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Constrained texture synthesis of one exemplar or a directory of exemplars.
    Synthesize {
        #[arg(long, conflicts_with = "exemplar_dir")]
        exemplar: Option<PathBuf>,
        #[arg(long)]
        exemplar_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Guiding-sample percentage.
        #[arg(long)]
        percent: Option<f64>,
        /// A, B or none.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        iters: Option<usize>,
        /// Crop side for directory mode.
        #[arg(long, default_value_t = 256)]
        patch: usize,
    },
    /// Train one regional generator.
    Train {
        #[arg(long)]
        gen_manifest: PathBuf,
        #[arg(long)]
        critic_manifest: Option<PathBuf>,
        #[arg(long)]
        region: Region,
        #[arg(long)]
        variant: Option<LossVariant>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Run a trained generator on an image.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the input as a full image: subsample at this rate and densify first.
        #[arg(long)]
        sample_rate: Option<f64>,
    },
    /// Blend fovea, near and far images by eccentricity.
    Composite {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        near: PathBuf,
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Fit a calibrated metric from measured detection probabilities.
    Calibrate {
        #[arg(long)]
        metric: MetricId,
        /// CSV with reference,test,eccentricity,probability (paths relative to the file).
        #[arg(long, required_unless_present = "synthetic_ladder")]
        data: Option<PathBuf>,
        /// Eccentricities to fit, comma separated (default: all in the data).
        #[arg(long, value_delimiter = ',')]
        ecc: Vec<f64>,
        /// Fit to the synthetic blur ladder built from these images instead.
        #[arg(long)]
        synthetic_ladder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted detection probability of a test image against its reference.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Evaluate as a single patch at this eccentricity instead of tiling.
        #[arg(long)]
        ecc: Option<f64>,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Detection rate versus far-periphery boundary for every method of a run.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        /// Work directory of a finished `run`.
        #[arg(long)]
        run_dir: PathBuf,
        /// `lo:hi` in whole degrees, or a comma list.
        #[arg(long, default_value = "9:22")]
        boundaries: String,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a sweep CSV as a line plot.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end.
    Run {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
    /// Check dataset manifests and backbone weight files.
    Verify {
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        sha256: Option<String>,
    },
    /// Download backbone weights (safetensors) into the weight directory.
    FetchWeights {
        #[arg(long)]
        url: String,
        #[arg(long)]
        sha256: Option<String>,
        /// Defaults to the weight-cache directory from the environment.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the effective configuration with every default.
    Show,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Generator,
    Critic,
}

#[derive(Args)]
struct ViewArgs {
    /// Gaze point `x,y` in pixels (default: image center).
    #[arg(long)]
    gaze: Option<String>,
    /// Physical width the image is shown at (default from config).
    #[arg(long)]
    display_width_m: Option<f64>,
    #[arg(long)]
    viewing_distance_m: Option<f64>,
}

impl ViewArgs {
    fn geometry(&self, cfg: &PipelineConfig, img: &ImagePatch) -> Result<(FieldGeometry, (f64, f64))> {
        let e = &cfg.evaluation;
        let geom = FieldGeometry::new(
            (img.width(), img.height()),
            self.display_width_m.unwrap_or(e.display_width_m),
            self.viewing_distance_m.unwrap_or(e.viewing_distance_m),
        )?;
        let gaze = match &self.gaze {
            Some(g) => parse_pair(g)?,
            None => geom.center(),
        };
        Ok((geom, gaze))
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::invalid(format!("expected x,y, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_boundaries(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("bad boundary list {s:?}"));
    if let Some((lo, hi)) = s.split_once(':') {
        let (lo, hi): (i64, i64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).map(|v| v as f64).collect());
    }
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let base = if c.smoke {
        PipelineConfig::smoke()
    } else {
        PipelineConfig::default()
    };
    let mut cfg = PipelineConfig::layered(base, c.config.as_deref(), &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn backbone(cfg: &PipelineConfig) -> Result<Vgg19<f32>> {
    Vgg19::from_env_or_surrogate(stream_seed(cfg.seed, &[37]))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::format("output", e.to_string()))?;
    println!("{s}");
    Ok(())
}

#[derive(Deserialize)]
struct CalRow {
    reference: PathBuf,
    test: PathBuf,
    eccentricity: f64,
    probability: f64,
}

fn cmd_calibrate(
    cfg: &PipelineConfig,
    metric: MetricId,
    data: Option<&Path>,
    ecc: &[f64],
    ladder: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let lm = foveated::calibration::LmConfig {
        seed: cfg.seed,
        ..cfg.evaluation.lm
    };
    if let Some(dir) = ladder {
        if metric != MetricId::CalVgg {
            return Err(Error::invalid("the synthetic ladder calibrates the calvgg metric only"));
        }
        let e = &cfg.evaluation;
        let (crops, images) = plan_crops(dir, e.calibration_exemplars, e.calibration_patch, stream_seed(cfg.seed, &[34]))?;
        let ex: Vec<ImagePatch> = crops
            .iter()
            .map(|c| images[&c.source].crop(c.offset.0, c.offset.1, e.calibration_patch, e.calibration_patch))
            .collect::<Result<_>>()?;
        let eccs = if ecc.is_empty() { e.calibration_eccentricities.clone() } else { ecc.to_vec() };
        let set = blur_ladder_set(&backbone(cfg)?, &ex, &eccs, None, stream_seed(cfg.seed, &[35]))?;
        let model = fit_ladder_model(&set, &lm)?;
        model.save(out)?;
        return print_json(&model);
    }
    let data = data.expect("required by clap");
    let base = data.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(std::fs::File::open(data).map_err(|e| Error::io(data, e))?);
    let vgg = if metric.uses_backbone() { Some(backbone(cfg)?) } else { None };
    let probe = CalibratedMetric {
        metric,
        layers: Vec::new(),
        calibrations: Vec::new(),
    };
    let mut groups: BTreeMap<i64, (f64, Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<CalRow>().enumerate() {
        let row = row.map_err(|e| Error::format(data.display().to_string(), format!("line {}: {e}", i + 2)))?;
        if !ecc.is_empty() && !ecc.contains(&row.eccentricity) {
            continue;
        }
        let r = ImagePatch::load(&base.join(&row.reference))?;
        let t = ImagePatch::load(&base.join(&row.test))?;
        let f = probe.features(vgg.as_ref(), &r, &t)?;
        let g = groups
            .entry((row.eccentricity * 1000.0).round() as i64)
            .or_insert((row.eccentricity, Vec::new(), Vec::new()));
        g.1.push(f);
        g.2.push(row.probability);
    }
    if groups.is_empty() {
        return Err(Error::invalid("no calibration rows at the requested eccentricities"));
    }
    let mut cals = Vec::new();
    for (e, feats, probs) in groups.into_values() {
        cals.push(if metric == MetricId::CalVgg {
            calibrate_vgg(&feats, &probs, e, &lm)?
        } else {
            let scores: Vec<f64> = feats.iter().map(|f| f[0]).collect();
            calibrate_scalar(&scores, &probs, e, &lm)?
        });
    }
    let model = CalibratedMetric::new(metric, cals)?;
    model.save(out)?;
    print_json(&model)
}

fn cmd_sweep(cfg: &PipelineConfig, model: &Path, run_dir: &Path, boundaries: &[f64], patch: usize, out: &Path) -> Result<()> {
    let model = CalibratedMetric::load(model)?;
    let vgg = if model.metric.uses_backbone() { Some(backbone(cfg)?) } else { None };
    let rec = run_dir.join("reconstructions");
    let refs = list_images(&rec.join("reference"))?;
    let mut scenes = Vec::new();
    for p in &refs {
        let reference = ImagePatch::load(p)?;
        let geom = FieldGeometry::new(
            (reference.width(), reference.height()),
            cfg.evaluation.display_width_m,
            cfg.evaluation.viewing_distance_m,
        )?;
        scenes.push(SweepScene {
            name: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            gaze_px: geom.center(),
            reference,
            geom,
        });
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&rec)
        .map_err(|e| Error::io(&rec, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "reference"))
        .collect();
    dirs.sort();
    let load = |p: PathBuf| if p.exists() { ImagePatch::load(&p).ok() } else { None };
    let methods: Vec<MethodOutputs> = dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            MethodOutputs {
                method: if name == "densified" { "interpolation".into() } else { name },
                near: scenes.iter().map(|s| load(d.join("near").join(&s.name))).collect(),
                far: scenes.iter().map(|s| load(d.join("far").join(&s.name))).collect(),
            }
        })
        .collect();
    let rep = sweep_far_boundary(
        &model,
        vgg.as_ref(),
        &scenes,
        &methods,
        boundaries,
        cfg.regions.near_boundary_deg,
        cfg.regions.blend_band_deg,
        patch,
    )?;
    write_sweep_csv(out, &rep.rows)?;
    for (m, b, s) in &rep.missing {
        eprintln!("missing: {m} at {b}° for {s}");
    }
    println!("{} rows written to {}", rep.rows.len(), out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::MakeMask {
            height,
            width,
            rate,
            uniform,
            out,
        } => {
            let mask = if uniform {
                uniform_random_mask(height, width, rate, cfg.seed)?
            } else {
                void_and_cluster_mask(height, width, rate, cfg.seed)?
            };
            mask.save_png(&out)?;
            println!("{} samples, low-frequency energy {:.6e}", mask.count(), low_frequency_energy(&mask));
        }
        Cmd::BuildDataset {
            kind,
            images,
            out,
            n_patches,
            patch,
        } => {
            let images = images.unwrap_or_else(|| cfg.paths.images.clone());
            let m = match kind {
                DatasetKind::Generator => {
                    let d = &cfg.generator_dataset;
                    let g = GeneratorDatasetConfig {
                        n_patches: n_patches.unwrap_or(d.n_patches),
                        patch: patch.unwrap_or(d.patch),
                        seed: cfg.seed,
                        ..d.clone()
                    };
                    build_generator_dataset(&images, &out, &g)?
                }
                DatasetKind::Critic => {
                    let d = &cfg.critic_dataset;
                    let c = CriticDatasetConfig {
                        n_patches: n_patches.unwrap_or(d.n_patches),
                        patch: patch.unwrap_or(d.patch),
                        seed: cfg.seed,
                        ..d.clone()
                    };
                    build_critic_dataset(&backbone(&cfg)?, &images, &out, &cfg.thresholds(), &c)?
                }
            };
            println!("{} entries in {}", m.entries.len(), out.display());
        }
        Cmd::Synthesize {
            exemplar,
            exemplar_dir,
            out,
            percent,
            strategy,
            iters,
            patch,
        } => {
            let base = &cfg.critic_dataset.synthesis;
            let s = SynthesisConfig {
                guiding_percent: percent.unwrap_or(base.guiding_percent),
                strategy: strategy.unwrap_or(base.strategy),
                max_iters: iters.unwrap_or(base.max_iters),
                seed: cfg.seed,
                ..base.clone()
            };
            let vgg = backbone(&cfg)?;
            match (exemplar, exemplar_dir) {
                (Some(ex), _) => {
                    let r = synthesize(&vgg, &ImagePatch::load(&ex)?, &s)?;
                    r.image.save_png(&out)?;
                    println!(
                        "loss {:.6e} -> {:.6e}, converged: {}",
                        r.initial_loss(),
                        r.final_loss(),
                        r.converged
                    );
                }
                (None, Some(dir)) => {
                    let summary = batch_synthesize(&vgg, &dir, &out, patch, &s)?;
                    print_json(&summary)?;
                }
                (None, None) => return Err(Error::invalid("give --exemplar or --exemplar-dir")),
            }
        }
        Cmd::Train {
            gen_manifest,
            critic_manifest,
            region,
            variant,
            out,
            max_steps,
            resume,
        } => {
            let gen = DatasetManifest::load(&gen_manifest)?;
            let critic = critic_manifest.as_deref().map(DatasetManifest::load).transpose()?;
            let tcfg = TrainConfig {
                variant: variant.unwrap_or(cfg.train.variant),
                max_steps: max_steps.or(cfg.train.max_steps),
                seed: cfg.seed,
                ..cfg.train.clone()
            };
            let data = load_train_data(&gen, critic.as_ref(), region, tcfg.variant.adversary)?;
            let mut t = if resume {
                Trainer::resume(&out, &data)?
            } else {
                Trainer::new(tcfg, &data)?
            };
            let s = t.run(Some(&out))?;
            println!(
                "{} steps, {} epochs, stopped by {:?}; training mse {:.6}",
                s.steps,
                s.epochs,
                s.stop,
                t.training_mse()?
            );
        }
        Cmd::Reconstruct {
            checkpoint,
            input,
            out,
            sample_rate,
        } => {
            let img = ImagePatch::load(&input)?;
            let rec = match sample_rate {
                Some(r) => {
                    let mask = void_and_cluster_mask(img.height(), img.width(), r, cfg.seed)?;
                    let dense = densify(&subsample(&img, &mask)?)?;
                    reconstruct(&load_generator(&checkpoint)?, &dense)?
                }
                None => reconstruct_from_checkpoint(&checkpoint, &img)?,
            };
            rec.save_png(&out)?;
        }
        Cmd::Composite {
            full,
            near,
            far,
            out,
            view,
        } => {
            let full = ImagePatch::load(&full)?;
            let (geom, gaze) = view.geometry(&cfg, &full)?;
            let r = &cfg.regions;
            let part = RegionPartition {
                gaze_px: gaze,
                near_boundary_deg: r.near_boundary_deg,
                far_boundary_deg: r.far_boundary_deg,
                blend_band_deg: r.blend_band_deg,
            };
            let w = partition_weights(&geom, &part)?;
            composite_foveated(&full, &ImagePatch::load(&near)?, &ImagePatch::load(&far)?, &w)?.save_png(&out)?;
        }
        Cmd::Calibrate {
            metric,
            data,
            ecc,
            synthetic_ladder,
            out,
        } => cmd_calibrate(&cfg, metric, data.as_deref(), &ecc, synthetic_ladder.as_deref(), &out)?,
        Cmd::Evaluate {
            model,
            reference,
            test,
            ecc,
            patch,
            view,
        } => {
            let model = CalibratedMetric::load(&model)?;
            let vgg = if model.metric.uses_backbone() { Some(backbone(&cfg)?) } else { None };
            let (r, t) = (ImagePatch::load(&reference)?, ImagePatch::load(&test)?);
            match ecc {
                Some(e) => println!("{:.6}", model.predict_patch(vgg.as_ref(), &r, &t, e)?),
                None => {
                    let (geom, gaze) = view.geometry(&cfg, &r)?;
                    print_json(&predict_full_image(&model, vgg.as_ref(), &r, &t, gaze, &geom, patch)?)?;
                }
            }
        }
        Cmd::Sweep {
            model,
            run_dir,
            boundaries,
            patch,
            out,
        } => cmd_sweep(
            &cfg,
            &model,
            &run_dir,
            &parse_boundaries(&boundaries)?,
            patch.unwrap_or(cfg.evaluation.patch),
            &out,
        )?,
        Cmd::Plot { csv, out } => print_json(&plot_curves(&csv, &out)?)?,
        Cmd::Run { images, work_dir } => {
            let mut cfg = cfg;
            if let Some(i) = images {
                cfg.paths.images = i;
            }
            if let Some(w) = work_dir {
                cfg.paths.work_dir = w;
            }
            let report = run_end_to_end(&cfg)?;
            print_json(&report)?;
        }
        Cmd::Config { cmd: ConfigCmd::Show } => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
        }
        Cmd::Verify {
            manifest,
            weights,
            sha256,
        } => {
            if manifest.is_empty() && weights.is_none() {
                return Err(Error::invalid("give --manifest and/or --weights"));
            }
            let mut ok = true;
            for m in &manifest {
                let rep = verify_manifest(m)?;
                ok &= rep.ok();
                print_json(&rep)?;
            }
            if let Some(w) = weights {
                let v = Vgg19::<f32>::load(&w, sha256.as_deref())?;
                print_json(v.source())?;
            }
            if !ok {
                return Err(Error::format("manifest", "verification found problems"));
            }
        }
        Cmd::FetchWeights { url, sha256, out_dir } => {
            let dir = out_dir
                .or_else(|| std::env::var_os(WEIGHT_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| Error::invalid(format!("give --out-dir or set {WEIGHT_DIR_ENV}")))?;
            let bytes = ureq::get(&url)
                .call()
                .and_then(|mut r| r.body_mut().with_config().limit(2 << 30).read_to_vec())
                .map_err(|e| Error::io(&dir, std::io::Error::other(e.to_string())))?;
            let digest = sha256_hex(&bytes);
            if let Some(want) = &sha256 {
                if !want.eq_ignore_ascii_case(&digest) {
                    return Err(Error::format("download", format!("sha256 {digest}, expected {want}")));
                }
            }
            let path = dir.join(VGG19_FILE);
            write_atomic(&path, &bytes)?;
            Vgg19::<f32>::load(&path, Some(&digest))?;
            println!("{} ({digest})", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
