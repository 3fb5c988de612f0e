//! Layered run configuration: built-in defaults (or the smoke preset), then a
//! TOML file, then `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::LmConfig;
use crate::datasets::{Cohort, CriticDatasetConfig, DistortionThresholds, GeneratorDatasetConfig};
use crate::error::{Error, Result};
use crate::gan::{LossVariant, TrainConfig};
use crate::imaging::{FieldGeometry, RegionPartition};
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Source photographs.
    pub images: PathBuf,
    /// Datasets, checkpoints and outputs are written below this directory.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            images: PathBuf::from("assets/images"),
            work_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    pub near_boundary_deg: f64,
    pub far_boundary_deg: f64,
    pub blend_band_deg: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        let p = RegionPartition::default();
        RegionConfig {
            near_boundary_deg: p.near_boundary_deg,
            far_boundary_deg: p.far_boundary_deg,
            blend_band_deg: p.blend_band_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test images (first in sorted order).
    pub n_images: usize,
    /// Side of the centered test crop.
    pub image_size: usize,
    /// Side of the non-overlapping prediction patches.
    pub patch: usize,
    pub boundaries: Vec<f64>,
    /// The test crop is shown across this physical width.
    pub display_width_m: f64,
    pub viewing_distance_m: f64,
    /// Exemplar crops for the synthetic blur-ladder calibration.
    pub calibration_exemplars: usize,
    pub calibration_patch: usize,
    pub calibration_eccentricities: Vec<f64>,
    pub lm: LmConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let r = FieldGeometry::reference_display();
        EvalConfig {
            n_images: 10,
            image_size: 256,
            patch: 256,
            boundaries: (9..=22).map(f64::from).collect(),
            display_width_m: r.physical_width_m,
            viewing_distance_m: r.viewing_distance_m,
            calibration_exemplars: 8,
            calibration_patch: 64,
            calibration_eccentricities: vec![8.0, 20.0],
            lm: LmConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn geometry(&self) -> Result<FieldGeometry> {
        FieldGeometry::new((self.image_size, self.image_size), self.display_width_m, self.viewing_distance_m)
    }
}

/// Everything a run needs; a run is reproducible from this value alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub cohort: Cohort,
    /// Replaces the cohort's published thresholds when set.
    pub thresholds: Option<DistortionThresholds>,
    pub regions: RegionConfig,
    pub generator_dataset: GeneratorDatasetConfig,
    pub critic_dataset: CriticDatasetConfig,
    pub train: TrainConfig,
    pub variants: Vec<LossVariant>,
    pub evaluation: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            cohort: Cohort::Expert,
            thresholds: None,
            regions: RegionConfig::default(),
            generator_dataset: GeneratorDatasetConfig::default(),
            critic_dataset: CriticDatasetConfig::default(),
            train: TrainConfig::default(),
            variants: vec!["l2+adv".parse().expect("valid"), "l2+adv*".parse().expect("valid")],
            evaluation: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small CPU-sized run: 64-pixel patches, 200 generator steps, three
    /// 128-pixel test crops.
    pub fn smoke() -> Self {
        let d = PipelineConfig::default();
        let mut train = TrainConfig {
            batch_size: 1,
            n_critic: 1,
            max_steps: Some(200),
            chunk: 1,
            ..d.train.clone()
        };
        train.critic.patch_size = 64;
        PipelineConfig {
            paths: Paths {
                work_dir: PathBuf::from("runs/smoke"),
                ..d.paths.clone()
            },
            generator_dataset: GeneratorDatasetConfig {
                n_patches: 16,
                patch: 64,
                mask_pool: 2,
                ..d.generator_dataset.clone()
            },
            critic_dataset: CriticDatasetConfig {
                n_patches: 4,
                patch: 64,
                synthesis: SynthesisConfig {
                    max_iters: 60,
                    stage2_iters: 30,
                    ..SynthesisConfig::default()
                },
                ..d.critic_dataset.clone()
            },
            train,
            evaluation: EvalConfig {
                n_images: 3,
                image_size: 128,
                patch: 64,
                calibration_exemplars: 4,
                lm: LmConfig {
                    restarts: 8,
                    ..LmConfig::default()
                },
                ..d.evaluation.clone()
            },
            ..d
        }
    }

    pub fn thresholds(&self) -> DistortionThresholds {
        self.thresholds.clone().unwrap_or_else(|| DistortionThresholds::for_cohort(self.cohort))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.thresholds().validate()?;
        self.critic_dataset.synthesis.validate()?;
        if self.variants.is_empty() {
            return Err(Error::invalid("at least one training variant is required"));
        }
        let r = &self.regions;
        RegionPartition {
            gaze_px: (0.0, 0.0),
            near_boundary_deg: r.near_boundary_deg,
            far_boundary_deg: r.far_boundary_deg,
            blend_band_deg: r.blend_band_deg,
        }
        .validate()?;
        let e = &self.evaluation;
        if e.n_images == 0 || e.patch == 0 || e.image_size < e.patch {
            return Err(Error::invalid("evaluation needs images at least one patch in size"));
        }
        if e.boundaries.iter().any(|b| !(*b > r.near_boundary_deg)) {
            return Err(Error::invalid("every far boundary must lie beyond the near boundary"));
        }
        if e.calibration_eccentricities.is_empty() {
            return Err(Error::invalid("calibration needs at least one eccentricity"));
        }
        e.geometry()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    /// `base`, overlaid by the TOML file (if any), then by `key=value`
    /// overrides with dotted keys.
    pub fn layered(base: PipelineConfig, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::format("config", e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
            merge(&mut value, overlay);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {o:?} is not key=value")))?;
            let parsed = parse_scalar(raw.trim());
            let mut overlay = parsed;
            for part in key.trim().rsplit('.') {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), overlay);
                overlay = toml::Value::Table(t);
            }
            merge(&mut value, overlay);
        }
        let cfg: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
        Ok(cfg)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for numbers, booleans and arrays; anything else is a string.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for c in [PipelineConfig::default(), PipelineConfig::smoke()] {
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            let back: PipelineConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 7\n[train]\nmax_steps = 50\nn_critic = 2\n").unwrap();
        let c = PipelineConfig::layered(
            PipelineConfig::smoke(),
            Some(&p),
            &["train.n_critic=3".into(), "cohort=naive".into(), "paths.work_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.max_steps, Some(50));
        assert_eq!(c.train.n_critic, 3);
        assert_eq!(c.cohort, Cohort::Naive);
        assert_eq!(c.paths.work_dir, PathBuf::from("out/x"));
        // Untouched smoke values survive.
        assert_eq!(c.generator_dataset.patch, 64);
        assert!(PipelineConfig::layered(PipelineConfig::default(), None, &["seed".into()]).is_err());
        assert!(PipelineConfig::layered(PipelineConfig::default(), None, &["train.n_critic=many".into()]).is_err());
    }
}
