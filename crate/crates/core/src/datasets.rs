//! Generator and critic corpora with JSON-lines manifests.
//!
//! A manifest is a text file with one JSON object per line. Fields:
//!
//! | field | meaning |
//! |---|---|
//! | `patch_path` | PNG path relative to the manifest's directory |
//! | `source_image` | file name of the source image |
//! | `crop_offset` | `[y, x]` of the crop's top-left corner in the source |
//! | `region` | `near`, `far`, or `null` for ground truth shared by both |
//! | `kind` | `natural`, `densified_input` or `distorted` |
//! | `rate_or_percent` | sampling rate (fraction) for inputs, guiding percent for distorted patches |
//! | `strategy` | synthesis strategy of distorted patches (`A`, `B`, `none`) |
//! | `seed` | seed of the mask or synthesis run that produced the patch |
//! | `partner` | ground-truth `patch_path` of a densified or distorted patch |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Vgg19;
use crate::gan::losses::Adversary;
use crate::gan::TrainData;
use crate::imaging::ImagePatch;
use crate::sampling::{densify, sample_count, subsample, RankMatrix};
use crate::synthesis::{synthesize, Strategy, SynthesisConfig};
use crate::util::stream_seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Peripheral region a patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Near,
    Far,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Near, Region::Far];

    pub fn name(self) -> &'static str {
        match self {
            Region::Near => "near",
            Region::Far => "far",
        }
    }

    /// Eccentricity whose threshold sets this region's guiding percentage.
    pub fn threshold_eccentricity(self) -> f64 {
        match self {
            Region::Near => 8.0,
            Region::Far => 14.0,
        }
    }

    /// Default sampling rate of generator inputs.
    pub fn default_rate(self) -> f64 {
        match self {
            Region::Near => 0.12,
            Region::Far => 0.007,
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(Region::Near),
            "far" => Ok(Region::Far),
            other => Err(Error::invalid(format!("unknown region {other:?} (near or far)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Natural,
    DensifiedInput,
    Distorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_path: String,
    pub source_image: String,
    pub crop_offset: (usize, usize),
    pub region: Option<Region>,
    pub kind: EntryKind,
    pub rate_or_percent: Option<f64>,
    pub strategy: Option<Strategy>,
    pub seed: u64,
    pub partner: Option<String>,
}

/// Uniqueness key of an entry.
pub type EntryKey = (String, (usize, usize), Option<Region>, EntryKind);

impl ManifestEntry {
    pub fn key(&self) -> EntryKey {
        (self.source_image.clone(), self.crop_offset, self.region, self.kind)
    }
}

/// Entries plus the directory their paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Read a manifest; a truncated final line (interrupted append) is
    /// ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(DatasetManifest {
            root,
            entries: parse_lines(&text, path)?.0,
        })
    }

    /// Write atomically, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&entry_line(e)?);
        }
        crate::util::write_atomic(path, out.as_bytes())
    }

    pub fn path_of(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.patch_path)
    }

    pub fn select(&self, kind: EntryKind, region: Option<Region>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && (region.is_none() || e.region.is_none() || e.region == region))
            .collect()
    }

    pub fn load_patch(&self, e: &ManifestEntry) -> Result<ImagePatch> {
        ImagePatch::load(&self.path_of(e))
    }
}

fn entry_line(e: &ManifestEntry) -> Result<String> {
    let mut s = serde_json::to_string(e).map_err(|err| Error::format("manifest entry", err.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parsed entries and the byte length of the complete lines.
fn parse_lines(text: &str, path: &Path) -> Result<(Vec<ManifestEntry>, usize)> {
    let mut entries = Vec::new();
    let mut good = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            warn!("{}: ignoring truncated line {}", path.display(), i + 1);
            break;
        }
        if !line.trim().is_empty() {
            let e = serde_json::from_str(line.trim())
                .map_err(|err| Error::format("manifest", format!("{} line {}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        good += line.len();
    }
    Ok((entries, good))
}

/// Append-only manifest writer used by resumable builds. Existing complete
/// entries are kept and reported through [`ManifestWriter::contains`].
pub struct ManifestWriter {
    path: PathBuf,
    file: fs::File,
    keys: HashSet<EntryKey>,
    entries: Vec<ManifestEntry>,
}

impl ManifestWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (entries, good) = if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_lines(&text, path)?
        } else {
            (Vec::new(), 0)
        };
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(good as u64).map_err(|e| Error::io(path, e))?;
        let mut w = ManifestWriter {
            path: path.to_path_buf(),
            file,
            keys: entries.iter().map(|e| e.key()).collect(),
            entries,
        };
        use std::io::Seek;
        w.file.seek(std::io::SeekFrom::End(0)).map_err(|e| Error::io(&w.path, e))?;
        Ok(w)
    }

    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Already recorded and its file present.
    pub fn contains(&self, key: &EntryKey) -> bool {
        self.keys.contains(key)
            && self
                .entries
                .iter()
                .any(|e| &e.key() == key && self.root().join(&e.patch_path).exists())
    }

    pub fn append(&mut self, e: ManifestEntry) -> Result<()> {
        if self.keys.contains(&e.key()) {
            return Ok(());
        }
        self.file
            .write_all(entry_line(&e)?.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|err| Error::io(&self.path, err))?;
        self.keys.insert(e.key());
        self.entries.push(e);
        Ok(())
    }

    pub fn finish(self) -> DatasetManifest {
        DatasetManifest {
            root: self.root().to_path_buf(),
            entries: self.entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Expert,
    Naive,
}

impl std::str::FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Cohort::Expert),
            "naive" => Ok(Cohort::Naive),
            other => Err(Error::invalid(format!("unknown cohort {other:?} (expert or naive)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub eccentricity_deg: f64,
    /// Guiding percentage at the 75 % detection point.
    pub percent: f64,
    /// 95 % confidence interval.
    pub ci: (f64, f64),
}

/// Guiding-sample percentages at which distortions become detectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionThresholds {
    pub cohort: Cohort,
    pub points: Vec<ThresholdPoint>,
}

impl DistortionThresholds {
    pub fn expert() -> Self {
        let p = |e, v, lo, hi| ThresholdPoint {
            eccentricity_deg: e,
            percent: v,
            ci: (lo, hi),
        };
        DistortionThresholds {
            cohort: Cohort::Expert,
            points: vec![p(8.0, 9.09, 7.85, 10.48), p(14.0, 6.89, 5.78, 8.14), p(20.0, 4.71, 3.60, 5.94)],
        }
    }

    pub fn naive() -> Self {
        let p = |e, v, lo, hi| ThresholdPoint {
            eccentricity_deg: e,
            percent: v,
            ci: (lo, hi),
        };
        DistortionThresholds {
            cohort: Cohort::Naive,
            points: vec![p(8.0, 7.93, 7.47, 8.41), p(14.0, 4.57, 3.98, 5.29), p(20.0, 2.06, 1.30, 2.76)],
        }
    }

    pub fn for_cohort(c: Cohort) -> Self {
        match c {
            Cohort::Expert => DistortionThresholds::expert(),
            Cohort::Naive => DistortionThresholds::naive(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("threshold table is empty"));
        }
        for w in self.points.windows(2) {
            if !(w[1].eccentricity_deg > w[0].eccentricity_deg && w[1].percent < w[0].percent) {
                return Err(Error::invalid(
                    "threshold percentages must strictly decrease with eccentricity",
                ));
            }
        }
        for p in &self.points {
            if !(0.0..=100.0).contains(&p.percent) || !(p.ci.0 <= p.percent && p.percent <= p.ci.1) {
                return Err(Error::invalid(format!("bad threshold point {p:?}")));
            }
        }
        Ok(())
    }

    /// Percentage at `ecc`, linear between tabulated eccentricities.
    pub fn percent_at(&self, ecc: f64) -> Result<f64> {
        self.validate()?;
        let pts = &self.points;
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        if ecc < first.eccentricity_deg || ecc > last.eccentricity_deg {
            return Err(Error::invalid(format!(
                "eccentricity {ecc}° outside the table [{}, {}]",
                first.eccentricity_deg, last.eccentricity_deg
            )));
        }
        for w in pts.windows(2) {
            if ecc <= w[1].eccentricity_deg {
                let t = (ecc - w[0].eccentricity_deg) / (w[1].eccentricity_deg - w[0].eccentricity_deg);
                return Ok(w[0].percent + t * (w[1].percent - w[0].percent));
            }
        }
        Ok(first.percent)
    }

    pub fn percent_for(&self, region: Region) -> Result<f64> {
        self.percent_at(region.threshold_eccentricity())
    }
}

/// Sorted image files (png/jpg/jpeg) of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::invalid(format!("no images in {}", dir.display())));
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A planned crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub index: usize,
    pub source: PathBuf,
    pub offset: (usize, usize),
}

/// `n` random crops of side `patch`, assigned round-robin over the usable
/// sources (so per-source counts differ by at most one), with distinct
/// offsets within each source.
pub fn plan_crops(image_dir: &Path, n: usize, patch: usize, seed: u64) -> Result<(Vec<Crop>, HashMap<PathBuf, ImagePatch>)> {
    let mut sources = Vec::new();
    let mut images = HashMap::new();
    for p in list_images(image_dir)? {
        match ImagePatch::load(&p) {
            Ok(img) if img.height() >= patch && img.width() >= patch => {
                images.insert(p.clone(), img);
                sources.push(p);
            }
            Ok(img) => warn!("skipping {}: {}×{} is smaller than {patch}", p.display(), img.height(), img.width()),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::invalid(format!(
            "no image in {} is at least {patch}×{patch}",
            image_dir.display()
        )));
    }
    let mut used: HashSet<(usize, (usize, usize))> = HashSet::new();
    let mut crops = Vec::with_capacity(n);
    for i in 0..n {
        let s = i % sources.len();
        let img = &images[&sources[s]];
        let (ry, rx) = (img.height() - patch, img.width() - patch);
        if ((ry + 1) * (rx + 1)) < n.div_ceil(sources.len()) {
            return Err(Error::invalid(format!(
                "{} has too few distinct {patch}×{patch} crops for {n} patches",
                sources[s].display()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[10, i as u64]));
        let offset = loop {
            let o = (rng.random_range(0..=ry), rng.random_range(0..=rx));
            if used.insert((s, o)) {
                break o;
            }
        };
        crops.push(Crop {
            index: i,
            source: sources[s].clone(),
            offset,
        });
    }
    Ok((crops, images))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorDatasetConfig {
    pub n_patches: usize,
    pub patch: usize,
    pub near_rate: f64,
    pub far_rate: f64,
    pub seed: u64,
    /// Number of distinct void-and-cluster rank matrices shared by the crops.
    pub mask_pool: usize,
}

impl Default for GeneratorDatasetConfig {
    fn default() -> Self {
        GeneratorDatasetConfig {
            n_patches: 1000,
            patch: 256,
            near_rate: Region::Near.default_rate(),
            far_rate: Region::Far.default_rate(),
            seed: 0,
            mask_pool: 8,
        }
    }
}

impl GeneratorDatasetConfig {
    pub fn rate(&self, r: Region) -> f64 {
        match r {
            Region::Near => self.near_rate,
            Region::Far => self.far_rate,
        }
    }
}

/// Ground-truth crops plus their sparse-then-densified versions for both
/// regions. Resumable: entries already in `out_dir`'s manifest are skipped.
pub fn build_generator_dataset(image_dir: &Path, out_dir: &Path, cfg: &GeneratorDatasetConfig) -> Result<DatasetManifest> {
    if cfg.n_patches == 0 || cfg.mask_pool == 0 {
        return Err(Error::invalid("n_patches and mask_pool must be positive"));
    }
    for r in Region::ALL {
        let rate = cfg.rate(r);
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::invalid(format!("{} rate {rate} outside (0, 1]", r.name())));
        }
    }
    let (crops, images) = plan_crops(image_dir, cfg.n_patches, cfg.patch, cfg.seed)?;
    let mut w = ManifestWriter::open(&out_dir.join(MANIFEST_FILE))?;
    let max_rate = cfg.near_rate.max(cfg.far_rate);
    let mut ranks: BTreeMap<usize, RankMatrix> = BTreeMap::new();
    for c in &crops {
        let src = file_name(&c.source);
        let gt_path = format!("natural/{:05}.png", c.index);
        let gt = images[&c.source].crop(c.offset.0, c.offset.1, cfg.patch, cfg.patch)?;
        let gt_entry = ManifestEntry {
            patch_path: gt_path.clone(),
            source_image: src.clone(),
            crop_offset: c.offset,
            region: None,
            kind: EntryKind::Natural,
            rate_or_percent: None,
            strategy: None,
            seed: cfg.seed,
            partner: None,
        };
        if !w.contains(&gt_entry.key()) {
            gt.save_png(&w.root().join(&gt_path))?;
            w.append(gt_entry)?;
        }
        let pool = c.index % cfg.mask_pool;
        let mask_seed = stream_seed(cfg.seed, &[11, pool as u64]);
        for r in Region::ALL {
            let entry = ManifestEntry {
                patch_path: format!("densified/{}/{:05}.png", r.name(), c.index),
                source_image: src.clone(),
                crop_offset: c.offset,
                region: Some(r),
                kind: EntryKind::DensifiedInput,
                rate_or_percent: Some(cfg.rate(r)),
                strategy: None,
                seed: mask_seed,
                partner: Some(gt_path.clone()),
            };
            if w.contains(&entry.key()) {
                continue;
            }
            let rm = match ranks.get(&pool) {
                Some(m) => m,
                None => {
                    let upto = sample_count(cfg.patch * cfg.patch, max_rate);
                    let m = RankMatrix::compute_upto(cfg.patch, cfg.patch, mask_seed, upto)?;
                    ranks.entry(pool).or_insert(m)
                }
            };
            let mask = rm.threshold(cfg.rate(r))?;
            let dense = densify(&subsample(&gt, &mask)?)?;
            dense.save_png(&w.root().join(&entry.patch_path))?;
            w.append(entry)?;
        }
    }
    let m = w.finish();
    info!("generator dataset: {} entries in {}", m.entries.len(), out_dir.display());
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticDatasetConfig {
    /// Distorted patches per region (each with a pristine partner).
    pub n_patches: usize,
    pub patch: usize,
    pub seed: u64,
    /// Synthesis settings; `guiding_percent` and `seed` are set per patch.
    pub synthesis: SynthesisConfig,
}

impl Default for CriticDatasetConfig {
    fn default() -> Self {
        CriticDatasetConfig {
            n_patches: 1000,
            patch: 256,
            seed: 0,
            synthesis: SynthesisConfig::default(),
        }
    }
}

/// Pristine crops and their constrained-synthesis counterparts, per region,
/// with the guiding percentage read from the thresholds at the region's
/// eccentricity.
pub fn build_critic_dataset(
    vgg: &Vgg19<f32>,
    image_dir: &Path,
    out_dir: &Path,
    thresholds: &DistortionThresholds,
    cfg: &CriticDatasetConfig,
) -> Result<DatasetManifest> {
    thresholds.validate()?;
    cfg.synthesis.validate()?;
    if cfg.n_patches == 0 {
        return Err(Error::invalid("n_patches must be positive"));
    }
    let mut w = ManifestWriter::open(&out_dir.join(MANIFEST_FILE))?;
    for (ri, r) in Region::ALL.into_iter().enumerate() {
        let percent = thresholds.percent_for(r)?;
        let (crops, images) = plan_crops(image_dir, cfg.n_patches, cfg.patch, stream_seed(cfg.seed, &[12, ri as u64]))?;
        for c in &crops {
            let src = file_name(&c.source);
            let gt_path = format!("pristine/{}/{:05}.png", r.name(), c.index);
            let gt = images[&c.source].crop(c.offset.0, c.offset.1, cfg.patch, cfg.patch)?;
            let gt_entry = ManifestEntry {
                patch_path: gt_path.clone(),
                source_image: src.clone(),
                crop_offset: c.offset,
                region: Some(r),
                kind: EntryKind::Natural,
                rate_or_percent: None,
                strategy: None,
                seed: cfg.seed,
                partner: None,
            };
            if !w.contains(&gt_entry.key()) {
                gt.save_png(&w.root().join(&gt_path))?;
                w.append(gt_entry)?;
            }
            let seed = stream_seed(cfg.seed, &[13, ri as u64, c.index as u64]);
            let entry = ManifestEntry {
                patch_path: format!("distorted/{}/{:05}.png", r.name(), c.index),
                source_image: src,
                crop_offset: c.offset,
                region: Some(r),
                kind: EntryKind::Distorted,
                rate_or_percent: Some(percent),
                strategy: Some(cfg.synthesis.strategy),
                seed,
                partner: Some(gt_path),
            };
            if w.contains(&entry.key()) {
                continue;
            }
            let scfg = SynthesisConfig {
                guiding_percent: percent,
                seed,
                ..cfg.synthesis.clone()
            };
            let out = synthesize(vgg, &gt, &scfg)?;
            if !out.converged {
                info!("{}: synthesis stopped at its iteration budget", entry.patch_path);
            }
            out.image.save_png(&w.root().join(&entry.patch_path))?;
            w.append(entry)?;
        }
    }
    let m = w.finish();
    info!("critic dataset: {} entries in {}", m.entries.len(), out_dir.display());
    Ok(m)
}

/// Outcome of [`crate::synthesis::batch_synthesize`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub written: usize,
    pub skipped_existing: usize,
    pub failed: Vec<String>,
}

/// Findings of [`verify_manifest`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub entries: usize,
    pub missing_files: Vec<String>,
    pub missing_partners: Vec<String>,
    pub unpaired_inputs: Vec<String>,
    pub duplicates: Vec<String>,
    /// Max minus min per-source count, per (kind, region).
    pub max_imbalance: usize,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.missing_files.is_empty()
            && self.missing_partners.is_empty()
            && self.unpaired_inputs.is_empty()
            && self.duplicates.is_empty()
            && self.max_imbalance <= 1
    }
}

/// Check referential integrity, uniqueness and class balance.
pub fn verify_manifest(path: &Path) -> Result<VerifyReport> {
    let m = DatasetManifest::load(path)?;
    let mut rep = VerifyReport {
        entries: m.entries.len(),
        ..Default::default()
    };
    let paths: HashSet<&str> = m.entries.iter().map(|e| e.patch_path.as_str()).collect();
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<(EntryKind, Option<Region>), BTreeMap<&str, usize>> = BTreeMap::new();
    let sources: HashSet<&str> = m.entries.iter().map(|e| e.source_image.as_str()).collect();
    for e in &m.entries {
        if !m.path_of(e).exists() {
            rep.missing_files.push(e.patch_path.clone());
        }
        if !seen.insert(e.key()) {
            rep.duplicates.push(e.patch_path.clone());
        }
        match (&e.partner, e.kind) {
            (Some(p), _) if !paths.contains(p.as_str()) => rep.missing_partners.push(e.patch_path.clone()),
            (None, EntryKind::DensifiedInput) => rep.unpaired_inputs.push(e.patch_path.clone()),
            _ => {}
        }
        *counts
            .entry((e.kind, e.region))
            .or_default()
            .entry(e.source_image.as_str())
            .or_default() += 1;
    }
    for per_source in counts.values() {
        let vals: Vec<usize> = sources.iter().map(|s| per_source.get(s).copied().unwrap_or(0)).collect();
        let (lo, hi) = (vals.iter().min().copied().unwrap_or(0), vals.iter().max().copied().unwrap_or(0));
        rep.max_imbalance = rep.max_imbalance.max(hi - lo);
    }
    Ok(rep)
}

/// Training data for one region: generator pairs from `gen_manifest`, and
/// critic reals from `critic_manifest`. In `ours` mode only entries tagged
/// `distorted` (plus pristine partners) reach the critic; in standard mode
/// only natural images do.
pub fn load_train_data(
    gen_manifest: &DatasetManifest,
    critic_manifest: Option<&DatasetManifest>,
    region: Region,
    adversary: Adversary,
) -> Result<TrainData> {
    let mut by_path: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &gen_manifest.entries {
        by_path.insert(e.patch_path.as_str(), e);
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for e in gen_manifest
        .entries
        .iter()
        .filter(|e| e.kind == EntryKind::DensifiedInput && e.region == Some(region))
    {
        let partner = e
            .partner
            .as_deref()
            .and_then(|p| by_path.get(p))
            .ok_or_else(|| Error::format("manifest", format!("{} has no ground-truth partner", e.patch_path)))?;
        inputs.push(gen_manifest.load_patch(e)?);
        targets.push(gen_manifest.load_patch(partner)?);
    }
    if inputs.is_empty() {
        return Err(Error::invalid(format!("generator manifest has no {} inputs", region.name())));
    }
    let (mut distorted, mut pristine) = (Vec::new(), Vec::new());
    if let Some(cm) = critic_manifest {
        for e in cm.entries.iter().filter(|e| e.region == Some(region) || e.region.is_none()) {
            match (e.kind, adversary) {
                (EntryKind::Distorted, Adversary::Ours) => distorted.push(cm.load_patch(e)?),
                (EntryKind::Natural, _) => pristine.push(cm.load_patch(e)?),
                _ => {}
            }
        }
    }
    if adversary == Adversary::Ours && distorted.is_empty() {
        return Err(Error::invalid(format!(
            "the distorted-manifold critic needs distorted {} patches",
            region.name()
        )));
    }
    Ok(TrainData {
        inputs,
        targets,
        distorted,
        pristine,
    })
}
