//! End-to-end orchestration: heart region, slice selection, decomposition,
//! masking, scoring, run manifests and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cacslice::{classify_slices, heart_slices, train_classifier, ClassifierConfig, SliceClassifier};
use crate::calgan::{gan_slices, train_cyclegan_with_checkpoints, CycleGan, GanSlice, GanTrainConfig};
use crate::error::{Error, Result};
use crate::heartseg::{seg_metrics, segment_heart, segment_heart_with_stride, train_heartseg, HeartSegConfig, HeartSegModel};
use crate::phantom::{generate_pair, PhantomSpec};
use crate::scoring::{mask_cac_map, risk_category, score_clinical, score_map, RiskCategory, ScoreRecord, ScoringConfig};
use crate::stats::{
    agreement, detection_metrics, mean, median, weighted_kappa, AgreementStats, DetectionMetrics, PairRow,
    Interval, LimitsMethod,
};
use crate::volume::{
    center_of_mass, normalize_slice, read_mask, read_volume, resample_mask, resample_onto, write_mask, write_volume,
    BinaryMask, Dtype, Grid, HuWindow, Interpolation, Volume,
};

/// Everything a run needs, stored as one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub use_heart_seg: bool,
    pub use_slice_classifier: bool,
    pub heartseg_checkpoint: Option<PathBuf>,
    pub classifier_checkpoint: Option<PathBuf>,
    pub cyclegan_checkpoint: Option<PathBuf>,
    /// Grid for slice classification and decomposition.
    pub working_spacing_mm: [f64; 3],
    /// Sliding-window stride for heart segmentation; the model's own when unset.
    pub segmentation_stride: Option<[usize; 3]>,
    /// Map values below this are dropped before masking.
    pub map_floor_hu: f64,
    /// Also decompose region slices within this many slices of a flagged one.
    pub flag_dilation_slices: usize,
    pub scoring: ScoringConfig,
    pub limits: LimitsMethod,
    pub heartseg: HeartSegConfig,
    pub classifier: ClassifierConfig,
    pub cyclegan: GanTrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            use_heart_seg: true,
            use_slice_classifier: true,
            heartseg_checkpoint: None,
            classifier_checkpoint: None,
            cyclegan_checkpoint: None,
            working_spacing_mm: [1.0, 1.0, 1.5],
            segmentation_stride: None,
            map_floor_hu: 0.5,
            flag_dilation_slices: 0,
            scoring: ScoringConfig::default(),
            limits: LimitsMethod::Regression,
            heartseg: HeartSegConfig::default(),
            classifier: ClassifierConfig::default(),
            cyclegan: GanTrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Reduced networks sized for phantom volumes.
    pub fn desk() -> Self {
        Self {
            flag_dilation_slices: 1,
            heartseg: HeartSegConfig::desk(),
            classifier: ClassifierConfig::desk(),
            cyclegan: GanTrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Override every seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.heartseg.seed = seed;
        self.classifier.seed = seed;
        self.cyclegan.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.working_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::NonPositiveSpacing(self.working_spacing_mm));
        }
        let need = |flag: bool, p: &Option<PathBuf>, what: &str| -> Result<()> {
            match (flag, p) {
                (true, None) => Err(Error::Checkpoint(format!("{what} stage enabled without a checkpoint"))),
                (true, Some(p)) if !p.exists() => Err(Error::MissingFile(p.clone())),
                _ => Ok(()),
            }
        };
        need(self.use_heart_seg, &self.heartseg_checkpoint, "heart segmentation")?;
        need(self.use_slice_classifier, &self.classifier_checkpoint, "slice classification")?;
        need(true, &self.cyclegan_checkpoint, "decomposition")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Trained networks for the enabled stages.
pub struct Models {
    pub heartseg: Option<HeartSegModel>,
    pub classifier: Option<SliceClassifier>,
    pub cyclegan: CycleGan,
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let heartseg = match (cfg.use_heart_seg, &cfg.heartseg_checkpoint) {
            (true, Some(p)) => Some(HeartSegModel::load(p)?),
            _ => None,
        };
        let classifier = match (cfg.use_slice_classifier, &cfg.classifier_checkpoint) {
            (true, Some(p)) => Some(SliceClassifier::load(p)?),
            _ => None,
        };
        let gan_path = cfg.cyclegan_checkpoint.as_ref().expect("validated");
        Ok(Self {
            heartseg,
            classifier,
            cyclegan: CycleGan::load(gan_path)?,
        })
    }
}

/// Box of `side_mm` in-plane around the grid centre, spanning every slice.
pub fn standard_fov(grid: &Grid, side_mm: f64) -> BinaryMask {
    let [nx, ny, nz] = grid.dims;
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let hx = side_mm / 2.0 / grid.spacing[0];
    let hy = side_mm / 2.0 / grid.spacing[1];
    let mut data = Vec::with_capacity(grid.len());
    for _ in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push((x as f64 - cx).abs() < hx && (y as f64 - cy).abs() < hy);
            }
        }
    }
    BinaryMask { grid: *grid, data }
}

/// Intermediate and final products for one scan.
#[derive(Debug, Clone)]
pub struct ScanResult {
    /// Heart mask, or the standard field of view, on the input grid.
    pub region: BinaryMask,
    /// Slice count of the working grid.
    pub working_slices: usize,
    /// Working-grid slices that went through the classifier (or all).
    pub candidate_slices: Vec<usize>,
    /// Working-grid slices that were decomposed.
    pub processed_slices: Vec<usize>,
    /// Masked CAC map in HU on the input grid.
    pub map: Volume,
    pub proposed: ScoreRecord,
    pub baseline: ScoreRecord,
}

fn same_spacing(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0))
}

/// Heart mask from the segmentation model, or the standard field of view
/// covering one decomposition crop.
pub fn heart_region(heartseg: Option<&mut HeartSegModel>, cfg: &PipelineConfig, gan_side: usize, image: &Volume) -> Result<BinaryMask> {
    let region = match heartseg {
        Some(m) => match cfg.segmentation_stride {
            Some(s) => segment_heart_with_stride(m, image, s)?,
            None => segment_heart(m, image)?,
        },
        None => standard_fov(&image.grid, gan_side as f64 * cfg.working_spacing_mm[0]),
    };
    if region.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(region)
}

/// Image and region on the working grid.
pub fn working_view(cfg: &PipelineConfig, image: &Volume, region: &BinaryMask) -> Result<(Volume, BinaryMask)> {
    image.grid.check_same(&region.grid, "image vs region")?;
    let (work, work_region) = if same_spacing(image.grid.spacing, cfg.working_spacing_mm) {
        (image.clone(), region.clone())
    } else {
        let g = image.grid.respaced(cfg.working_spacing_mm)?;
        (resample_onto(image, &g, Interpolation::Linear), resample_mask(region, &g))
    };
    if work_region.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((work, work_region))
}

/// Candidates within `dilation` slices of a flagged one.
pub fn dilate_slices(candidates: &[usize], flagged: &[usize], dilation: usize) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&z| flagged.iter().any(|&f| f.abs_diff(z) <= dilation))
        .collect()
}

/// Working-grid slices touched by the region, and those the classifier
/// flags (all of them without a classifier), widened by `dilation` slices
/// within the region.
pub fn select_slices(
    classifier: Option<&mut SliceClassifier>,
    work: &Volume,
    work_region: &BinaryMask,
    window: HuWindow,
    dilation: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let candidates: Vec<usize> = (0..work.grid.dims[2]).filter(|&z| work_region.slice_has_foreground(z)).collect();
    let processed = match classifier {
        Some(c) => {
            let slices = heart_slices(work, work_region, c.config.crop_side, window)?;
            let flags = classify_slices(c, &slices)?;
            let flagged: Vec<usize> = slices.iter().zip(flags).filter(|(_, f)| *f).map(|(s, _)| s.slice_index).collect();
            dilate_slices(&candidates, &flagged, dilation)
        }
        None => candidates.clone(),
    };
    Ok((candidates, processed))
}

/// Decompose the given working-grid slices and assemble the masked CAC map
/// (HU) on the input grid, zero outside `region`.
pub fn decompose_slices(
    gan: &mut CycleGan,
    cfg: &PipelineConfig,
    image: &Volume,
    region: &BinaryMask,
    work: &Volume,
    work_region: &BinaryMask,
    slices: &[usize],
) -> Result<Volume> {
    let window = cfg.scoring.window;
    let side = gan.config.crop_side;
    let com = center_of_mass(work_region)?;
    let [nx, ny, nz] = work.grid.dims;
    let mut raw = Volume::filled(work.grid, 0.0);
    for &z in slices {
        if z >= nz {
            return Err(Error::OutOfRange(format!("slice {z} of {nz}")));
        }
        let s = normalize_slice(work, z, com, side, window)?;
        let (m, _) = gan.decompose(&s)?;
        let hu = m.attenuation_hu();
        for v in 0..side {
            for u in 0..side {
                let (x, y) = s.source_pixel(u, v);
                if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                    let h = hu[u + side * v];
                    raw.set(x as usize, y as usize, z, if h < cfg.map_floor_hu { 0.0 } else { h });
                }
            }
        }
    }
    let mut map = mask_cac_map(&raw, work, window, cfg.scoring.mask_floor_hu)?;
    if !work.grid.same_as(&image.grid) {
        map = resample_onto(&map, &image.grid, Interpolation::Linear);
    }
    for (m, &inside) in map.data.iter_mut().zip(&region.data) {
        if !inside {
            *m = 0.0;
        }
    }
    Ok(map)
}

/// Run every stage on one in-memory scan.
pub fn process_scan(models: &mut Models, cfg: &PipelineConfig, image: &Volume, labels: Option<&Volume>) -> Result<ScanResult> {
    let region = heart_region(models.heartseg.as_mut(), cfg, models.cyclegan.config.crop_side, image)?;
    let (work, work_region) = working_view(cfg, image, &region)?;
    let (candidate_slices, processed_slices) = select_slices(models.classifier.as_mut(), &work, &work_region, cfg.scoring.window, cfg.flag_dilation_slices)?;
    let map = decompose_slices(&mut models.cyclegan, cfg, image, &region, &work, &work_region, &processed_slices)?;
    let proposed = score_map(&map, Some(image), Some(&region), labels, &cfg.scoring)?;
    let baseline = score_clinical(image, Some(&region), labels, &cfg.scoring)?;
    Ok(ScanResult {
        region,
        working_slices: work.grid.dims[2],
        candidate_slices,
        processed_slices,
        map,
        proposed,
        baseline,
    })
}

/// One input scan of a cohort. Paths are relative to the cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortScan {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_flags: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_positive: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub scans: Vec<CohortScan>,
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
}

impl Cohort {
    /// Read a cohort file and make its paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut c: Cohort = serde_json::from_slice(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut c.scans {
            for p in [Some(&mut s.image), s.heart_mask.as_mut(), s.labels.as_mut(), s.truth_map.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        c.check()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.scans {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate scan id {}", s.id)));
            }
        }
        for [a, b] in &self.pairs {
            if !ids.contains(a.as_str()) || !ids.contains(b.as_str()) {
                return Err(Error::Dataset(format!("pair ({a}, {b}) names an unknown scan")));
            }
        }
        Ok(())
    }

    pub fn scan(&self, id: &str) -> Option<&CohortScan> {
        self.scans.iter().find(|s| s.id == id)
    }
}

/// Write `pairs` phantom scan pairs with truth under `dir` and return the
/// cohort (also saved as `dir/cohort.json`). Without a `base` spec each pair
/// gets random anatomy and lesions; with one, every pair reuses its anatomy
/// and lesions with fresh noise and motion. A lesion table goes to
/// `dir/lesions.csv`.
pub fn generate_phantom_cohort(
    dir: &Path,
    pairs: usize,
    base: Option<&PhantomSpec>,
    lesions: RangeInclusive<usize>,
    seed: u64,
) -> Result<Cohort> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cohort = Cohort::default();
    let mut table = String::from("lesion_id,pair,artery,true_mass,rendered_mass_s1,rendered_mass_s2\n");
    for i in 0..pairs {
        let spec_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let spec = match base {
            Some(b) => PhantomSpec {
                seed: spec_seed,
                ..b.clone()
            },
            None => PhantomSpec::random_desk(&mut rng, lesions.clone(), spec_seed),
        };
        let ((v1, t1), (v2, t2)) = generate_pair(&spec, spec.seed)?;
        for (l, a) in t1.lesion_arteries.iter().enumerate() {
            let _ = writeln!(
                table,
                "p{i:03}_l{},p{i:03},{a},{},{},{}",
                l + 1,
                t1.lesion_true_mass[l],
                t1.lesion_rendered_mass[l],
                t2.lesion_rendered_mass[l]
            );
        }
        let mut ids = [String::new(), String::new()];
        for (k, (v, t)) in [(v1, t1), (v2, t2)].into_iter().enumerate() {
            let id = format!("p{i:03}_s{}", k + 1);
            let rel = |what: &str| PathBuf::from(format!("{id}_{what}.json"));
            write_volume(&dir.join(rel("image")), &v, Dtype::Int16)?;
            write_mask(&dir.join(rel("heart")), &t.heart_mask)?;
            write_volume(&dir.join(rel("labels")), &t.label_volume(), Dtype::Int16)?;
            write_volume(&dir.join(rel("truth")), &t.cac_map, Dtype::Float32)?;
            cohort.scans.push(CohortScan {
                id: id.clone(),
                image: rel("image"),
                heart_mask: Some(rel("heart")),
                labels: Some(rel("labels")),
                truth_map: Some(rel("truth")),
                slice_flags: Some(t.slice_flags.clone()),
                true_mass: Some(t.total_true_mass()),
                reference_positive: Some(t.total_true_mass() > 0.0),
            });
            ids[k] = id;
        }
        cohort.pairs.push(ids);
    }
    write_file(&dir.join("lesions.csv"), table.as_bytes())?;
    cohort.save(&dir.join("cohort.json"))?;
    Cohort::load(&dir.join("cohort.json"))
}

/// Images paired with their heart masks, for heart segmentation training.
pub fn load_segmentation_set(cohort: &Cohort) -> Result<Vec<(Volume, BinaryMask)>> {
    cohort
        .scans
        .iter()
        .map(|s| {
            let mask = s.heart_mask.as_ref().ok_or_else(|| Error::Dataset(format!("scan {} has no heart mask", s.id)))?;
            Ok((read_volume(&s.image)?, read_mask(mask)?))
        })
        .collect()
}

/// Images, heart masks and per-slice flags.
pub fn load_flagged_set(cohort: &Cohort) -> Result<Vec<(Volume, BinaryMask, Vec<bool>)>> {
    cohort
        .scans
        .iter()
        .map(|s| {
            let mask = s.heart_mask.as_ref().ok_or_else(|| Error::Dataset(format!("scan {} has no heart mask", s.id)))?;
            let flags = s.slice_flags.clone().ok_or_else(|| Error::Dataset(format!("scan {} has no slice flags", s.id)))?;
            Ok((read_volume(&s.image)?, read_mask(mask)?, flags))
        })
        .collect()
}

/// Per-slice flags carried over to another grid's slices by nearest position.
pub fn flags_on_grid(flags: &[bool], from: &Grid, to: &Grid) -> Vec<bool> {
    if from.same_as(to) {
        return flags.to_vec();
    }
    (0..to.dims[2])
        .map(|z| {
            let mm = to.origin[2] + z as f64 * to.spacing[2];
            let k = ((mm - from.origin[2]) / from.spacing[2]).round();
            k >= 0.0 && (k as usize) < flags.len() && flags[k as usize]
        })
        .collect()
}

/// Flagged scans resampled to the working grid.
fn working_flagged_set(cohort: &Cohort, cfg: &PipelineConfig) -> Result<Vec<(Volume, BinaryMask, Vec<bool>)>> {
    load_flagged_set(cohort)?
        .into_iter()
        .map(|(v, m, f)| {
            let (w, wm) = working_view(cfg, &v, &m)?;
            let wf = flags_on_grid(&f, &v.grid, &w.grid);
            Ok((w, wm, wf))
        })
        .collect()
}

pub fn train_heartseg_on(cohort: &Cohort, cfg: &PipelineConfig) -> Result<HeartSegModel> {
    train_heartseg(&load_segmentation_set(cohort)?, cfg.heartseg.clone())
}

pub fn train_classifier_on(cohort: &Cohort, cfg: &PipelineConfig) -> Result<SliceClassifier> {
    let c = &cfg.classifier;
    let mut slices = Vec::new();
    for (v, m, f) in working_flagged_set(cohort, cfg)? {
        for s in heart_slices(&v, &m, c.crop_side, c.window)? {
            let flag = f[s.slice_index];
            slices.push((s, flag));
        }
    }
    train_classifier(&slices, c.clone())
}

/// Train the decomposition networks; intermediate checkpoints go to
/// `checkpoint_dir` when given.
pub fn train_cyclegan_on(cohort: &Cohort, cfg: &PipelineConfig, checkpoint_dir: Option<&Path>) -> Result<CycleGan> {
    let mut slices: Vec<GanSlice> = Vec::new();
    for (v, m, f) in working_flagged_set(cohort, cfg)? {
        slices.extend(gan_slices(&v, &m, &f)?);
    }
    train_cyclegan_with_checkpoints(&slices, cfg.cyclegan.clone(), checkpoint_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub id: String,
    pub image: PathBuf,
    pub region: PathBuf,
    pub map: PathBuf,
    pub scores: PathBuf,
    pub working_slices: usize,
    pub candidate_slices: Vec<usize>,
    pub processed_slices: Vec<usize>,
    pub proposed: ScoreRecord,
    pub baseline: ScoreRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_positive: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanError {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Checkpoint file name to SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub use_heart_seg: bool,
    pub use_slice_classifier: bool,
    pub limits: LimitsMethod,
    pub scans: Vec<ScanEntry>,
    pub errors: Vec<ScanError>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn entry(&self, id: &str) -> Option<&ScanEntry> {
        self.scans.iter().find(|s| s.id == id)
    }

    /// Check that every listed output exists and parses.
    pub fn verify(&self) -> Result<()> {
        for s in &self.scans {
            read_mask(&s.region)?;
            read_volume(&s.map)?;
            let text = fs::read(&s.scores).map_err(|e| Error::io(&s.scores, e))?;
            let _: serde_json::Value = serde_json::from_slice(&text)?;
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    id: &'a str,
    proposed: &'a ScoreRecord,
    baseline: &'a ScoreRecord,
}

/// Process every scan of a cohort, writing outputs under `out_dir`. A failing
/// scan is recorded in the error ledger and skipped.
pub fn run_pipeline(cfg: &PipelineConfig, cohort: &Cohort, out_dir: &Path) -> Result<RunManifest> {
    let mut models = Models::load(cfg)?;
    run_with_models(&mut models, cfg, cohort, out_dir)
}

pub fn run_with_models(models: &mut Models, cfg: &PipelineConfig, cohort: &Cohort, out_dir: &Path) -> Result<RunManifest> {
    let started = unix_now();
    let mut checkpoints = BTreeMap::new();
    for p in [&cfg.heartseg_checkpoint, &cfg.classifier_checkpoint, &cfg.cyclegan_checkpoint].into_iter().flatten() {
        if p.exists() {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            checkpoints.insert(name, file_hash(p)?);
        }
    }
    let mut scans = Vec::new();
    let mut errors = Vec::new();
    for s in &cohort.scans {
        match run_one(models, cfg, s, out_dir) {
            Ok(e) => scans.push(e),
            Err(e) => {
                log::warn!("scan {} failed: {e}", s.id);
                errors.push(ScanError {
                    id: s.id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        checkpoints,
        use_heart_seg: cfg.use_heart_seg,
        use_slice_classifier: cfg.use_slice_classifier,
        limits: cfg.limits,
        scans,
        errors,
        started_unix: started,
        finished_unix: unix_now(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn run_one(models: &mut Models, cfg: &PipelineConfig, s: &CohortScan, out_dir: &Path) -> Result<ScanEntry> {
    let image = read_volume(&s.image)?;
    let labels = s.labels.as_ref().map(|p| read_volume(p)).transpose()?;
    let r = process_scan(models, cfg, &image, labels.as_ref())?;
    let region = out_dir.join(format!("{}_region.json", s.id));
    let map = out_dir.join(format!("{}_map.json", s.id));
    let scores = out_dir.join(format!("{}_scores.json", s.id));
    write_mask(&region, &r.region)?;
    write_volume(&map, &r.map, Dtype::Float32)?;
    let file = ScoreFile {
        id: &s.id,
        proposed: &r.proposed,
        baseline: &r.baseline,
    };
    write_file(&scores, &serde_json::to_vec_pretty(&file)?)?;
    log::info!(
        "{}: {} of {} slices decomposed, pseudo-mass {:.1} (baseline {:.1})",
        s.id,
        r.processed_slices.len(),
        r.candidate_slices.len(),
        r.proposed.pseudo_mass,
        r.baseline.pseudo_mass
    );
    Ok(ScanEntry {
        id: s.id.clone(),
        image: s.image.clone(),
        region,
        map,
        scores,
        working_slices: r.working_slices,
        candidate_slices: r.candidate_slices,
        processed_slices: r.processed_slices,
        proposed: r.proposed,
        baseline: r.baseline,
        reference_positive: s.reference_positive,
    })
}

/// A statistic for the proposed method next to the 130 HU baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compared<T> {
    pub proposed: T,
    pub baseline: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `truth` when every scan carries a reference label, otherwise `baseline`.
    pub reference: String,
    pub scans: usize,
    pub metrics: Compared<DetectionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub pseudo_mass: Compared<AgreementStats>,
    /// Scaled adjusted score for the proposed method, conventional for the
    /// baseline.
    pub agatston: Compared<AgreementStats>,
    /// Multiplier mapping the proposed adjusted Agatston mean onto the
    /// baseline conventional mean before binning.
    pub agatston_scale: f64,
    pub risk_kappa: Compared<Option<Interval>>,
    /// Interscan category agreement tables, row = first scan.
    pub risk_table: Compared<[[usize; 4]; 4]>,
    pub bland_altman_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub use_heart_seg: bool,
    pub use_slice_classifier: bool,
    pub failed_scans: usize,
    pub detection: Option<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducibility: Option<Reproducibility>,
}

fn categories(scores: &[f64], scale: f64) -> Result<Vec<usize>> {
    scores.iter().map(|&s| risk_category(s * scale).map(RiskCategory::index)).collect()
}

fn table(a: &[usize], b: &[usize]) -> [[usize; 4]; 4] {
    let mut t = [[0; 4]; 4];
    for (&i, &j) in a.iter().zip(b) {
        t[i][j] += 1;
    }
    t
}

fn usable_pairs<'a>(manifest: &'a RunManifest, pairs: &[[String; 2]]) -> Vec<(&'a ScanEntry, &'a ScanEntry)> {
    pairs
        .iter()
        .filter_map(|[a, b]| Some((manifest.entry(a)?, manifest.entry(b)?)))
        .collect()
}

/// Factor mapping the mean proposed adjusted Agatston score onto the mean
/// baseline conventional score over all scans of the pairs.
fn agatston_scale(usable: &[(&ScanEntry, &ScanEntry)]) -> f64 {
    let scans = || usable.iter().flat_map(|(a, b)| [*a, *b]);
    let adj: Vec<f64> = scans().map(|s| s.proposed.adjusted_agatston).collect();
    let conv: Vec<f64> = scans().map(|s| s.baseline.conventional_agatston).collect();
    match (mean(&adj), mean(&conv)) {
        (Some(a), Some(c)) if a > 0.0 => c / a,
        _ => 1.0,
    }
}

/// Paired scores of a run as a pair table: pseudo-mass and Agatston for both
/// methods, the proposed Agatston scaled as in the report.
pub fn pair_rows(manifest: &RunManifest, pairs: &[[String; 2]]) -> Result<Vec<PairRow>> {
    let usable = usable_pairs(manifest, pairs);
    let scale = agatston_scale(&usable);
    let kinds: [(&str, Box<dyn Fn(&ScanEntry) -> f64>, bool); 4] = [
        ("pseudo_mass_proposed", Box::new(|s| s.proposed.pseudo_mass), false),
        ("pseudo_mass_baseline", Box::new(|s| s.baseline.pseudo_mass), false),
        ("agatston_proposed", Box::new(move |s| s.proposed.adjusted_agatston * scale), true),
        ("agatston_baseline", Box::new(|s| s.baseline.conventional_agatston), true),
    ];
    let mut rows = Vec::new();
    for (name, f, with_cat) in &kinds {
        for (a, b) in &usable {
            let (x, y) = (f(a), f(b));
            let cat = |v: f64| -> Result<Option<String>> {
                Ok(if *with_cat { Some(risk_category(v)?.to_string()) } else { None })
            };
            rows.push(PairRow {
                subject: format!("{}+{}", a.id, b.id),
                score_type: name.to_string(),
                scan1: x,
                scan2: y,
                category1: cat(x)?,
                category2: cat(y)?,
            });
        }
    }
    Ok(rows)
}

/// Build the report from a manifest. Bland-Altman tables and plots go to
/// `out_dir` when given. Output is a pure function of the inputs.
pub fn report(manifest: &RunManifest, pairs: &[[String; 2]], out_dir: Option<&Path>) -> Result<Report> {
    let failed: BTreeSet<&str> = manifest.errors.iter().map(|e| e.id.as_str()).collect();
    for [a, b] in pairs {
        for id in [a, b] {
            if manifest.entry(id).is_none() && !failed.contains(id.as_str()) {
                return Err(Error::Dataset(format!("pair names scan {id}, which is not in the manifest")));
            }
        }
    }
    let detection = if manifest.scans.is_empty() {
        None
    } else {
        let with_truth = manifest.scans.iter().all(|s| s.reference_positive.is_some());
        let truth: Vec<bool> = manifest
            .scans
            .iter()
            .map(|s| if with_truth { s.reference_positive.unwrap_or(false) } else { s.baseline.is_positive() })
            .collect();
        let p: Vec<bool> = manifest.scans.iter().map(|s| s.proposed.is_positive()).collect();
        let b: Vec<bool> = manifest.scans.iter().map(|s| s.baseline.is_positive()).collect();
        Some(Detection {
            reference: if with_truth { "truth" } else { "baseline" }.into(),
            scans: truth.len(),
            metrics: Compared {
                proposed: detection_metrics(&truth, &p)?,
                baseline: detection_metrics(&truth, &b)?,
            },
        })
    };
    let usable = usable_pairs(manifest, pairs);
    let reproducibility = if usable.is_empty() {
        None
    } else {
        let col = |f: &dyn Fn(&ScanEntry) -> f64, second: bool| -> Vec<f64> {
            usable.iter().map(|(a, b)| f(if second { b } else { a })).collect()
        };
        let (pm_p, ba_pm_p) = agreement(&col(&|s| s.proposed.pseudo_mass, false), &col(&|s| s.proposed.pseudo_mass, true), manifest.limits)?;
        let (pm_b, ba_pm_b) = agreement(&col(&|s| s.baseline.pseudo_mass, false), &col(&|s| s.baseline.pseudo_mass, true), manifest.limits)?;
        let adj1 = col(&|s| s.proposed.adjusted_agatston, false);
        let adj2 = col(&|s| s.proposed.adjusted_agatston, true);
        let conv1 = col(&|s| s.baseline.conventional_agatston, false);
        let conv2 = col(&|s| s.baseline.conventional_agatston, true);
        let scale = agatston_scale(&usable);
        let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<f64>>();
        let (ag_p, ba_ag_p) = agreement(&scaled(&adj1), &scaled(&adj2), manifest.limits)?;
        let (ag_b, ba_ag_b) = agreement(&conv1, &conv2, manifest.limits)?;
        let (cp1, cp2) = (categories(&adj1, scale)?, categories(&adj2, scale)?);
        let (cb1, cb2) = (categories(&conv1, 1.0)?, categories(&conv2, 1.0)?);
        let mut files = Vec::new();
        if let Some(dir) = out_dir {
            for (name, ba) in [
                ("pseudo_mass_proposed", &ba_pm_p),
                ("pseudo_mass_baseline", &ba_pm_b),
                ("agatston_proposed", &ba_ag_p),
                ("agatston_baseline", &ba_ag_b),
            ] {
                if let Some(ba) = ba {
                    let csv = format!("bland_altman_{name}.csv");
                    let png = format!("bland_altman_{name}.png");
                    write_file(&dir.join(&csv), ba.to_csv().as_bytes())?;
                    ba.save_png(&dir.join(&png))?;
                    files.push(csv);
                    files.push(png);
                }
            }
        }
        Some(Reproducibility {
            pairs: usable.len(),
            skipped_pairs: pairs.len() - usable.len(),
            pseudo_mass: Compared {
                proposed: pm_p,
                baseline: pm_b,
            },
            agatston: Compared {
                proposed: ag_p,
                baseline: ag_b,
            },
            agatston_scale: scale,
            risk_kappa: Compared {
                proposed: weighted_kappa(&cp1, &cp2, 4).ok(),
                baseline: weighted_kappa(&cb1, &cb2, 4).ok(),
            },
            risk_table: Compared {
                proposed: table(&cp1, &cp2),
                baseline: table(&cb1, &cb2),
            },
            bland_altman_files: files,
        })
    };
    Ok(Report {
        config_hash: manifest.config_hash.clone(),
        use_heart_seg: manifest.use_heart_seg,
        use_slice_classifier: manifest.use_slice_classifier,
        failed_scans: manifest.errors.len(),
        detection,
        reproducibility,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn interval(x: &Option<Interval>) -> String {
    x.as_ref().map_or("n/a".into(), |i| format!("{:.3} [{:.3}, {:.3}]", i.estimate, i.lower, i.upper))
}

impl Report {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "heart segmentation: {}  slice classification: {}  failed scans: {}",
            if self.use_heart_seg { "on" } else { "off" },
            if self.use_slice_classifier { "on" } else { "off" },
            self.failed_scans
        );
        if let Some(d) = &self.detection {
            let _ = writeln!(s, "\ndetection ({} scans, reference: {})", d.scans, d.reference);
            let _ = writeln!(s, "{:<14}{:>12}{:>12}", "", "proposed", "baseline");
            let rows: [(&str, fn(&DetectionMetrics) -> Option<f64>); 4] = [
                ("accuracy", |m| m.accuracy),
                ("sensitivity", |m| m.sensitivity),
                ("fpr", |m| m.fpr),
                ("f1", |m| m.f1),
            ];
            for (name, f) in rows {
                let _ = writeln!(s, "{:<14}{:>12}{:>12}", name, opt(f(&d.metrics.proposed)), opt(f(&d.metrics.baseline)));
            }
        }
        if let Some(r) = &self.reproducibility {
            let _ = writeln!(s, "\nreproducibility ({} pairs, {} skipped)", r.pairs, r.skipped_pairs);
            for (name, c) in [("pseudo-mass", &r.pseudo_mass), ("agatston", &r.agatston)] {
                let _ = writeln!(s, "{name}");
                for (method, a) in [("proposed", &c.proposed), ("baseline", &c.baseline)] {
                    let _ = writeln!(
                        s,
                        "  {method:<9} dR all mean {} median {}  positive median {} ({} pairs)  ICC {}  BA coverage {}",
                        opt(a.mean_abs_rel_diff_all),
                        opt(a.median_abs_rel_diff_all),
                        opt(a.median_abs_rel_diff_positive),
                        a.concordant_positive_pairs,
                        interval(&a.icc),
                        opt(a.bland_altman_coverage)
                    );
                }
            }
            let _ = writeln!(s, "risk categories (adjusted scale factor {:.4})", r.agatston_scale);
            let _ = writeln!(s, "  proposed  kappa {}", interval(&r.risk_kappa.proposed));
            let _ = writeln!(s, "  baseline  kappa {}", interval(&r.risk_kappa.baseline));
            for f in &r.bland_altman_files {
                let _ = writeln!(s, "  {f}");
            }
        }
        s
    }

    /// Write `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.json"), &self.to_json()?)?;
        write_file(&dir.join("report.txt"), self.to_text().as_bytes())
    }
}

/// Comparison of one processed scan with its cohort truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEvaluation {
    pub id: String,
    pub true_mass: Option<f64>,
    pub proposed_mass: f64,
    pub baseline_mass: f64,
    pub heart_dice: Option<f64>,
    pub slice_metrics: Option<DetectionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scans: Vec<ScanEvaluation>,
    pub mean_heart_dice: Option<f64>,
    /// Pooled over every scan with slice flags.
    pub slice_metrics: Option<DetectionMetrics>,
    /// Median of |score - truth| / truth over scans with positive truth.
    pub median_mass_error: Compared<Option<f64>>,
}

/// Check a run against the cohort's truth: heart overlap (when the heart was
/// segmented), slice flags (when slices were classified) and mass error.
pub fn evaluate(manifest: &RunManifest, cohort: &Cohort) -> Result<Evaluation> {
    let mut scans = Vec::new();
    let (mut all_truth, mut all_pred) = (Vec::new(), Vec::new());
    for e in &manifest.scans {
        let c = cohort
            .scan(&e.id)
            .ok_or_else(|| Error::Dataset(format!("scan {} is not in the cohort", e.id)))?;
        let heart_dice = match (&c.heart_mask, manifest.use_heart_seg) {
            (Some(p), true) => Some(seg_metrics(&read_mask(&e.region)?, &read_mask(p)?)?.dice),
            _ => None,
        };
        let slice_metrics = match (&c.slice_flags, manifest.use_slice_classifier) {
            (Some(f), true) if f.len() == e.working_slices => {
                let processed: BTreeSet<usize> = e.processed_slices.iter().copied().collect();
                let truth: Vec<bool> = e.candidate_slices.iter().map(|&z| f[z]).collect();
                let pred: Vec<bool> = e.candidate_slices.iter().map(|z| processed.contains(z)).collect();
                all_truth.extend(&truth);
                all_pred.extend(&pred);
                Some(detection_metrics(&truth, &pred)?)
            }
            _ => None,
        };
        scans.push(ScanEvaluation {
            id: e.id.clone(),
            true_mass: c.true_mass,
            proposed_mass: e.proposed.pseudo_mass,
            baseline_mass: e.baseline.pseudo_mass,
            heart_dice,
            slice_metrics,
        });
    }
    let dice: Vec<f64> = scans.iter().filter_map(|s| s.heart_dice).collect();
    let err = |f: fn(&ScanEvaluation) -> f64| -> Option<f64> {
        let v: Vec<f64> = scans
            .iter()
            .filter_map(|s| s.true_mass.filter(|&t| t > 0.0).map(|t| (f(s) - t).abs() / t))
            .collect();
        median(&v)
    };
    Ok(Evaluation {
        mean_heart_dice: mean(&dice),
        slice_metrics: if all_truth.is_empty() { None } else { Some(detection_metrics(&all_truth, &all_pred)?) },
        median_mass_error: Compared {
            proposed: err(|s| s.proposed_mass),
            baseline: err(|s| s.baseline_mass),
        },
        scans,
    })
}
