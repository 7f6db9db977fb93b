//! Calcium quantification: CAC-map noise masking, lesion extraction,
//! pseudo-mass, adjusted and conventional Agatston scores and risk
//! categories.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{label_components, Connectivity};
use crate::phantom::Artery;
use crate::volume::{BinaryMask, Grid, HuWindow, Volume};

/// Clinical calcium threshold.
pub const CLINICAL_THRESHOLD_HU: f64 = 130.0;

/// One axial cross-section of a lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub z: usize,
    pub area_mm2: f64,
    pub max_hu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub voxels: Vec<usize>,
    /// Attenuation per voxel in HU, parallel to `voxels`.
    pub attenuation: Vec<f64>,
    pub artery: Option<Artery>,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSet {
    pub grid: Grid,
    pub lesions: Vec<Lesion>,
}

impl LesionSet {
    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            lesions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    /// Lesion set restricted to one artery.
    pub fn for_artery(&self, artery: Artery) -> LesionSet {
        LesionSet {
            grid: self.grid,
            lesions: self.lesions.iter().filter(|l| l.artery == Some(artery)).cloned().collect(),
        }
    }

    /// Foreground mask of all lesion voxels.
    pub fn mask(&self) -> BinaryMask {
        let mut m = BinaryMask::empty(self.grid);
        for l in &self.lesions {
            for &i in &l.voxels {
                m.data[i] = true;
            }
        }
        m
    }
}

impl Lesion {
    /// Build a lesion from voxel indices and their attenuation, deriving the
    /// per-slice areas and maxima.
    pub fn new(grid: &Grid, voxels: Vec<usize>, attenuation: Vec<f64>, artery: Option<Artery>) -> Self {
        let mut per_slice: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for (&i, &a) in voxels.iter().zip(&attenuation) {
            let z = grid.coords(i)[2];
            let e = per_slice.entry(z).or_insert((0, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.max(a);
        }
        let area = grid.pixel_area();
        let sections = per_slice
            .into_iter()
            .map(|(z, (n, max_hu))| Section {
                z,
                area_mm2: n as f64 * area,
                max_hu,
            })
            .collect();
        Self {
            voxels,
            attenuation,
            artery,
            sections,
        }
    }
}

/// Zero map voxels whose synthetic noCAC value (windowed input minus map)
/// falls below `floor_hu`.
pub fn mask_cac_map(map_hu: &Volume, input_hu: &Volume, window: HuWindow, floor_hu: f64) -> Result<Volume> {
    map_hu.grid.check_same(&input_hu.grid, "CAC map vs input")?;
    let data = map_hu
        .data
        .iter()
        .zip(&input_hu.data)
        .map(|(&m, &x)| {
            let synthetic = x.clamp(window.lo, window.hi) - m;
            if synthetic < floor_hu {
                0.0
            } else {
                m
            }
        })
        .collect();
    Volume::new(map_hu.grid, data)
}

fn majority_artery(voxels: &[usize], labels: &[u8]) -> Option<Artery> {
    let mut counts = [0usize; 4];
    for &i in voxels {
        let l = labels[i] as usize;
        if (1..=3).contains(&l) {
            counts[l] += 1;
        }
    }
    let (best, &n) = counts.iter().enumerate().skip(1).max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if n == 0 {
        None
    } else {
        Artery::from_label(best as u8)
    }
}

/// Group foreground voxels into connected lesions. `attenuation` supplies
/// the HU value recorded for every voxel; components smaller than
/// `min_voxels` are dropped.
pub fn extract_lesions(
    attenuation: &Volume,
    foreground: &[bool],
    connectivity: Connectivity,
    min_voxels: usize,
    labels: Option<&Volume>,
) -> Result<LesionSet> {
    let grid = attenuation.grid;
    if foreground.len() != grid.len() {
        return Err(Error::GridMismatch("foreground length".into()));
    }
    let label_bytes: Option<Vec<u8>> = match labels {
        Some(l) => {
            l.grid.check_same(&grid, "artery labels")?;
            Some(l.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect())
        }
        None => None,
    };
    let (comp, n) = label_components(foreground, grid.dims, connectivity);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, &c) in comp.iter().enumerate() {
        if c > 0 {
            members[c as usize].push(i);
        }
    }
    let lesions = members
        .into_iter()
        .skip(1)
        .filter(|m| m.len() >= min_voxels.max(1))
        .map(|voxels| {
            let att = voxels.iter().map(|&i| attenuation.data[i]).collect();
            let artery = label_bytes.as_deref().and_then(|lb| majority_artery(&voxels, lb));
            Lesion::new(&grid, voxels, att, artery)
        })
        .collect();
    Ok(LesionSet { grid, lesions })
}

/// Lesions of a CAC map: every voxel with positive attenuation.
pub fn lesions_from_map(map_hu: &Volume, connectivity: Connectivity, min_voxels: usize, labels: Option<&Volume>) -> Result<LesionSet> {
    let fg: Vec<bool> = map_hu.data.iter().map(|&v| v > 0.0).collect();
    extract_lesions(map_hu, &fg, connectivity, min_voxels, labels)
}

/// Clinical lesions: voxels at or above `threshold_hu`, optionally restricted
/// to a region of interest.
pub fn lesions_from_threshold(
    image: &Volume,
    region: Option<&BinaryMask>,
    threshold_hu: f64,
    connectivity: Connectivity,
    min_voxels: usize,
    labels: Option<&Volume>,
) -> Result<LesionSet> {
    if let Some(r) = region {
        r.grid.check_same(&image.grid, "region mask")?;
    }
    let fg: Vec<bool> = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v >= threshold_hu && region.is_none_or(|r| r.data[i]))
        .collect();
    extract_lesions(image, &fg, connectivity, min_voxels, labels)
}

/// Sum of lesion attenuation times the voxel volume (HU mm^3).
pub fn pseudo_mass(lesions: &LesionSet, voxel_volume: f64) -> f64 {
    lesions.lesions.iter().flat_map(|l| l.attenuation.iter()).sum::<f64>() * voxel_volume
}

/// Density weight for threshold-free lesions: 1 below 200 HU, then one step
/// per 100 HU up to 4 at 400 HU and above.
pub fn adjusted_weight(max_hu: f64) -> u32 {
    if max_hu < 200.0 {
        1
    } else if max_hu < 300.0 {
        2
    } else if max_hu < 400.0 {
        3
    } else {
        4
    }
}

/// Clinical density weight: 0 below 130 HU, 1 up to 200 HU, then as
/// [`adjusted_weight`].
pub fn conventional_weight(max_hu: f64) -> u32 {
    if max_hu < CLINICAL_THRESHOLD_HU {
        0
    } else {
        adjusted_weight(max_hu)
    }
}

fn agatston_with(lesions: &LesionSet, weight: fn(f64) -> u32) -> f64 {
    lesions
        .lesions
        .iter()
        .flat_map(|l| l.sections.iter())
        .map(|s| s.area_mm2 * weight(s.max_hu) as f64)
        .sum()
}

pub fn adjusted_agatston(lesions: &LesionSet) -> f64 {
    agatston_with(lesions, adjusted_weight)
}

pub fn conventional_agatston(lesions: &LesionSet) -> f64 {
    agatston_with(lesions, conventional_weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskCategory {
    I,
    II,
    III,
    IV,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 4] = [RiskCategory::I, RiskCategory::II, RiskCategory::III, RiskCategory::IV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RiskCategory::I => "I",
            RiskCategory::II => "II",
            RiskCategory::III => "III",
            RiskCategory::IV => "IV",
        };
        f.write_str(s)
    }
}

/// I: 0-10, II: 11-100, III: 101-400 (exclusive), IV: 400 and above.
pub fn risk_category(agatston: f64) -> Result<RiskCategory> {
    if !(agatston >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative Agatston score {agatston}")));
    }
    Ok(if agatston <= 10.0 {
        RiskCategory::I
    } else if agatston <= 100.0 {
        RiskCategory::II
    } else if agatston < 400.0 {
        RiskCategory::III
    } else {
        RiskCategory::IV
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArteryScore {
    pub pseudo_mass: f64,
    pub adjusted_agatston: f64,
    pub conventional_agatston: f64,
    pub lesions: usize,
}

/// Scores of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pseudo_mass: f64,
    pub adjusted_agatston: f64,
    pub conventional_agatston: f64,
    pub risk_category: RiskCategory,
    pub arteries: BTreeMap<Artery, ArteryScore>,
}

impl ScoreRecord {
    pub fn zero() -> Self {
        Self {
            pseudo_mass: 0.0,
            adjusted_agatston: 0.0,
            conventional_agatston: 0.0,
            risk_category: RiskCategory::I,
            arteries: BTreeMap::new(),
        }
    }

    pub fn is_positive(&self) -> bool {
        self.pseudo_mass > 0.0
    }
}

/// Where lesion attenuation for the map path comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassSource {
    /// Attenuation attributed to calcium by the CAC map.
    Map,
    /// Raw image HU at the map's lesion voxels.
    RawImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub window: HuWindow,
    /// Map voxels leaving a synthetic value below this are noise.
    pub mask_floor_hu: f64,
    pub connectivity: Connectivity,
    pub min_voxels_map: usize,
    pub min_voxels_clinical: usize,
    pub clinical_threshold_hu: f64,
    pub mass_source: MassSource,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            window: HuWindow::default(),
            mask_floor_hu: -10.0,
            connectivity: Connectivity::TwentySix,
            min_voxels_map: 1,
            min_voxels_clinical: 3,
            clinical_threshold_hu: CLINICAL_THRESHOLD_HU,
            mass_source: MassSource::Map,
        }
    }
}

fn per_artery(adjusted_set: &LesionSet, conventional_set: &LesionSet, vv: f64) -> BTreeMap<Artery, ArteryScore> {
    Artery::ALL
        .iter()
        .map(|&a| {
            let adj = adjusted_set.for_artery(a);
            let conv = conventional_set.for_artery(a);
            (
                a,
                ArteryScore {
                    pseudo_mass: pseudo_mass(&adj, vv),
                    adjusted_agatston: adjusted_agatston(&adj),
                    conventional_agatston: conventional_agatston(&conv),
                    lesions: adj.len(),
                },
            )
        })
        .collect()
}

/// Score a (masked, original-resolution) CAC map. The conventional score
/// comes from thresholding `image` when it is given.
pub fn score_map(
    map_hu: &Volume,
    image: Option<&Volume>,
    region: Option<&BinaryMask>,
    labels: Option<&Volume>,
    cfg: &ScoringConfig,
) -> Result<ScoreRecord> {
    let mut lesions = lesions_from_map(map_hu, cfg.connectivity, cfg.min_voxels_map, labels)?;
    if cfg.mass_source == MassSource::RawImage {
        let img = image.ok_or_else(|| Error::InvalidArgument("raw-image mass source needs the image".into()))?;
        img.grid.check_same(&map_hu.grid, "map vs image")?;
        let grid = lesions.grid;
        for l in &mut lesions.lesions {
            let att = l.voxels.iter().map(|&i| img.data[i]).collect();
            *l = Lesion::new(&grid, std::mem::take(&mut l.voxels), att, l.artery);
        }
    }
    let clinical = match image {
        Some(img) => lesions_from_threshold(img, region, cfg.clinical_threshold_hu, cfg.connectivity, cfg.min_voxels_clinical, labels)?,
        None => lesions.clone(),
    };
    let vv = map_hu.grid.voxel_volume();
    let adjusted = adjusted_agatston(&lesions);
    Ok(ScoreRecord {
        pseudo_mass: pseudo_mass(&lesions, vv),
        adjusted_agatston: adjusted,
        conventional_agatston: conventional_agatston(&clinical),
        risk_category: risk_category(adjusted)?,
        arteries: if labels.is_some() { per_artery(&lesions, &clinical, vv) } else { BTreeMap::new() },
    })
}

/// Clinical 130 HU baseline: threshold, group, and score with raw HU.
pub fn score_clinical(image: &Volume, region: Option<&BinaryMask>, labels: Option<&Volume>, cfg: &ScoringConfig) -> Result<ScoreRecord> {
    let lesions = lesions_from_threshold(image, region, cfg.clinical_threshold_hu, cfg.connectivity, cfg.min_voxels_clinical, labels)?;
    let vv = image.grid.voxel_volume();
    let conventional = conventional_agatston(&lesions);
    Ok(ScoreRecord {
        pseudo_mass: pseudo_mass(&lesions, vv),
        adjusted_agatston: adjusted_agatston(&lesions),
        conventional_agatston: conventional,
        risk_category: risk_category(conventional)?,
        arteries: if labels.is_some() { per_artery(&lesions, &lesions, vv) } else { BTreeMap::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3], s: [f64; 3]) -> Grid {
        Grid::new(d, s, [0.0; 3]).unwrap()
    }

    #[test]
    fn masking_rule() {
        let g = grid([3, 1, 1], [1.0; 3]);
        let input = Volume::new(g, vec![100.0, 400.0, 40.0]).unwrap();
        let map = Volume::new(g, vec![150.0, 150.0, 0.0]).unwrap();
        let m = mask_cac_map(&map, &input, HuWindow::default(), -10.0).unwrap();
        assert_eq!(m.data, vec![0.0, 150.0, 0.0]);
        let zero = Volume::filled(g, 0.0);
        assert_eq!(mask_cac_map(&zero, &input, HuWindow::default(), -10.0).unwrap(), zero);
        let other = Volume::filled(grid([2, 1, 1], [1.0; 3]), 0.0);
        assert!(mask_cac_map(&other, &input, HuWindow::default(), -10.0).is_err());
    }

    #[test]
    fn two_separated_cubes_make_two_lesions() {
        let g = grid([8, 3, 3], [1.0; 3]);
        let mut v = Volume::filled(g, 0.0);
        for z in 0..2 {
            for y in 0..2 {
                v.set(0, y, z, 300.0);
                v.set(1, y, z, 300.0);
                v.set(5, y, z, 300.0);
                v.set(6, y, z, 300.0);
            }
        }
        let s = lesions_from_map(&v, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(s.len(), 2);
        assert!(lesions_from_map(&Volume::filled(g, 0.0), Connectivity::TwentySix, 1, None).unwrap().is_empty());
    }

    #[test]
    fn pseudo_mass_hand_value() {
        let g = grid([3, 1, 1], [1.0, 1.0, 1.5]);
        let v = Volume::new(g, vec![200.0; 3]).unwrap();
        let s = lesions_from_map(&v, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(pseudo_mass(&s, g.voxel_volume()), 900.0);
        assert_eq!(pseudo_mass(&LesionSet::empty(g), 1.5), 0.0);
    }

    #[test]
    fn agatston_hand_values() {
        // 12 voxels of 1 mm^2 in one slice, max 350 HU
        let g = grid([4, 3, 2], [1.0, 1.0, 3.0]);
        let mut v = Volume::filled(g, 0.0);
        for y in 0..3 {
            for x in 0..4 {
                v.set(x, y, 0, 250.0);
            }
        }
        v.set(2, 1, 0, 350.0);
        let s = lesions_from_map(&v, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(adjusted_agatston(&s), 36.0);

        // two slices: area 10 max 150, area 5 max 450
        let g = grid([5, 2, 2], [1.0, 1.0, 3.0]);
        let mut v = Volume::filled(g, 0.0);
        for y in 0..2 {
            for x in 0..5 {
                v.set(x, y, 0, 150.0);
            }
        }
        for x in 0..5 {
            v.set(x, 0, 1, if x == 0 { 450.0 } else { 160.0 });
        }
        let s = lesions_from_map(&v, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(adjusted_agatston(&s), 30.0);
    }

    #[test]
    fn conventional_hand_values_and_equality() {
        let g = grid([4, 2, 1], [1.0, 1.0, 3.0]);
        let mut v = Volume::filled(g, 40.0);
        for y in 0..2 {
            for x in 0..4 {
                v.set(x, y, 0, 180.0);
            }
        }
        v.set(0, 0, 0, 250.0);
        let s = lesions_from_threshold(&v, None, 130.0, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(conventional_agatston(&s), 16.0);
        assert_eq!(adjusted_agatston(&s), conventional_agatston(&s));
        let low = Volume::filled(g, 129.0);
        let s = lesions_from_threshold(&low, None, 130.0, Connectivity::TwentySix, 1, None).unwrap();
        assert_eq!(conventional_agatston(&s), 0.0);
    }

    #[test]
    fn weight_bins_exhaustive() {
        assert_eq!(adjusted_weight(1.0), 1);
        assert_eq!(adjusted_weight(199.5), 1);
        assert_eq!(adjusted_weight(200.0), 2);
        assert_eq!(adjusted_weight(399.99), 3);
        assert_eq!(adjusted_weight(400.0), 4);
        assert_eq!(conventional_weight(129.9), 0);
        assert_eq!(conventional_weight(130.0), 1);
        for hu in [130.0, 150.0, 199.0, 200.0, 299.0, 300.0, 350.0, 400.0, 900.0] {
            assert_eq!(adjusted_weight(hu), conventional_weight(hu));
        }
    }

    #[test]
    fn risk_bins() {
        use RiskCategory::*;
        for (s, c) in [(0.0, I), (10.0, I), (11.0, II), (100.0, II), (101.0, III), (150.0, III), (400.0, IV), (1e4, IV)] {
            assert_eq!(risk_category(s).unwrap(), c, "{s}");
        }
        assert!(risk_category(-1.0).is_err());
    }

    #[test]
    fn empty_map_scores_zero() {
        let g = grid([4, 4, 4], [1.0; 3]);
        let r = score_map(&Volume::filled(g, 0.0), None, None, None, &ScoringConfig::default()).unwrap();
        assert_eq!(r, ScoreRecord::zero());
    }

    #[test]
    fn per_artery_partition_sums_to_total() {
        let g = grid([10, 3, 3], [1.0, 1.0, 1.5]);
        let mut v = Volume::filled(g, 0.0);
        let mut labels = Volume::filled(g, 0.0);
        for (x, l, a) in [(1, 1.0, 210.0), (4, 2.0, 90.0), (8, 3.0, 420.0)] {
            v.set(x, 1, 1, a);
            v.set(x, 1, 2, a * 0.5);
            labels.set(x, 1, 1, l);
        }
        let r = score_map(&v, None, None, Some(&labels), &ScoringConfig::default()).unwrap();
        let sum: f64 = r.arteries.values().map(|a| a.pseudo_mass).sum();
        assert!((sum - r.pseudo_mass).abs() < 1e-9);
        let sum: f64 = r.arteries.values().map(|a| a.adjusted_agatston).sum();
        assert!((sum - r.adjusted_agatston).abs() < 1e-9);
    }

    #[test]
    fn record_json_schema() {
        let r = ScoreRecord::zero();
        let j = serde_json::to_value(&r).unwrap();
        for k in ["pseudo_mass", "adjusted_agatston", "conventional_agatston", "risk_category", "arteries"] {
            assert!(j.get(k).is_some(), "{k}");
        }
        assert_eq!(j["risk_category"], "I");
    }
}
