//! Synthetic paired cardiac CT phantoms with voxel-exact calcium truth.
//!
//! The anatomy is a stack of analytic shapes (body cylinder, lungs, spine,
//! heart with an epicardial fat layer) and three coronary arteries running
//! through the fat layer. Lesions are voxelised spheres or cubes of constant
//! attributable attenuation placed on the artery paths. Each artery's lesion
//! field is blurred with its own anisotropic Gaussian to mimic cardiac
//! motion before noise is added.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{block_average, gaussian_blur_3d, Boundary};
use crate::volume::{BinaryMask, Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Artery {
    #[serde(rename = "LAD")]
    Lad,
    #[serde(rename = "RCA")]
    Rca,
    #[serde(rename = "LCX")]
    Lcx,
}

impl Artery {
    pub const ALL: [Artery; 3] = [Artery::Lad, Artery::Rca, Artery::Lcx];

    /// Voxel label used in label volumes; 0 is reserved for "none".
    pub fn label(self) -> u8 {
        match self {
            Artery::Lad => 1,
            Artery::Rca => 2,
            Artery::Lcx => 3,
        }
    }

    pub fn from_label(l: u8) -> Option<Artery> {
        match l {
            1 => Some(Artery::Lad),
            2 => Some(Artery::Rca),
            3 => Some(Artery::Lcx),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Artery::Lad => "LAD",
            Artery::Rca => "RCA",
            Artery::Lcx => "LCX",
        }
    }
}

impl fmt::Display for Artery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned ellipsoid in mm. An infinite radius gives a cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn level(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            if self.radii[a].is_finite() {
                let d = (p[a] - self.center[a]) / self.radii[a];
                s += d * d;
            }
        }
        s
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    pub fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: [self.radii[0] * f, self.radii[1] * f, self.radii[2] * f],
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidPhantom(format!("degenerate ellipsoid {what}: {:?}", self.radii)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueHu {
    pub air: f64,
    pub soft_tissue: f64,
    pub lung: f64,
    pub fat: f64,
    pub heart: f64,
    pub blood: f64,
    pub bone: f64,
}

impl Default for TissueHu {
    fn default() -> Self {
        Self {
            air: -1000.0,
            soft_tissue: 40.0,
            lung: -800.0,
            fat: -90.0,
            heart: 30.0,
            blood: 40.0,
            bone: 700.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArterySpec {
    pub artery: Artery,
    /// Polyline through the artery centre, in mm.
    pub path: Vec<[f64; 3]>,
    pub radius_mm: f64,
    /// Motion blur standard deviation per axis in mm.
    pub motion_sigma_mm: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionShape {
    Sphere,
    /// Axis-aligned cube of half-width `radius_mm`.
    Cube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub artery: Artery,
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    /// Attenuation added on top of the background, in HU.
    pub peak_hu: f64,
    #[serde(default = "default_shape")]
    pub shape: LesionShape,
}

fn default_shape() -> LesionShape {
    LesionShape::Sphere
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub body: Ellipsoid,
    pub lungs: Vec<Ellipsoid>,
    pub spine: Ellipsoid,
    /// Outer heart boundary (pericardium); defines the heart mask.
    pub heart: Ellipsoid,
    /// Myocardium radius as a fraction of the heart radii.
    pub myocardium_scale: f64,
    pub tissue: TissueHu,
    pub arteries: Vec<ArterySpec>,
    pub lesions: Vec<LesionSpec>,
    pub noise_sigma_hu: f64,
    /// Relative per-scan jitter of motion sigma in a pair: each scan draws
    /// `sigma * (1 + j * u)` with `u ~ U[-1, 1]`.
    pub motion_jitter: f64,
    /// A slice is CAC-positive when any truth voxel exceeds this value.
    pub flag_threshold_hu: f64,
    pub seed: u64,
}

/// Ground truth of one rendered phantom scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Attenuation contributed by lesions (post-blur, pre-noise), HU.
    pub cac_map: Volume,
    /// Artery label per voxel (see [`Artery::label`]).
    pub artery_labels: Vec<u8>,
    /// 1-based lesion index per voxel, 0 where no lesion is visible.
    pub lesion_ids: Vec<u32>,
    pub heart_mask: BinaryMask,
    pub slice_flags: Vec<bool>,
    /// Planted mass per lesion (HU mm^3), exact by construction.
    pub lesion_true_mass: Vec<f64>,
    /// Mass of each lesion after blurring, measured on the grid.
    pub lesion_rendered_mass: Vec<f64>,
    pub lesion_arteries: Vec<Artery>,
    /// Motion sigma actually used for each artery in this scan.
    pub motion_sigma_mm: Vec<(Artery, [f64; 3])>,
}

impl PhantomTruth {
    pub fn total_true_mass(&self) -> f64 {
        self.lesion_true_mass.iter().sum()
    }

    pub fn total_map_mass(&self) -> f64 {
        self.cac_map.data.iter().sum::<f64>() * self.cac_map.grid.voxel_volume()
    }

    pub fn label_volume(&self) -> Volume {
        Volume {
            grid: self.cac_map.grid,
            data: self.artery_labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Voxels belonging to lesion `id` (1-based).
    pub fn lesion_voxels(&self, id: u32) -> Vec<usize> {
        self.lesion_ids
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == id).then_some(i))
            .collect()
    }
}

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn dist_to_polyline(p: [f64; 3], path: &[[f64; 3]]) -> f64 {
    match path.len() {
        0 => f64::INFINITY,
        1 => dist_point_segment(p, path[0], path[0]),
        _ => path
            .windows(2)
            .map(|w| dist_point_segment(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Point at arc-length fraction `t` in `[0, 1]` along a polyline.
pub fn point_along(path: &[[f64; 3]], t: f64) -> [f64; 3] {
    let seg_len = |a: [f64; 3], b: [f64; 3]| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
    let total: f64 = path.windows(2).map(|w| seg_len(w[0], w[1])).sum();
    let mut target = t.clamp(0.0, 1.0) * total;
    for w in path.windows(2) {
        let l = seg_len(w[0], w[1]);
        if target <= l && l > 0.0 {
            let f = target / l;
            return [
                w[0][0] + f * (w[1][0] - w[0][0]),
                w[0][1] + f * (w[1][1] - w[0][1]),
                w[0][2] + f * (w[1][2] - w[0][2]),
            ];
        }
        target -= l;
    }
    *path.last().expect("nonempty path")
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing_mm, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid().map_err(|e| Error::InvalidPhantom(e.to_string()))?;
        self.body.validate("body")?;
        self.heart.validate("heart")?;
        self.spine.validate("spine")?;
        for (i, l) in self.lungs.iter().enumerate() {
            l.validate(&format!("lung {i}"))?;
        }
        if !(self.myocardium_scale > 0.0 && self.myocardium_scale <= 1.0) {
            return Err(Error::InvalidPhantom("myocardium scale must be in (0, 1]".into()));
        }
        if self.noise_sigma_hu < 0.0 || self.motion_jitter < 0.0 {
            return Err(Error::InvalidPhantom("noise sigma and motion jitter must be >= 0".into()));
        }
        for a in &self.arteries {
            if !(a.radius_mm > 0.0) || a.path.is_empty() {
                return Err(Error::InvalidPhantom(format!("artery {} needs a path and radius > 0", a.artery)));
            }
            if a.motion_sigma_mm.iter().any(|&s| s < 0.0) {
                return Err(Error::InvalidPhantom(format!("negative blur sigma on {}", a.artery)));
            }
        }
        let ext = grid.extent();
        for (i, l) in self.lesions.iter().enumerate() {
            if !(l.radius_mm > 0.0) {
                return Err(Error::InvalidPhantom(format!("lesion {i} radius must be > 0")));
            }
            if l.peak_hu < 0.0 {
                return Err(Error::InvalidPhantom(format!("lesion {i} attenuation must be >= 0")));
            }
            let lo = [-0.5 * self.spacing_mm[0], -0.5 * self.spacing_mm[1], -0.5 * self.spacing_mm[2]];
            for a in 0..3 {
                let c = l.center_mm[a];
                if c - l.radius_mm < lo[a] || c + l.radius_mm > lo[a] + ext[a] {
                    return Err(Error::InvalidPhantom(format!("lesion {i} lies outside the grid")));
                }
            }
            let art = self
                .arteries
                .iter()
                .find(|a| a.artery == l.artery)
                .ok_or_else(|| Error::InvalidPhantom(format!("lesion {i} references missing artery {}", l.artery)))?;
            let d = dist_to_polyline(l.center_mm, &art.path);
            if d > art.radius_mm + 1e-6 {
                return Err(Error::InvalidPhantom(format!(
                    "lesion {i} centre is {d:.2} mm from the {} path",
                    l.artery
                )));
            }
        }
        Ok(())
    }

    /// Default desk-scale anatomy on a 64 x 64 x 24 grid at 1 x 1 x 1.5 mm,
    /// with no lesions.
    pub fn desk_default() -> Self {
        let dims = [64, 64, 24];
        let spacing = [1.0, 1.0, 1.5];
        let heart = Ellipsoid {
            center: [32.0, 31.0, 17.25],
            radii: [14.0, 12.0, 14.0],
        };
        let mut spec = PhantomSpec {
            dims,
            spacing_mm: spacing,
            body: Ellipsoid {
                center: [31.5, 31.5, 0.0],
                radii: [30.0, 27.0, f64::INFINITY],
            },
            lungs: vec![
                Ellipsoid {
                    center: [16.0, 30.0, 0.0],
                    radii: [11.0, 17.0, f64::INFINITY],
                },
                Ellipsoid {
                    center: [47.0, 30.0, 0.0],
                    radii: [11.0, 17.0, f64::INFINITY],
                },
            ],
            spine: Ellipsoid {
                center: [31.5, 52.0, 0.0],
                radii: [5.0, 4.5, f64::INFINITY],
            },
            heart,
            myocardium_scale: 0.72,
            tissue: TissueHu::default(),
            arteries: Vec::new(),
            lesions: Vec::new(),
            noise_sigma_hu: 20.0,
            motion_jitter: 0.5,
            flag_threshold_hu: 10.0,
            seed: 0,
        };
        spec.arteries = default_arteries(&heart, spec.myocardium_scale);
        spec
    }

    /// Random anatomy variation and random lesions on the desk grid.
    pub fn random_desk(rng: &mut impl Rng, lesion_count: std::ops::RangeInclusive<usize>, seed: u64) -> Self {
        let mut spec = Self::desk_default();
        spec.seed = seed;
        let jitter = |rng: &mut dyn rand::RngCore, v: f64, amp: f64| v + amp * (2.0 * rng.random::<f64>() - 1.0);
        spec.heart.center[0] = jitter(rng, spec.heart.center[0], 2.0);
        spec.heart.center[1] = jitter(rng, spec.heart.center[1], 2.0);
        spec.heart.center[2] = jitter(rng, spec.heart.center[2], 2.0);
        for a in 0..3 {
            spec.heart.radii[a] *= jitter(rng, 1.0, 0.08);
        }
        spec.arteries = default_arteries(&spec.heart, spec.myocardium_scale);
        let n = rng.random_range(lesion_count);
        for _ in 0..n {
            let art = Artery::ALL[rng.random_range(0..3)];
            let path = &spec.arteries.iter().find(|a| a.artery == art).unwrap().path;
            let center = point_along(path, rng.random_range(0.1..0.9));
            spec.lesions.push(LesionSpec {
                artery: art,
                center_mm: center,
                radius_mm: rng.random_range(1.0..2.2),
                peak_hu: rng.random_range(150.0..550.0),
                shape: LesionShape::Sphere,
            });
        }
        spec
    }
}

/// Artery paths on a surface between the myocardium and the pericardium.
pub fn default_arteries(heart: &Ellipsoid, myo_scale: f64) -> Vec<ArterySpec> {
    let shell = 0.5 * (1.0 + myo_scale);
    let make = |phi0: f64, phi1: f64, z0: f64, z1: f64| -> Vec<[f64; 3]> {
        (0..=8)
            .map(|i| {
                let t = i as f64 / 8.0;
                let phi = (phi0 + t * (phi1 - phi0)).to_radians();
                let zr = z0 + t * (z1 - z0);
                let s = (1.0 - zr * zr).max(0.0).sqrt() * shell;
                [
                    heart.center[0] + heart.radii[0] * s * phi.cos(),
                    heart.center[1] + heart.radii[1] * s * phi.sin(),
                    heart.center[2] + heart.radii[2] * zr,
                ]
            })
            .collect()
    };
    // image y grows posteriorly; anterior is negative y
    vec![
        ArterySpec {
            artery: Artery::Lad,
            path: make(-70.0, -40.0, -0.6, 0.6),
            radius_mm: 1.5,
            motion_sigma_mm: [0.4, 0.4, 0.3],
        },
        ArterySpec {
            artery: Artery::Rca,
            path: make(200.0, 150.0, -0.6, 0.6),
            radius_mm: 1.5,
            motion_sigma_mm: [1.2, 1.2, 0.6],
        },
        ArterySpec {
            artery: Artery::Lcx,
            path: make(20.0, 70.0, -0.6, 0.6),
            radius_mm: 1.5,
            motion_sigma_mm: [0.6, 0.6, 0.4],
        },
    ]
}

fn render_anatomy(spec: &PhantomSpec, grid: &Grid) -> (Vec<f64>, Vec<bool>) {
    let t = &spec.tissue;
    let myo = spec.heart.scaled(spec.myocardium_scale);
    let mut data = Vec::with_capacity(grid.len());
    let mut heart = Vec::with_capacity(grid.len());
    let [nx, ny, nz] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = grid.position(x as f64, y as f64, z as f64);
                let mut v = t.air;
                let mut in_heart = false;
                if spec.body.contains(p) {
                    v = t.soft_tissue;
                    if spec.lungs.iter().any(|l| l.contains(p)) {
                        v = t.lung;
                    }
                    if spec.spine.contains(p) {
                        v = t.bone;
                    }
                    if spec.heart.contains(p) {
                        in_heart = true;
                        v = if myo.contains(p) { t.heart } else { t.fat };
                        if spec.arteries.iter().any(|a| dist_to_polyline(p, &a.path) <= a.radius_mm) {
                            v = t.blood;
                        }
                    }
                }
                data.push(v);
                heart.push(in_heart);
            }
        }
    }
    (data, heart)
}

fn lesion_support(spec: &PhantomSpec, grid: &Grid, l: &LesionSpec) -> Vec<usize> {
    let mut idx = Vec::new();
    let [nx, ny, nz] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = grid.position(x as f64, y as f64, z as f64);
                let d = [p[0] - l.center_mm[0], p[1] - l.center_mm[1], p[2] - l.center_mm[2]];
                let inside = match l.shape {
                    LesionShape::Sphere => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= l.radius_mm,
                    LesionShape::Cube => d.iter().all(|c| c.abs() <= l.radius_mm),
                };
                if inside {
                    idx.push(grid.index(x, y, z));
                }
            }
        }
    }
    let _ = spec;
    idx
}

/// Render one scan with the given per-artery motion sigmas and noise seed.
fn render(spec: &PhantomSpec, motion: &[(Artery, [f64; 3])], noise_seed: u64) -> Result<(Volume, PhantomTruth)> {
    spec.validate()?;
    let grid = spec.grid()?;
    let vv = grid.voxel_volume();
    let (mut data, mut heart) = render_anatomy(spec, &grid);

    let mut truth = vec![0.0; grid.len()];
    let mut best = vec![0.0f64; grid.len()];
    let mut lesion_ids = vec![0u32; grid.len()];
    let mut artery_labels = vec![0u8; grid.len()];
    let mut true_mass = Vec::with_capacity(spec.lesions.len());
    let mut rendered_mass = Vec::with_capacity(spec.lesions.len());
    let mut occupied = vec![false; grid.len()];

    for (li, l) in spec.lesions.iter().enumerate() {
        let mut field = vec![0.0; grid.len()];
        let mut k = 0usize;
        for i in lesion_support(spec, &grid, l) {
            // overlapping lesions: the first one owns a voxel
            if !occupied[i] {
                occupied[i] = true;
                field[i] = l.peak_hu;
                k += 1;
            }
        }
        true_mass.push(k as f64 * l.peak_hu * vv);
        let sigma_mm = motion
            .iter()
            .find(|(a, _)| *a == l.artery)
            .map(|(_, s)| *s)
            .unwrap_or([0.0; 3]);
        let sigma_vox = [
            sigma_mm[0] / grid.spacing[0],
            sigma_mm[1] / grid.spacing[1],
            sigma_mm[2] / grid.spacing[2],
        ];
        let blurred = gaussian_blur_3d(&field, grid.dims, sigma_vox, Boundary::Zero);
        rendered_mass.push(blurred.iter().sum::<f64>() * vv);
        for (i, &b) in blurred.iter().enumerate() {
            if b <= 0.0 {
                continue;
            }
            truth[i] += b;
            if b > spec.flag_threshold_hu && b > best[i] {
                best[i] = b;
                lesion_ids[i] = li as u32 + 1;
                artery_labels[i] = l.artery.label();
            }
        }
    }
    for i in 0..grid.len() {
        if lesion_ids[i] != 0 || occupied[i] {
            heart[i] = true;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_sigma_hu.max(0.0)).expect("valid sigma");
    for (i, d) in data.iter_mut().enumerate() {
        *d += truth[i];
        if spec.noise_sigma_hu > 0.0 {
            *d += noise.sample(&mut rng);
        }
    }

    let n2 = grid.dims[0] * grid.dims[1];
    let slice_flags = (0..grid.dims[2])
        .map(|z| truth[z * n2..(z + 1) * n2].iter().any(|&v| v > spec.flag_threshold_hu))
        .collect();

    let volume = Volume::new(grid, data)?;
    let truth = PhantomTruth {
        cac_map: Volume::new(grid, truth)?,
        artery_labels,
        lesion_ids,
        heart_mask: BinaryMask::new(grid, heart)?,
        slice_flags,
        lesion_true_mass: true_mass,
        lesion_rendered_mass: rendered_mass,
        lesion_arteries: spec.lesions.iter().map(|l| l.artery).collect(),
        motion_sigma_mm: motion.to_vec(),
    };
    Ok((volume, truth))
}

fn nominal_motion(spec: &PhantomSpec) -> Vec<(Artery, [f64; 3])> {
    spec.arteries.iter().map(|a| (a.artery, a.motion_sigma_mm)).collect()
}

/// Render a phantom with its nominal motion blur. Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, PhantomTruth)> {
    render(spec, &nominal_motion(spec), spec.seed)
}

/// Two scans of the same anatomy with independent noise and jittered motion.
pub fn generate_pair(spec: &PhantomSpec, pair_seed: u64) -> Result<((Volume, PhantomTruth), (Volume, PhantomTruth))> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed ^ 0x9e37_79b9_7f4a_7c15);
    let scan = |rng: &mut ChaCha8Rng| -> Result<(Volume, PhantomTruth)> {
        let motion: Vec<(Artery, [f64; 3])> = spec
            .arteries
            .iter()
            .map(|a| {
                let f = if spec.motion_jitter > 0.0 {
                    (1.0 + spec.motion_jitter * (2.0 * rng.random::<f64>() - 1.0)).max(0.0)
                } else {
                    1.0
                };
                (a.artery, a.motion_sigma_mm.map(|s| s * f))
            })
            .collect();
        let noise_seed = rng.random::<u64>();
        render(spec, &motion, noise_seed)
    };
    let first = scan(&mut rng)?;
    let second = if spec.motion_jitter == 0.0 && spec.noise_sigma_hu == 0.0 {
        first.clone()
    } else {
        scan(&mut rng)?
    };
    Ok((first, second))
}

/// Partial-volume degradation: block-average `factor^3` blocks of both the
/// image and the truth map. Truth mass is conserved.
pub fn degrade(v: &Volume, truth: &PhantomTruth, factor: usize) -> Result<(Volume, PhantomTruth)> {
    if factor < 1 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    v.grid.check_same(&truth.cac_map.grid, "degrade")?;
    let dims = v.grid.dims;
    let image = Volume::new(v.grid, block_average(&v.data, dims, factor)?)?;
    let mut t = truth.clone();
    t.cac_map = Volume::new(v.grid, block_average(&truth.cac_map.data, dims, factor)?)?;
    Ok((image, t))
}

/// Fraction of voxels of lesion `id` whose rendered HU is below `threshold`.
pub fn fraction_below(v: &Volume, truth: &PhantomTruth, id: u32, threshold: f64) -> Option<f64> {
    let vox = truth.lesion_voxels(id);
    if vox.is_empty() {
        return None;
    }
    Some(vox.iter().filter(|&&i| v.data[i] < threshold).count() as f64 / vox.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PhantomSpec {
        let mut s = PhantomSpec::desk_default();
        s.noise_sigma_hu = 0.0;
        s
    }

    fn rca_lesion(spec: &PhantomSpec, t: f64, peak: f64) -> LesionSpec {
        let path = &spec.arteries.iter().find(|a| a.artery == Artery::Rca).unwrap().path;
        LesionSpec {
            artery: Artery::Rca,
            center_mm: point_along(path, t),
            radius_mm: 1.8,
            peak_hu: peak,
            shape: LesionShape::Sphere,
        }
    }

    #[test]
    fn no_lesions_no_truth() {
        let (_, t) = generate_phantom(&PhantomSpec::desk_default()).unwrap();
        assert!(t.cac_map.data.iter().all(|&v| v == 0.0));
        assert!(t.slice_flags.iter().all(|&f| !f));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = PhantomSpec::random_desk(&mut rng, 2..=3, 17);
        let (a, _) = generate_phantom(&spec).unwrap();
        let (b, _) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cubic_lesion_mass_is_analytic() {
        let mut spec = quiet();
        for a in &mut spec.arteries {
            a.motion_sigma_mm = [0.0; 3];
        }
        // cube half-width 1 mm at 1 x 1 x 1.5 mm: 3 x 3 x 1 voxels, centred on a voxel
        let path = spec.arteries[0].path.clone();
        let mut c = point_along(&path, 0.5);
        c = [c[0].round(), c[1].round(), (c[2] / 1.5).round() * 1.5];
        spec.arteries[0].path = vec![c, [c[0], c[1], c[2] + 3.0]];
        spec.lesions.push(LesionSpec {
            artery: Artery::Lad,
            center_mm: c,
            radius_mm: 1.0,
            peak_hu: 400.0,
            shape: LesionShape::Cube,
        });
        let (_, t) = generate_phantom(&spec).unwrap();
        let k = 9.0;
        assert_eq!(t.lesion_true_mass[0], k * 400.0 * 1.5);
        assert!((t.total_map_mass() - k * 400.0 * 1.5).abs() < 1e-9);
    }

    #[test]
    fn lesion_off_path_rejected() {
        let mut spec = quiet();
        let mut l = rca_lesion(&spec, 0.5, 300.0);
        l.center_mm[0] += 5.0;
        spec.lesions.push(l);
        assert!(matches!(generate_phantom(&spec), Err(Error::InvalidPhantom(_))));
        let mut spec = quiet();
        spec.heart.radii[1] = 0.0;
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn pair_without_jitter_or_noise_is_identical() {
        let mut spec = quiet();
        spec.motion_jitter = 0.0;
        spec.lesions.push(rca_lesion(&spec, 0.4, 300.0));
        let ((a, ta), (b, tb)) = generate_pair(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.total_true_mass(), tb.total_true_mass());
    }

    #[test]
    fn pair_shares_true_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = PhantomSpec::random_desk(&mut rng, 2..=4, 1);
        let ((a, ta), (b, tb)) = generate_pair(&spec, 99).unwrap();
        assert_ne!(a, b);
        assert_eq!(ta.lesion_true_mass, tb.lesion_true_mass);
    }

    #[test]
    fn motion_pushes_rca_below_threshold() {
        let mut spec = quiet();
        spec.lesions.push(rca_lesion(&spec, 0.5, 250.0));
        let count_above = |sigma: f64| {
            let mut s = spec.clone();
            for a in &mut s.arteries {
                if a.artery == Artery::Rca {
                    a.motion_sigma_mm = [sigma, sigma, 0.5 * sigma];
                }
            }
            let (v, t) = generate_phantom(&s).unwrap();
            // count over the unblurred support
            let support = lesion_support(&s, &v.grid, &s.lesions[0]);
            let above = support.iter().filter(|&&i| v.data[i] >= 130.0).count();
            (above, support.len(), t)
        };
        let (sharp, n, _) = count_above(0.0);
        let (blurred, _, _) = count_above(2.0);
        assert_eq!(sharp, n);
        assert!(blurred < sharp);
    }

    #[test]
    fn degrade_conserves_mass() {
        let mut spec = quiet();
        spec.lesions.push(rca_lesion(&spec, 0.5, 500.0));
        let (v, t) = generate_phantom(&spec).unwrap();
        let (v1, t1) = degrade(&v, &t, 1).unwrap();
        assert_eq!(v1, v);
        assert_eq!(t1, t);
        let (_, t2) = degrade(&v, &t, 2).unwrap();
        let m0 = t.total_map_mass();
        assert!((t2.total_map_mass() - m0).abs() <= 0.005 * m0);
        assert!(degrade(&v, &t, 0).is_err());
    }

    #[test]
    fn heart_mask_contains_lesions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 0..4 {
            let spec = PhantomSpec::random_desk(&mut rng, 1..=4, s);
            let (_, t) = generate_phantom(&spec).unwrap();
            for (i, &id) in t.lesion_ids.iter().enumerate() {
                if id > 0 {
                    assert!(t.heart_mask.data[i]);
                }
            }
        }
    }
}
