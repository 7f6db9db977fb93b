//! Volume data model, the two-file container format, resampling, HU
//! windowing and heart-centred cropping.
//!
//! Voxel data is stored x-fastest: index `x + nx * (y + ny * z)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry shared by volumes and masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(spacing));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn pixel_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    /// Physical position (mm) of a voxel centre.
    pub fn position(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [
            self.origin[0] + x * self.spacing[0],
            self.origin[1] + y * self.spacing[1],
            self.origin[2] + z * self.spacing[2],
        ]
    }

    /// Physical extent along each axis (`dims * spacing`).
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Grid covering the same physical box at a new spacing. The outer
    /// corner of the first voxel is kept fixed.
    pub fn respaced(&self, target: [f64; 3]) -> Result<Grid> {
        if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(target));
        }
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let extent = self.dims[a] as f64 * self.spacing[a];
            dims[a] = ((extent / target[a]).round() as usize).max(1);
            let corner = self.origin[a] - 0.5 * self.spacing[a];
            origin[a] = corner + 0.5 * target[a];
        }
        Grid::new(dims, target, origin)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        const TOL: f64 = 1e-9;
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= TOL
                    && (self.origin[a] - other.origin[a]).abs() <= TOL
            })
    }

    pub fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// 3D scalar field in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::SizeMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    /// Axial slice `z` as an x-fastest row-major buffer.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.grid.dims[0] * self.grid.dims[1];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let n = self.grid.dims[0] * self.grid.dims[1];
        &mut self.data[z * n..(z + 1) * n]
    }

    /// Trilinear sample at a continuous voxel index, clamped to the edge.
    pub fn sample_linear(&self, p: [f64; 3]) -> f64 {
        let d = self.grid.dims;
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let hi = (d[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            let f = c.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(d[a] - 1);
            t[a] = c - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= t[a];
                    idx[a] = i1[a];
                } else {
                    w *= 1.0 - t[a];
                    idx[a] = i0[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }

    pub fn sample_nearest(&self, p: [f64; 3]) -> f64 {
        let d = self.grid.dims;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = p[a].round().clamp(0.0, (d[a] - 1) as f64) as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }
}

/// Binary mask sharing the geometry of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::SizeMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            data: vec![false; grid.len()],
            grid,
        }
    }

    pub fn full(grid: Grid) -> Self {
        Self {
            data: vec![true; grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_volume(v: &Volume, threshold: f64) -> Self {
        Self {
            grid: v.grid,
            data: v.data.iter().map(|&x| x > threshold).collect(),
        }
    }

    /// Inclusive z-range of axial slices containing foreground.
    pub fn slice_range(&self) -> Option<(usize, usize)> {
        let [nx, ny, nz] = self.grid.dims;
        let n = nx * ny;
        let occupied = |z: usize| self.data[z * n..(z + 1) * n].iter().any(|&b| b);
        let first = (0..nz).find(|&z| occupied(z))?;
        let last = (0..nz).rev().find(|&z| occupied(z))?;
        Some((first, last))
    }

    pub fn slice_has_foreground(&self, z: usize) -> bool {
        let n = self.grid.dims[0] * self.grid.dims[1];
        self.data[z * n..(z + 1) * n].iter().any(|&b| b)
    }

    /// Inclusive voxel bounding box `(min, max)`.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                any = true;
                let c = self.grid.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Resample onto a new spacing covering the same physical extent.
pub fn resample(v: &Volume, target_spacing: [f64; 3], interpolation: Interpolation) -> Result<Volume> {
    let target = v.grid.respaced(target_spacing)?;
    Ok(resample_onto(v, &target, interpolation))
}

/// Resample onto an arbitrary target grid; samples outside the source are
/// clamped to the nearest edge voxel.
pub fn resample_onto(v: &Volume, target: &Grid, interpolation: Interpolation) -> Volume {
    let mut out = Vec::with_capacity(target.len());
    let [tx, ty, tz] = target.dims;
    for z in 0..tz {
        for y in 0..ty {
            for x in 0..tx {
                let p = target.position(x as f64, y as f64, z as f64);
                let mut c = [0.0; 3];
                for a in 0..3 {
                    c[a] = (p[a] - v.grid.origin[a]) / v.grid.spacing[a];
                }
                out.push(match interpolation {
                    Interpolation::Linear => v.sample_linear(c),
                    Interpolation::Nearest => v.sample_nearest(c),
                });
            }
        }
    }
    Volume {
        grid: *target,
        data: out,
    }
}

pub fn resample_mask(m: &BinaryMask, target: &Grid) -> BinaryMask {
    let v = resample_onto(&m.to_volume(), target, Interpolation::Nearest);
    BinaryMask::from_volume(&v, 0.5)
}

/// Arithmetic mean of foreground voxel coordinates.
pub fn center_of_mass(m: &BinaryMask) -> Result<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &b) in m.data.iter().enumerate() {
        if b {
            let c = m.grid.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

/// Clipping window mapping HU onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self {
            lo: -50.0,
            hi: 950.0,
        }
    }
}

impl HuWindow {
    #[inline]
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn to_unit(&self, hu: f64) -> f64 {
        (hu.clamp(self.lo, self.hi) - self.lo) / self.width()
    }

    #[inline]
    pub fn to_hu(&self, unit: f64) -> f64 {
        unit * self.width() + self.lo
    }

    /// Attenuation difference in HU represented by `units` of a CAC map.
    #[inline]
    pub fn units_to_attenuation(&self, units: f64) -> f64 {
        units * self.width()
    }

    #[inline]
    pub fn attenuation_to_units(&self, hu: f64) -> f64 {
        hu / self.width()
    }
}

/// Square axial crop in window units.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    /// Row-major, x fastest, `side * side` values in `[0, 1]`.
    pub data: Vec<f64>,
    pub side: usize,
    pub window: HuWindow,
    pub slice_index: usize,
    /// Integer voxel (x, y) of the crop centre.
    pub crop_center: [i64; 2],
}

impl NormalizedSlice {
    /// Volume voxel (x, y) covered by crop pixel (u, v).
    #[inline]
    pub fn source_pixel(&self, u: usize, v: usize) -> (i64, i64) {
        crop_source(self.crop_center, self.side, u, v)
    }

    pub fn to_hu(&self) -> Vec<f64> {
        self.data.iter().map(|&u| self.window.to_hu(u)).collect()
    }
}

#[inline]
pub(crate) fn crop_origin(center: [i64; 2], side: usize) -> (i64, i64) {
    let half = (side / 2) as i64;
    (center[0] - half, center[1] - half)
}

#[inline]
pub(crate) fn crop_source(center: [i64; 2], side: usize, u: usize, v: usize) -> (i64, i64) {
    let (x0, y0) = crop_origin(center, side);
    (x0 + u as i64, y0 + v as i64)
}

/// Crop `side x side` pixels of slice `slice_index` around `center`, clip to
/// the window and scale to `[0, 1]`. Pixels outside the volume read as 0 HU.
pub fn normalize_slice(
    v: &Volume,
    slice_index: usize,
    center: [f64; 3],
    side: usize,
    window: HuWindow,
) -> Result<NormalizedSlice> {
    let [nx, ny, nz] = v.grid.dims;
    if slice_index >= nz {
        return Err(Error::OutOfRange(format!(
            "slice {slice_index} of {nz}"
        )));
    }
    if side == 0 {
        return Err(Error::InvalidArgument("crop side must be positive".into()));
    }
    let c = [center[0].round() as i64, center[1].round() as i64];
    let src = v.slice(slice_index);
    let pad = window.to_unit(0.0);
    let mut data = Vec::with_capacity(side * side);
    for vv in 0..side {
        for u in 0..side {
            let (x, y) = crop_source(c, side, u, vv);
            let value = if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                window.to_unit(src[x as usize + nx * y as usize])
            } else {
                pad
            };
            data.push(value);
        }
    }
    Ok(NormalizedSlice {
        data,
        side,
        window,
        slice_index,
        crop_center: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int16,
    Float32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: Dtype,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<String>,
}

/// Payload path paired with a sidecar: same stem, `.raw` extension.
pub fn payload_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

/// Write a volume as JSON sidecar at `path` plus raw little-endian payload.
/// `Int16` rounds to the nearest integer and rejects values outside the
/// int16 range.
pub fn write_volume(path: &Path, v: &Volume, dtype: Dtype) -> Result<()> {
    let raw = payload_path(path);
    let header = Header {
        dims: v.grid.dims,
        spacing_mm: v.grid.spacing,
        origin_mm: v.grid.origin,
        dtype,
        byte_order: "little".into(),
        payload: raw.file_name().map(|s| s.to_string_lossy().into_owned()),
    };
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    match dtype {
        Dtype::Int16 => {
            for &x in &v.data {
                let r = x.round();
                if !r.is_finite() || r < i16::MIN as f64 || r > i16::MAX as f64 {
                    return Err(Error::InvalidArgument(format!(
                        "value {x} not representable as int16"
                    )));
                }
                bytes.extend_from_slice(&(r as i16).to_le_bytes());
            }
        }
        Dtype::Float32 => {
            for &x in &v.data {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if header.byte_order != "little" {
        return Err(Error::Header {
            path: path.to_path_buf(),
            message: format!("unsupported byte order {}", header.byte_order),
        });
    }
    let grid = Grid::new(header.dims, header.spacing_mm, header.origin_mm)?;
    let raw = match &header.payload {
        Some(name) => path.with_file_name(name),
        None => payload_path(path),
    };
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let width = match header.dtype {
        Dtype::Int16 => 2,
        Dtype::Float32 => 4,
    };
    if bytes.len() % width != 0 || bytes.len() / width != grid.len() {
        return Err(Error::SizeMismatch {
            expected: grid.len(),
            actual: bytes.len() / width,
        });
    }
    let data = match header.dtype {
        Dtype::Int16 => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
            .collect(),
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    };
    Volume::new(grid, data)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_volume(path, &m.to_volume(), Dtype::Int16)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_volume(&read_volume(path)?, 0.5))
}
