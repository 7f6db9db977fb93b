//! Patch-based 3D heart segmentation network.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{largest_component, Connectivity};
use crate::nn::layers::{Decoder, Dim, Encoder, NormKind, ResNetSpec};
use crate::nn::{self, Adam, CheckpointManifest, Graph, Init, NetworkEntry, PadMode, ParamStore, Tensor};
use crate::volume::{resample, resample_onto, BinaryMask, Grid, Interpolation, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartSegConfig {
    pub net: ResNetSpec,
    pub last_kernel: usize,
    /// Patch size in voxels, x/y/z.
    pub patch: [usize; 3],
    /// Inference stride between overlapping patches.
    pub stride: [usize; 3],
    pub working_spacing_mm: [f64; 3],
    /// HU range mapped linearly onto [-1, 1].
    pub hu_range: [f64; 2],
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Share of training patches centred on a heart voxel.
    pub heart_fraction: f64,
    pub threshold: f64,
    pub dice_smooth: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for HeartSegConfig {
    fn default() -> Self {
        Self {
            net: ResNetSpec {
                dim: Dim::Three,
                in_channels: 1,
                width: 16,
                blocks: 9,
                first_kernel: 7,
                pad_mode: PadMode::Zero,
                norm: NormKind::Batch,
                init: Init::Kaiming,
            },
            last_kernel: 7,
            patch: [64, 64, 64],
            stride: [32, 32, 32],
            working_spacing_mm: [1.5, 1.5, 3.0],
            hu_range: [-1000.0, 1000.0],
            lr: 1e-3,
            batch_size: 10,
            iterations: 250_000,
            heart_fraction: 0.5,
            threshold: 0.5,
            dice_smooth: 1.0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl HeartSegConfig {
    /// Reduced network and resolution for single-core runs on phantoms.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.net.width = 4;
        c.net.blocks = 2;
        c.net.first_kernel = 5;
        c.last_kernel = 5;
        c.patch = [24, 24, 8];
        c.stride = [12, 12, 4];
        c.working_spacing_mm = [2.0, 2.0, 3.0];
        c.batch_size = 2;
        c.iterations = 300;
        c.log_every = 50;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0 || p % 4 != 0) {
            return Err(Error::InvalidArgument(format!("patch {:?} must be positive multiples of 4", self.patch)));
        }
        if self.stride.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("inference stride must be positive".into()));
        }
        if self.net.dim != Dim::Three || self.net.in_channels != 1 {
            return Err(Error::InvalidArgument("heart segmentation needs a single-channel 3D network".into()));
        }
        if !(0.0..=1.0).contains(&self.heart_fraction) {
            return Err(Error::InvalidArgument("heart_fraction outside [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "net": self.net, "last_kernel": self.last_kernel, "patch": self.patch })
    }
}

#[derive(Debug, Clone)]
pub struct HeartSegModel {
    pub config: HeartSegConfig,
    pub iterations: u64,
    ps: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl HeartSegModel {
    pub fn new(config: HeartSegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, &config.net, &mut rng);
        let dec = Decoder::new(&mut ps, &config.net, 2, config.last_kernel, &mut rng);
        Ok(Self {
            config,
            iterations: 0,
            ps,
            enc,
            dec,
        })
    }

    pub fn num_params(&self) -> usize {
        self.ps.num_params()
    }

    /// Map HU onto the network's input range.
    pub fn normalize(&self, hu: f64) -> f64 {
        let [lo, hi] = self.config.hu_range;
        (hu.clamp(lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    }

    fn probabilities(&mut self, g: &mut Graph, x: Tensor, train: bool) -> nn::Var {
        let x = g.input(x);
        let y = self.enc.forward(g, &mut self.ps, x, train);
        let y = self.dec.forward(g, &mut self.ps, y, train);
        g.sigmoid(y)
    }

    /// Two-channel sigmoid output `[N, 2, z, y, x]` for a batch of normalised
    /// patches `[N, 1, z, y, x]`.
    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        let mut g = Graph::new();
        let p = self.probabilities(&mut g, x, train);
        g.value(p).clone()
    }

    /// Heart probability of one normalised patch (x-fastest).
    pub fn predict_patch(&mut self, patch: &[f64]) -> Vec<f64> {
        let [px, py, pz] = self.config.patch;
        let out = self.forward(Tensor::new(vec![1, 1, pz, py, px], patch.to_vec()), false);
        out.data[px * py * pz..].to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            kind: "heartseg".into(),
            architecture: self.config.architecture(),
            architecture_hash: nn::config_hash(&self.config.architecture()),
            working_spacing_mm: Some(self.config.working_spacing_mm),
            iterations: self.iterations,
            networks: vec![NetworkEntry {
                name: "heartseg".into(),
                params: self.ps.shapes(),
            }],
            extra: serde_json::to_value(&self.config)?,
        };
        nn::save_checkpoint(path, &manifest, &[&self.ps])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(path)?;
        if manifest.kind != "heartseg" {
            return Err(Error::Checkpoint(format!("expected a heartseg checkpoint, found {}", manifest.kind)));
        }
        let config: HeartSegConfig = serde_json::from_value(manifest.extra)?;
        if nn::config_hash(&config.architecture()) != manifest.architecture_hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        let mut model = Self::new(config)?;
        nn::load_blob_into(path, &mut [&mut model.ps])?;
        model.iterations = manifest.iterations;
        Ok(model)
    }
}

/// Whether training sample `k` is drawn around a heart voxel. Spreads the
/// heart-centred samples evenly so every prefix meets the requested share.
pub fn heart_centred_sample(k: usize, fraction: f64) -> bool {
    ((k + 1) as f64 * fraction).floor() > (k as f64 * fraction).floor()
}

/// Copy a box starting at `start` (may be negative or overrun) padding with
/// `pad`.
pub fn extract_patch(data: &[f64], dims: [usize; 3], start: [i64; 3], size: [usize; 3], pad: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        let sz = start[2] + z as i64;
        for y in 0..size[1] {
            let sy = start[1] + y as i64;
            for x in 0..size[0] {
                let sx = start[0] + x as i64;
                let inside = sx >= 0 && sy >= 0 && sz >= 0 && (sx as usize) < dims[0] && (sy as usize) < dims[1] && (sz as usize) < dims[2];
                out.push(if inside {
                    data[sx as usize + dims[0] * (sy as usize + dims[1] * sz as usize)]
                } else {
                    pad
                });
            }
        }
    }
    out
}

struct Case {
    image: Vec<f64>,
    target: Vec<f64>,
    dims: [usize; 3],
    heart: Vec<usize>,
}

/// Train on `(image, heart mask)` pairs at any resolution; each case is
/// resampled to the working spacing first.
pub fn train_heartseg(dataset: &[(Volume, BinaryMask)], config: HeartSegConfig) -> Result<HeartSegModel> {
    if dataset.is_empty() {
        return Err(Error::Dataset("heart segmentation needs at least one training case".into()));
    }
    let mut model = HeartSegModel::new(config)?;
    let cfg = model.config.clone();
    let mut cases = Vec::with_capacity(dataset.len());
    for (v, m) in dataset {
        m.grid.check_same(&v.grid, "training image vs mask")?;
        let img = resample(v, cfg.working_spacing_mm, Interpolation::Linear)?;
        let mask = resample_onto(&m.to_volume(), &img.grid, Interpolation::Linear);
        let target: Vec<f64> = mask.data.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
        let heart = target.iter().enumerate().filter(|(_, &t)| t > 0.0).map(|(i, _)| i).collect();
        cases.push(Case {
            image: img.data.iter().map(|&h| model.normalize(h)).collect(),
            target,
            dims: img.grid.dims,
            heart,
        });
    }
    if cases.iter().all(|c| (0..3).any(|a| c.dims[a] < cfg.patch[a])) {
        return Err(Error::Dataset(format!("patch {:?} larger than every training volume", cfg.patch)));
    }
    let pad = model.normalize(-1000.0);
    let [px, py, pz] = cfg.patch;
    let plen = px * py * pz;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6865_6172);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut k = 0usize;
    let mut running = 0.0;
    for it in 0..cfg.iterations {
        let mut xs = Vec::with_capacity(cfg.batch_size * plen);
        let mut ts = Vec::with_capacity(cfg.batch_size * plen);
        for _ in 0..cfg.batch_size {
            let case = &cases[rng.random_range(0..cases.len())];
            let start: [i64; 3] = if heart_centred_sample(k, cfg.heart_fraction) && !case.heart.is_empty() {
                let c = case.heart[rng.random_range(0..case.heart.len())];
                let x = c % case.dims[0];
                let y = (c / case.dims[0]) % case.dims[1];
                let z = c / (case.dims[0] * case.dims[1]);
                let centre = [x, y, z];
                std::array::from_fn(|a| {
                    let hi = case.dims[a] as i64 - cfg.patch[a] as i64;
                    (centre[a] as i64 - cfg.patch[a] as i64 / 2).clamp(hi.min(0), hi.max(0))
                })
            } else {
                std::array::from_fn(|a| {
                    let hi = case.dims[a] as i64 - cfg.patch[a] as i64;
                    if hi > 0 {
                        rng.random_range(0..=hi)
                    } else {
                        hi / 2
                    }
                })
            };
            k += 1;
            xs.extend(extract_patch(&case.image, case.dims, start, cfg.patch, pad));
            ts.extend(extract_patch(&case.target, case.dims, start, cfg.patch, 0.0));
        }
        let mut g = Graph::new();
        let x = Tensor::new(vec![cfg.batch_size, 1, pz, py, px], xs);
        let p = model.probabilities(&mut g, x, true);
        let heart = g.select_channel(p, 1);
        let loss = g.dice_loss(heart, &ts, cfg.dice_smooth);
        running += g.value(loss).item();
        let grads = g.backward(loss);
        model.ps.accumulate(&g, &grads);
        opt.step(&mut model.ps);
        model.iterations += 1;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            info!("heartseg iteration {}: dice loss {:.4}", it + 1, running / cfg.log_every as f64);
            running = 0.0;
        }
    }
    Ok(model)
}

fn tile_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < dim).collect();
    s.push(dim - patch);
    s.dedup();
    s
}

/// Averaged heart probability on the working grid from overlapping patches.
pub fn heart_probability(model: &mut HeartSegModel, working: &Volume, stride: [usize; 3]) -> Result<Volume> {
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let patch = model.config.patch;
    let dims = working.grid.dims;
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let norm: Vec<f64> = working.data.iter().map(|&h| model.normalize(h)).collect();
    let pad = model.normalize(-1000.0);
    let mut sum = vec![0.0; padded.iter().product()];
    let mut count = vec![0u32; sum.len()];
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(padded[a], patch[a], stride[a]));
    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                let p = extract_patch(&norm, dims, [sx as i64, sy as i64, sz as i64], patch, pad);
                let prob = model.predict_patch(&p);
                let mut i = 0;
                for z in 0..patch[2] {
                    for y in 0..patch[1] {
                        for x in 0..patch[0] {
                            let j = (sx + x) + padded[0] * ((sy + y) + padded[1] * (sz + z));
                            sum[j] += prob[i];
                            count[j] += 1;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    let mut out = Volume::filled(working.grid, 0.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let j = x + padded[0] * (y + padded[1] * z);
                out.set(x, y, z, sum[j] / count[j].max(1) as f64);
            }
        }
    }
    Ok(out)
}

/// Segment the heart in `v` (any resolution); the mask is returned on `v`'s
/// grid.
pub fn segment_heart(model: &mut HeartSegModel, v: &Volume) -> Result<BinaryMask> {
    let stride = model.config.stride;
    segment_heart_with_stride(model, v, stride)
}

pub fn segment_heart_with_stride(model: &mut HeartSegModel, v: &Volume, stride: [usize; 3]) -> Result<BinaryMask> {
    let working = resample(v, model.config.working_spacing_mm, Interpolation::Linear)?;
    let prob = heart_probability(model, &working, stride)?;
    let back = resample_onto(&prob, &v.grid, Interpolation::Linear);
    let fg: Vec<bool> = back.data.iter().map(|&p| p >= model.config.threshold).collect();
    let keep = largest_component(&fg, v.grid.dims, Connectivity::TwentySix);
    BinaryMask::new(v.grid, keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    /// Symmetric Hausdorff distance between surfaces; undefined for an empty
    /// prediction.
    pub hausdorff_mm: Option<f64>,
    /// Mean distance from prediction surface voxels to the reference surface.
    pub masd_mm: Option<f64>,
}

fn surface(m: &BinaryMask) -> Vec<[f64; 3]> {
    let g: Grid = m.grid;
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !m.get(x - 1, y, z)
                    || !m.get(x + 1, y, z)
                    || !m.get(x, y - 1, z)
                    || !m.get(x, y + 1, z)
                    || !m.get(x, y, z - 1)
                    || !m.get(x, y, z + 1);
                if edge {
                    out.push(g.position(x as f64, y as f64, z as f64));
                }
            }
        }
    }
    out
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

pub fn seg_metrics(pred: &BinaryMask, reference: &BinaryMask) -> Result<SegMetrics> {
    pred.grid.check_same(&reference.grid, "prediction vs reference")?;
    let nr = reference.count();
    if nr == 0 {
        return Err(Error::EmptyMask);
    }
    let np = pred.count();
    let inter = pred.data.iter().zip(&reference.data).filter(|(a, b)| **a && **b).count();
    let dice = 2.0 * inter as f64 / (np + nr) as f64;
    if np == 0 {
        return Ok(SegMetrics {
            dice,
            hausdorff_mm: None,
            masd_mm: None,
        });
    }
    let sp = surface(pred);
    let sr = surface(reference);
    let d_pr = directed(&sp, &sr);
    let d_rp = directed(&sr, &sp);
    let hd = d_pr.iter().chain(&d_rp).fold(0.0f64, |a, &b| a.max(b));
    let masd = d_pr.iter().sum::<f64>() / d_pr.len() as f64;
    Ok(SegMetrics {
        dice,
        hausdorff_mm: Some(hd),
        masd_mm: Some(masd),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> HeartSegConfig {
        let mut c = HeartSegConfig::desk();
        c.net.width = 2;
        c.net.blocks = 1;
        c.net.first_kernel = 3;
        c.last_kernel = 3;
        c.patch = [8, 8, 4];
        c.stride = [4, 4, 4];
        c
    }

    fn cube(grid: Grid, lo: [usize; 3], hi: [usize; 3]) -> BinaryMask {
        let mut m = BinaryMask::empty(grid);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let i = grid.index(x, y, z);
                    m.data[i] = true;
                }
            }
        }
        m
    }

    #[test]
    fn output_grid_and_range() {
        let mut m = HeartSegModel::new(tiny_config()).unwrap();
        let x = Tensor::new(vec![1, 1, 4, 8, 8], (0..256).map(|i| ((i * 37 % 19) as f64 / 9.0) - 1.0).collect());
        let y = m.forward(x, true);
        assert_eq!(y.shape, vec![1, 2, 4, 8, 8]);
        assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_patch_and_empty_dataset() {
        let mut c = tiny_config();
        c.patch = [6, 8, 4];
        assert!(HeartSegModel::new(c).is_err());
        assert!(train_heartseg(&[], tiny_config()).is_err());
    }

    #[test]
    fn sampler_share() {
        let n = (0..100).filter(|&k| heart_centred_sample(k, 0.5)).count();
        assert_eq!(n, 50);
        for k in 1..40 {
            let m = (0..k).filter(|&j| heart_centred_sample(j, 0.3)).count();
            assert!(m as f64 >= (k as f64 * 0.3).floor());
        }
    }

    #[test]
    fn patch_extraction_pads() {
        let d: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let p = extract_patch(&d, [2, 2, 2], [-1, 0, 0], [2, 1, 1], -9.0);
        assert_eq!(p, vec![-9.0, 0.0]);
    }

    #[test]
    fn tiles_cover() {
        assert_eq!(tile_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(tile_starts(4, 4, 2), vec![0]);
        assert_eq!(tile_starts(3, 4, 2), vec![0]);
    }

    #[test]
    fn metrics_identical_and_disjoint() {
        let g = Grid::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let a = cube(g, [2, 2, 2], [6, 6, 6]);
        let m = seg_metrics(&a, &a).unwrap();
        assert_eq!((m.dice, m.hausdorff_mm, m.masd_mm), (1.0, Some(0.0), Some(0.0)));
        let b = cube(g, [7, 7, 7], [9, 9, 9]);
        assert_eq!(seg_metrics(&a, &b).unwrap().dice, 0.0);
        assert!(seg_metrics(&a, &BinaryMask::empty(g)).is_err());
    }

    #[test]
    fn offset_cubes_hausdorff() {
        let g = Grid::new([12, 8, 8], [1.5; 3], [0.0; 3]).unwrap();
        let a = cube(g, [2, 2, 2], [6, 6, 6]);
        let b = cube(g, [4, 2, 2], [8, 6, 6]);
        let m = seg_metrics(&a, &b).unwrap();
        assert!((m.hausdorff_mm.unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(m.dice, 0.5);
        let r = seg_metrics(&b, &a).unwrap();
        assert_eq!(r.dice, m.dice);
        assert_eq!(r.hausdorff_mm, m.hausdorff_mm);
    }

    #[test]
    fn masd_asymmetric() {
        let g = Grid::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let big = cube(g, [1, 1, 1], [11, 11, 11]);
        let small = cube(g, [5, 5, 5], [7, 7, 7]);
        let a = seg_metrics(&small, &big).unwrap().masd_mm.unwrap();
        let b = seg_metrics(&big, &small).unwrap().masd_mm.unwrap();
        assert!((a - b).abs() > 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = HeartSegModel::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hs.json");
        m.save(&path).unwrap();
        let mut l = HeartSegModel::load(&path).unwrap();
        let x: Vec<f64> = (0..256).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(m.predict_patch(&x), l.predict_patch(&x));
    }
}
