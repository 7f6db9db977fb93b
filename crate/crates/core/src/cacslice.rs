//! 2D classifier flagging axial heart slices with visible calcium.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::softmax_rows;
use crate::nn::layers::{Dense, Dim, Encoder, NormKind, ResNetSpec};
use crate::nn::{self, Adam, CheckpointManifest, Graph, Init, NetworkEntry, PadMode, ParamStore, Tensor, Var};
use crate::volume::{center_of_mass, normalize_slice, BinaryMask, HuWindow, NormalizedSlice, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub net: ResNetSpec,
    /// Side of the square heart-centred crop.
    pub crop_side: usize,
    pub window: HuWindow,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            net: ResNetSpec {
                dim: Dim::Two,
                in_channels: 1,
                width: 64,
                blocks: 6,
                first_kernel: 7,
                pad_mode: PadMode::Reflect,
                norm: NormKind::Batch,
                init: Init::Kaiming,
            },
            crop_side: 224,
            window: HuWindow::default(),
            lr: 1e-3,
            batch_size: 20,
            iterations: 100_000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.net.width = 8;
        c.net.blocks = 2;
        c.crop_side = 32;
        c.batch_size = 8;
        c.iterations = 300;
        c.log_every = 50;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.dim != Dim::Two || self.net.in_channels != 1 {
            return Err(Error::InvalidArgument("slice classifier needs a single-channel 2D network".into()));
        }
        if self.crop_side < 4 || self.crop_side % 4 != 0 {
            return Err(Error::InvalidArgument(format!("crop side {} must be a multiple of 4", self.crop_side)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        Ok(())
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "net": self.net, "crop_side": self.crop_side })
    }
}

#[derive(Debug, Clone)]
pub struct SliceClassifier {
    pub config: ClassifierConfig,
    pub iterations: u64,
    ps: ParamStore,
    enc: Encoder,
    head: Dense,
}

impl SliceClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, &config.net, &mut rng);
        let head = Dense::new(&mut ps, "head", 4 * config.net.width, 2, config.net.init, &mut rng);
        Ok(Self {
            config,
            iterations: 0,
            ps,
            enc,
            head,
        })
    }

    fn logits(&mut self, g: &mut Graph, x: Tensor, train: bool) -> Var {
        let x = g.input(x);
        let y = self.enc.forward(g, &mut self.ps, x, train);
        let y = g.global_avg_pool(y);
        self.head.forward(g, &self.ps, y)
    }

    fn batch(&self, slices: &[&NormalizedSlice]) -> Result<Tensor> {
        let side = self.config.crop_side;
        for s in slices {
            if s.side != side || s.data.len() != side * side {
                return Err(Error::Shape(format!("slice side {} does not match classifier crop {side}", s.side)));
            }
        }
        let data: Vec<&[f64]> = slices.iter().map(|s| s.data.as_slice()).collect();
        Ok(Tensor::stack(&data, [1, 1, side, side]))
    }

    /// Class probabilities `[p(no CAC), p(CAC)]` per slice.
    pub fn probabilities(&mut self, slices: &[&NormalizedSlice]) -> Result<Vec<[f64; 2]>> {
        if slices.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch(slices)?;
        let mut g = Graph::new();
        let l = self.logits(&mut g, x, false);
        let p = softmax_rows(&g.value(l).data, slices.len(), 2);
        Ok(p.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            kind: "classifier".into(),
            architecture: self.config.architecture(),
            architecture_hash: nn::config_hash(&self.config.architecture()),
            working_spacing_mm: None,
            iterations: self.iterations,
            networks: vec![NetworkEntry {
                name: "classifier".into(),
                params: self.ps.shapes(),
            }],
            extra: serde_json::to_value(&self.config)?,
        };
        nn::save_checkpoint(path, &manifest, &[&self.ps])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(path)?;
        if manifest.kind != "classifier" {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found {}", manifest.kind)));
        }
        let config: ClassifierConfig = serde_json::from_value(manifest.extra)?;
        if nn::config_hash(&config.architecture()) != manifest.architecture_hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        let mut model = Self::new(config)?;
        nn::load_blob_into(path, &mut [&mut model.ps])?;
        model.iterations = manifest.iterations;
        Ok(model)
    }
}

/// Train with batches drawn half from positive and half from negative
/// slices.
pub fn train_classifier(slices: &[(NormalizedSlice, bool)], config: ClassifierConfig) -> Result<SliceClassifier> {
    let mut model = SliceClassifier::new(config)?;
    let cfg = model.config.clone();
    let pos: Vec<&NormalizedSlice> = slices.iter().filter(|s| s.1).map(|s| &s.0).collect();
    let neg: Vec<&NormalizedSlice> = slices.iter().filter(|s| !s.1).map(|s| &s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Dataset(format!(
            "classifier needs both classes, got {} positive and {} negative slices",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636c_6173);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut running = 0.0;
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let positive = i % 2 == 0;
            let pool = if positive { &pos } else { &neg };
            batch.push(pool[rng.random_range(0..pool.len())]);
            labels.push(positive as usize);
        }
        let x = model.batch(&batch)?;
        let mut g = Graph::new();
        let l = model.logits(&mut g, x, true);
        let loss = g.softmax_cross_entropy(l, &labels);
        running += g.value(loss).item();
        let grads = g.backward(loss);
        model.ps.accumulate(&g, &grads);
        opt.step(&mut model.ps);
        model.iterations += 1;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            info!("classifier iteration {}: cross-entropy {:.4}", it + 1, running / cfg.log_every as f64);
            running = 0.0;
        }
    }
    Ok(model)
}

/// Argmax flag per slice.
pub fn classify_slices(model: &mut SliceClassifier, slices: &[NormalizedSlice]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(16) {
        let refs: Vec<&NormalizedSlice> = chunk.iter().collect();
        out.extend(model.probabilities(&refs)?.into_iter().map(|p| p[1] > p[0]));
    }
    Ok(out)
}

/// Heart-centred crops of every slice the mask touches.
pub fn heart_slices(v: &Volume, heart: &BinaryMask, side: usize, window: HuWindow) -> Result<Vec<NormalizedSlice>> {
    heart.grid.check_same(&v.grid, "image vs heart mask")?;
    let com = center_of_mass(heart)?;
    (0..v.grid.dims[2])
        .filter(|&z| heart.slice_has_foreground(z))
        .map(|z| normalize_slice(v, z, com, side, window))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn tiny() -> ClassifierConfig {
        let mut c = ClassifierConfig::desk();
        c.net.width = 2;
        c.net.blocks = 1;
        c.net.first_kernel = 3;
        c.crop_side = 8;
        c.batch_size = 4;
        c.iterations = 60;
        c
    }

    fn slice(data: Vec<f64>) -> NormalizedSlice {
        NormalizedSlice {
            side: 8,
            data,
            window: HuWindow::default(),
            slice_index: 0,
            crop_center: [4, 4],
        }
    }

    #[test]
    fn probabilities_on_simplex() {
        let mut m = SliceClassifier::new(tiny()).unwrap();
        let s: Vec<NormalizedSlice> = (0..5).map(|k| slice((0..64).map(|i| ((i * (k + 3)) % 11) as f64 / 10.0).collect())).collect();
        let refs: Vec<&NormalizedSlice> = s.iter().collect();
        for p in m.probabilities(&refs).unwrap() {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
        assert!(classify_slices(&mut m, &[]).unwrap().is_empty());
        assert_eq!(classify_slices(&mut m, &s).unwrap(), classify_slices(&mut m, &s).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let s = vec![(slice(vec![0.1; 64]), true)];
        assert!(train_classifier(&s, tiny()).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut m = SliceClassifier::new(tiny()).unwrap();
        let mut s = slice(vec![0.0; 64]);
        s.side = 4;
        s.data.truncate(16);
        assert!(classify_slices(&mut m, &[s]).is_err());
    }

    #[test]
    fn learns_bright_spot() {
        let mut data = Vec::new();
        for k in 0..20 {
            let mut d = vec![0.08; 64];
            let positive = k % 2 == 0;
            if positive {
                d[9 + (k % 5) * 9] = 0.5;
                d[10 + (k % 5) * 9] = 0.5;
            }
            data.push((slice(d), positive));
        }
        let mut m = train_classifier(&data, tiny()).unwrap();
        let s: Vec<NormalizedSlice> = data.iter().map(|d| d.0.clone()).collect();
        let flags = classify_slices(&mut m, &s).unwrap();
        let correct = flags.iter().zip(&data).filter(|(f, d)| **f == d.1).count();
        assert!(correct >= 18, "{correct}");
    }

    #[test]
    fn heart_slice_crops() {
        let g = Grid::new([10, 10, 4], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 40.0);
        let mut h = BinaryMask::empty(g);
        for z in 1..3 {
            h.data[g.index(5, 5, z)] = true;
        }
        let s = heart_slices(&v, &h, 8, HuWindow::default()).unwrap();
        assert_eq!(s.iter().map(|s| s.slice_index).collect::<Vec<_>>(), vec![1, 2]);
        assert!(heart_slices(&v, &BinaryMask::empty(g), 8, HuWindow::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SliceClassifier::new(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cls.json");
        m.save(&p).unwrap();
        let mut l = SliceClassifier::load(&p).unwrap();
        let s = slice((0..64).map(|i| i as f64 / 64.0).collect());
        assert_eq!(m.probabilities(&[&s]).unwrap(), l.probabilities(&[&s]).unwrap());
    }
}
