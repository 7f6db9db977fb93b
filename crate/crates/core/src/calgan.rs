//! CycleGAN that splits an axial slice into a calcium-free image and a
//! non-negative calcium map.
//!
//! `G_R` predicts the map of a calcified slice (`noCAC = CAC - G_R(CAC)`),
//! `G_S` predicts a map that adds calcium to a clean slice
//! (`CAC = noCAC + G_S(noCAC)`). Two PatchGAN discriminators judge each
//! domain.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::gaussian_blur_2d;
use crate::nn::layers::{apply_act, Act, Conv, ConvUnit, Decoder, Dim, Encoder, Norm, NormKind, ResNetSpec};
use crate::nn::{self, Adam, CheckpointManifest, Graph, Init, NetworkEntry, PadMode, ParamStore, Tensor, Var};
use crate::volume::{center_of_mass, BinaryMask, HuWindow, NormalizedSlice, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Log-likelihood form with the non-saturating generator objective.
    Log,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub width: usize,
    /// Stride of each hidden layer; channels double per layer up to 8x width.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
    pub norm: NormKind,
    pub init: Init,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            width: 64,
            strides: vec![2, 2, 2, 1],
            kernel: 4,
            slope: 0.2,
            norm: NormKind::Instance,
            init: Init::Normal(0.02),
        }
    }
}

impl DiscriminatorSpec {
    /// Receptive field of one output response in pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = self.kernel;
        for s in self.strides.iter().rev() {
            rf = (rf - 1) * s + self.kernel;
        }
        rf
    }

    fn output_side(&self, side: usize) -> Option<usize> {
        let mut n = side;
        for &s in self.strides.iter().chain(std::iter::once(&1)) {
            let padded = n + 2;
            if padded < self.kernel {
                return None;
            }
            n = (padded - self.kernel) / s + 1;
        }
        Some(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Smooth,
    Amplify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub generator: ResNetSpec,
    pub last_kernel: usize,
    /// Initial pre-sigmoid bias of the generator output layer.
    pub output_bias_init: f64,
    pub discriminator: DiscriminatorSpec,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub batch_size: usize,
    pub iterations: usize,
    pub adversarial: AdversarialLoss,
    pub crop_side: usize,
    pub window: HuWindow,
    pub noise_augment: bool,
    pub noise_sigma_px: f64,
    pub jitter_px: f64,
    pub rotation_deg: f64,
    pub position_bins: usize,
    pub log_every: usize,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            generator: ResNetSpec {
                dim: Dim::Two,
                in_channels: 1,
                width: 64,
                blocks: 6,
                first_kernel: 7,
                pad_mode: PadMode::Reflect,
                norm: NormKind::Batch,
                init: Init::Normal(0.02),
            },
            last_kernel: 7,
            output_bias_init: 0.0,
            discriminator: DiscriminatorSpec::default(),
            lambda: 10.0,
            alpha: 10.0,
            beta: 0.001,
            lr: 1e-4,
            adam_betas: [0.5, 0.999],
            batch_size: 4,
            iterations: 375_000,
            adversarial: AdversarialLoss::Log,
            crop_side: 224,
            window: HuWindow::default(),
            noise_augment: true,
            noise_sigma_px: 0.5,
            jitter_px: 16.0,
            rotation_deg: 10.0,
            position_bins: 3,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.generator.width = 8;
        c.generator.blocks = 3;
        c.discriminator.width = 8;
        c.crop_side = 32;
        c.jitter_px = 2.0;
        c.iterations = 800;
        c.log_every = 50;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.generator.dim != Dim::Two || self.generator.in_channels != 1 {
            return Err(Error::InvalidArgument("generators must be single-channel 2D networks".into()));
        }
        if self.crop_side % 4 != 0 || self.crop_side < 4 {
            return Err(Error::InvalidArgument(format!("crop side {} must be a multiple of 4", self.crop_side)));
        }
        if self.discriminator.output_side(self.crop_side).is_none_or(|n| n == 0) {
            return Err(Error::InvalidArgument(format!("discriminator leaves no output for a {} px crop", self.crop_side)));
        }
        if self.batch_size == 0 || self.position_bins == 0 {
            return Err(Error::InvalidArgument("batch_size and position_bins must be positive".into()));
        }
        Ok(())
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "generator": self.generator,
            "last_kernel": self.last_kernel,
            "discriminator": self.discriminator,
            "crop_side": self.crop_side,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    ps: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl Generator {
    fn new(spec: &ResNetSpec, last_kernel: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, spec, rng);
        let dec = Decoder::new(&mut ps, spec, 1, last_kernel, rng);
        if let Some(b) = dec.output_bias() {
            ps.get_mut(b).data.iter_mut().for_each(|v| *v = bias);
        }
        Self { ps, enc, dec }
    }

    /// Sigmoid map of a `[N, 1, 1, H, W]` batch.
    fn map(&mut self, g: &mut Graph, x: Var, train: bool) -> Var {
        let y = self.enc.forward(g, &mut self.ps, x, train);
        let y = self.dec.forward(g, &mut self.ps, y, train);
        g.sigmoid(y)
    }

    /// Evaluate on a batch without building gradients for later use.
    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        let mut g = Graph::new();
        let x = g.input(x);
        let m = self.map(&mut g, x, train);
        g.value(m).clone()
    }

    /// Make the output the constant `c` in (0, 1) for every input.
    pub fn set_constant_output(&mut self, c: f64) {
        let w = self.dec.output_weight();
        self.ps.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = self.dec.output_bias() {
            let logit = (c / (1.0 - c)).ln();
            self.ps.get_mut(b).data.iter_mut().for_each(|v| *v = logit);
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.ps
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    ps: ParamStore,
    units: Vec<ConvUnit>,
    out: Conv,
}

impl PatchDiscriminator {
    fn new(spec: &DiscriminatorSpec, rng: &mut impl Rng) -> Self {
        let mut ps = ParamStore::new();
        let mut units = Vec::new();
        let mut cin = 1;
        for (i, &s) in spec.strides.iter().enumerate() {
            let cout = spec.width << i.min(3);
            let norm = if i == 0 { NormKind::None } else { spec.norm };
            let name = format!("layer{i}");
            units.push(ConvUnit {
                conv: Conv::new(&mut ps, &name, Dim::Two, cin, cout, spec.kernel, s, (1, 1), PadMode::Zero, norm == NormKind::None, spec.init, rng),
                norm: Norm::new(&mut ps, &format!("{name}.norm"), norm, cout),
                act: Act::LeakyRelu(spec.slope),
            });
            cin = cout;
        }
        let out = Conv::new(&mut ps, "out", Dim::Two, cin, 1, spec.kernel, 1, (1, 1), PadMode::Zero, true, spec.init, rng);
        Self { ps, units, out }
    }

    /// Mean patch response per image, `[N, 1]`.
    fn score(&mut self, g: &mut Graph, x: Var) -> Var {
        let mut y = x;
        for u in &self.units {
            let c = u.conv.forward(g, &self.ps, y);
            let n = u.norm.forward(g, &mut self.ps, c, true);
            y = apply_act(g, n, u.act);
        }
        let y = self.out.forward(g, &self.ps, y);
        g.global_avg_pool(y)
    }

    /// Make every response the constant logit `z`.
    pub fn set_constant_logit(&mut self, z: f64) {
        let w = self.out.weight_index();
        self.ps.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = self.out.bias_index() {
            self.ps.get_mut(b).data.iter_mut().for_each(|v| *v = z);
        }
    }
}

/// Loss components of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub adv: f64,
    pub cyc: f64,
    pub id: f64,
    pub sp: f64,
    pub total: f64,
}

impl GanLosses {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.cyc, self.id, self.sp, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub generator: GanLosses,
    pub discriminator: f64,
}

struct LossVars {
    adv: Var,
    cyc: Var,
    id: Var,
    sp: Var,
    total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Cac,
    NoCac,
}

/// The two generators and two discriminators.
#[derive(Debug, Clone)]
pub struct CycleGan {
    pub config: GanTrainConfig,
    pub iterations: u64,
    pub history: Vec<IterationLog>,
    pub g_r: Generator,
    pub g_s: Generator,
    pub d_cac: PatchDiscriminator,
    pub d_nocac: PatchDiscriminator,
}

/// Non-negative calcium map in window units.
#[derive(Debug, Clone, PartialEq)]
pub struct CacMap {
    pub data: Vec<f64>,
    pub side: usize,
    pub window: HuWindow,
}

impl CacMap {
    /// Attenuation attributed to calcium, in HU.
    pub fn attenuation_hu(&self) -> Vec<f64> {
        self.data.iter().map(|&u| self.window.units_to_attenuation(u)).collect()
    }
}

fn adversarial(g: &mut Graph, score: Var, real: bool, kind: AdversarialLoss) -> Var {
    let t = if real { 1.0 } else { 0.0 };
    match kind {
        AdversarialLoss::Log => g.bce_logits(score, t),
        AdversarialLoss::LeastSquares => g.mse_const(score, t),
    }
}

impl CycleGan {
    pub fn new(config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g_r = Generator::new(&config.generator, config.last_kernel, config.output_bias_init, &mut rng);
        let g_s = Generator::new(&config.generator, config.last_kernel, config.output_bias_init, &mut rng);
        let d_cac = PatchDiscriminator::new(&config.discriminator, &mut rng);
        let d_nocac = PatchDiscriminator::new(&config.discriminator, &mut rng);
        Ok(Self {
            config,
            iterations: 0,
            history: Vec::new(),
            g_r,
            g_s,
            d_cac,
            d_nocac,
        })
    }

    fn batch_tensor(&self, batch: &[&[f64]]) -> Result<Tensor> {
        let side = self.config.crop_side;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(b) = batch.iter().find(|b| b.len() != side * side) {
            return Err(Error::Shape(format!("slice of {} pixels, expected {side}x{side}", b.len())));
        }
        Ok(Tensor::stack(batch, [1, 1, side, side]))
    }

    fn generator_objective(&mut self, g: &mut Graph, cac: Tensor, nocac: Tensor, train: bool) -> (LossVars, Var, Var) {
        let kind = self.config.adversarial;
        let xc = g.input(cac);
        let xn = g.input(nocac);

        let map_c = self.g_r.map(g, xc, train);
        let fake_n = g.sub(xc, map_c);
        let map_fn = self.g_s.map(g, fake_n, train);
        let rec_c = g.add(fake_n, map_fn);

        let map_n = self.g_s.map(g, xn, train);
        let fake_c = g.add(xn, map_n);
        let map_fc = self.g_r.map(g, fake_c, train);
        let rec_n = g.sub(fake_c, map_fc);

        let dc = g.sub(rec_c, xc);
        let dn = g.sub(rec_n, xn);
        let c1 = g.abs_mean(dc);
        let c2 = g.abs_mean(dn);
        let cyc = g.add(c1, c2);

        let id_r = self.g_r.map(g, xn, train);
        let id_s = self.g_s.map(g, xc, train);
        let i1 = g.abs_mean(id_r);
        let i2 = g.abs_mean(id_s);
        let id = g.add(i1, i2);

        let s1 = g.abs_mean(map_c);
        let s2 = g.abs_mean(map_n);
        let sp = g.add(s1, s2);

        let sn = self.d_nocac.score(g, fake_n);
        let sc = self.d_cac.score(g, fake_c);
        let a1 = adversarial(g, sn, true, kind);
        let a2 = adversarial(g, sc, true, kind);
        let adv = g.add(a1, a2);

        let wc = g.scale(cyc, self.config.lambda);
        let wi = g.scale(id, self.config.alpha);
        let ws = g.scale(sp, self.config.beta);
        let t = g.add(adv, wc);
        let t = g.add(t, wi);
        let total = g.add(t, ws);
        (LossVars { adv, cyc, id, sp, total }, fake_n, fake_c)
    }

    /// Generator loss components on one batch per domain.
    pub fn gan_losses(&mut self, cac: &[&[f64]], nocac: &[&[f64]], train: bool) -> Result<GanLosses> {
        let c = self.batch_tensor(cac)?;
        let n = self.batch_tensor(nocac)?;
        let mut g = Graph::new();
        let (l, _, _) = self.generator_objective(&mut g, c, n, train);
        Ok(read_losses(&g, &l))
    }

    /// Generator losses with the gradient of the total stored in both
    /// generators' parameter stores (previous gradients are cleared).
    pub fn generator_gradients(&mut self, cac: &[&[f64]], nocac: &[&[f64]]) -> Result<GanLosses> {
        let c = self.batch_tensor(cac)?;
        let n = self.batch_tensor(nocac)?;
        let mut g = Graph::new();
        let (l, _, _) = self.generator_objective(&mut g, c, n, true);
        let grads = g.backward(l.total);
        self.g_r.ps.zero_grad();
        self.g_s.ps.zero_grad();
        self.g_r.ps.accumulate(&g, &grads);
        self.g_s.ps.accumulate(&g, &grads);
        Ok(read_losses(&g, &l))
    }

    fn discriminator_loss(&mut self, g: &mut Graph, real_c: Tensor, fake_c: Tensor, real_n: Tensor, fake_n: Tensor) -> Var {
        let kind = self.config.adversarial;
        let mut terms = Vec::new();
        for (d, real, fake) in [(&mut self.d_cac, real_c, fake_c), (&mut self.d_nocac, real_n, fake_n)] {
            let r = g.input(real);
            let f = g.input(fake);
            let sr = d.score(g, r);
            let sf = d.score(g, f);
            terms.push(adversarial(g, sr, true, kind));
            terms.push(adversarial(g, sf, false, kind));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        g.scale(total, 0.5)
    }

    /// `(map, input - map)` for one slice with `G_R` in inference mode.
    pub fn decompose(&mut self, s: &NormalizedSlice) -> Result<(CacMap, NormalizedSlice)> {
        let x = self.batch_tensor(&[&s.data])?;
        let m = self.g_r.forward(x, false);
        let synthetic = NormalizedSlice {
            data: s.data.iter().zip(&m.data).map(|(a, b)| a - b).collect(),
            ..s.clone()
        };
        Ok((
            CacMap {
                data: m.data,
                side: s.side,
                window: s.window,
            },
            synthetic,
        ))
    }

    /// `input + G_S(input)`.
    pub fn synthesize(&mut self, s: &NormalizedSlice) -> Result<NormalizedSlice> {
        let x = self.batch_tensor(&[&s.data])?;
        let m = self.g_s.forward(x, false);
        Ok(NormalizedSlice {
            data: s.data.iter().zip(&m.data).map(|(a, b)| a + b).collect(),
            ..s.clone()
        })
    }

    /// Mean patch logit of a discriminator for one slice.
    pub fn discriminator_score(&mut self, domain: Domain, s: &NormalizedSlice) -> Result<f64> {
        let x = self.batch_tensor(&[&s.data])?;
        let mut g = Graph::new();
        let x = g.input(x);
        let d = match domain {
            Domain::Cac => &mut self.d_cac,
            Domain::NoCac => &mut self.d_nocac,
        };
        let s = d.score(&mut g, x);
        Ok(g.value(s).data[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let nets = [
            ("g_r", &self.g_r.ps),
            ("g_s", &self.g_s.ps),
            ("d_cac", &self.d_cac.ps),
            ("d_nocac", &self.d_nocac.ps),
        ];
        let manifest = CheckpointManifest {
            kind: "cyclegan".into(),
            architecture: self.config.architecture(),
            architecture_hash: nn::config_hash(&self.config.architecture()),
            working_spacing_mm: None,
            iterations: self.iterations,
            networks: nets
                .iter()
                .map(|(n, ps)| NetworkEntry {
                    name: (*n).into(),
                    params: ps.shapes(),
                })
                .collect(),
            extra: serde_json::to_value(&self.config)?,
        };
        let stores: Vec<&ParamStore> = nets.iter().map(|n| n.1).collect();
        nn::save_checkpoint(path, &manifest, &stores)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = nn::read_manifest(path)?;
        if manifest.kind != "cyclegan" {
            return Err(Error::Checkpoint(format!("expected a cyclegan checkpoint, found {}", manifest.kind)));
        }
        let config: GanTrainConfig = serde_json::from_value(manifest.extra)?;
        if nn::config_hash(&config.architecture()) != manifest.architecture_hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        let mut gan = Self::new(config)?;
        nn::load_blob_into(
            path,
            &mut [&mut gan.g_r.ps, &mut gan.g_s.ps, &mut gan.d_cac.ps, &mut gan.d_nocac.ps],
        )?;
        gan.iterations = manifest.iterations;
        Ok(gan)
    }
}

fn read_losses(g: &Graph, l: &LossVars) -> GanLosses {
    GanLosses {
        adv: g.value(l.adv).item(),
        cyc: g.value(l.cyc).item(),
        id: g.value(l.id).item(),
        sp: g.value(l.sp).item(),
        total: g.value(l.total).item(),
    }
}

/// Smooth with a Gaussian, or add back the residual of that smoothing;
/// results are clipped to `[0, 1]`.
pub fn noise_augment_data(data: &[f64], side: usize, mode: NoiseMode, sigma: f64) -> Vec<f64> {
    let smooth = gaussian_blur_2d(data, side, side, sigma);
    match mode {
        NoiseMode::Smooth => smooth.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        NoiseMode::Amplify => data.iter().zip(&smooth).map(|(s, b)| (s + (s - b)).clamp(0.0, 1.0)).collect(),
    }
}

pub fn noise_augment(s: &NormalizedSlice, mode: NoiseMode, sigma: f64) -> NormalizedSlice {
    NormalizedSlice {
        data: noise_augment_data(&s.data, s.side, mode, sigma),
        ..s.clone()
    }
}

/// One axial training slice in HU with its heart-centred crop point.
#[derive(Debug, Clone, PartialEq)]
pub struct GanSlice {
    pub hu: Vec<f64>,
    pub width: usize,
    pub height: usize,
    /// Crop centre in pixel coordinates.
    pub center: [f64; 2],
    pub cac: bool,
    /// Relative position between the lowest and highest heart slice.
    pub position: f64,
    pub slice_index: usize,
}

/// Heart slices of a volume labelled with per-slice calcium flags.
pub fn gan_slices(v: &Volume, heart: &BinaryMask, flags: &[bool]) -> Result<Vec<GanSlice>> {
    heart.grid.check_same(&v.grid, "image vs heart mask")?;
    if flags.len() != v.grid.dims[2] {
        return Err(Error::InvalidArgument(format!("{} flags for {} slices", flags.len(), v.grid.dims[2])));
    }
    let com = center_of_mass(heart)?;
    let (lo, hi) = heart.slice_range().ok_or(Error::EmptyMask)?;
    let [nx, ny, _] = v.grid.dims;
    Ok((lo..=hi)
        .filter(|&z| heart.slice_has_foreground(z))
        .map(|z| GanSlice {
            hu: v.slice(z).to_vec(),
            width: nx,
            height: ny,
            center: [com[0], com[1]],
            cac: flags[z],
            position: if hi > lo { (z - lo) as f64 / (hi - lo) as f64 } else { 0.0 },
            slice_index: z,
        })
        .collect())
}

/// Rotated square crop sampled bilinearly; outside pixels read as 0 HU.
pub fn crop_rotated(s: &GanSlice, center: [f64; 2], side: usize, angle_rad: f64, window: HuWindow) -> Vec<f64> {
    let (sin, cos) = angle_rad.sin_cos();
    let half = (side / 2) as f64;
    let c = [center[0].round(), center[1].round()];
    let at = |x: i64, y: i64| -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < s.width && (y as usize) < s.height {
            s.hu[x as usize + s.width * y as usize]
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(side * side);
    for v in 0..side {
        for u in 0..side {
            let (dx, dy) = (u as f64 - half, v as f64 - half);
            let x = c[0] + cos * dx - sin * dy + (center[0] - c[0]);
            let y = c[1] + sin * dx + cos * dy + (center[1] - c[1]);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (xi, yi) = (x0 as i64, y0 as i64);
            let hu = at(xi, yi) * (1.0 - fx) * (1.0 - fy)
                + at(xi + 1, yi) * fx * (1.0 - fy)
                + at(xi, yi + 1) * (1.0 - fx) * fy
                + at(xi + 1, yi + 1) * fx * fy;
            out.push(window.to_unit(hu));
        }
    }
    out
}

pub fn position_bin(position: f64, bins: usize) -> usize {
    ((position.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

struct Sampler<'a> {
    slices: &'a [GanSlice],
    /// Per domain (CAC, noCAC), per bin, slice indices.
    bins: [Vec<Vec<usize>>; 2],
    all: [Vec<usize>; 2],
}

impl<'a> Sampler<'a> {
    fn new(slices: &'a [GanSlice], nbins: usize) -> Result<Self> {
        let mut bins = [vec![Vec::new(); nbins], vec![Vec::new(); nbins]];
        let mut all = [Vec::new(), Vec::new()];
        for (i, s) in slices.iter().enumerate() {
            let d = if s.cac { 0 } else { 1 };
            bins[d][position_bin(s.position, nbins)].push(i);
            all[d].push(i);
        }
        for (d, name) in [(0, "CAC"), (1, "noCAC")] {
            if all[d].is_empty() {
                return Err(Error::Dataset(format!("no {name} slices for CycleGAN training")));
            }
            for (b, members) in bins[d].iter().enumerate() {
                if members.is_empty() {
                    warn!("{name} domain has no slices in position bin {b}; drawing from all positions");
                }
            }
        }
        Ok(Self { slices, bins, all })
    }

    fn draw(&self, domain: usize, bin: usize, rng: &mut impl Rng) -> &'a GanSlice {
        let pool = if self.bins[domain][bin].is_empty() { &self.all[domain] } else { &self.bins[domain][bin] };
        &self.slices[pool[rng.random_range(0..pool.len())]]
    }
}

fn augment(s: &GanSlice, cfg: &GanTrainConfig, rng: &mut impl Rng) -> Vec<f64> {
    let j = cfg.jitter_px;
    let centre = if j > 0.0 {
        [s.center[0] + rng.random_range(-j..=j), s.center[1] + rng.random_range(-j..=j)]
    } else {
        s.center
    };
    let r = cfg.rotation_deg;
    let angle = if r > 0.0 { rng.random_range(-r..=r).to_radians() } else { 0.0 };
    let crop = crop_rotated(s, centre, cfg.crop_side, angle, cfg.window);
    if !cfg.noise_augment {
        return crop;
    }
    match rng.random_range(0..3) {
        0 => crop,
        1 => noise_augment_data(&crop, cfg.crop_side, NoiseMode::Smooth, cfg.noise_sigma_px),
        _ => noise_augment_data(&crop, cfg.crop_side, NoiseMode::Amplify, cfg.noise_sigma_px),
    }
}

pub fn train_cyclegan(slices: &[GanSlice], config: GanTrainConfig) -> Result<CycleGan> {
    train_cyclegan_with_checkpoints(slices, config, None)
}

/// Train all four networks. Each iteration updates both discriminators on
/// the latest synthetic images, then both generators.
pub fn train_cyclegan_with_checkpoints(slices: &[GanSlice], config: GanTrainConfig, checkpoint_dir: Option<&Path>) -> Result<CycleGan> {
    let mut gan = CycleGan::new(config)?;
    let cfg = gan.config.clone();
    let sampler = Sampler::new(slices, cfg.position_bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6761_6e73);
    let [b1, b2] = cfg.adam_betas;
    let mut opt_gr = Adam::new(cfg.lr, b1, b2);
    let mut opt_gs = Adam::new(cfg.lr, b1, b2);
    let mut opt_dc = Adam::new(cfg.lr, b1, b2);
    let mut opt_dn = Adam::new(cfg.lr, b1, b2);
    let n = cfg.batch_size;
    let mut fakes: Option<(Tensor, Tensor)> = None;
    let mut k = 0usize;
    for it in 0..cfg.iterations {
        let mut cac = Vec::with_capacity(n);
        let mut nocac = Vec::with_capacity(n);
        for _ in 0..n {
            let bin = k % cfg.position_bins;
            k += 1;
            cac.push(augment(sampler.draw(0, bin, &mut rng), &cfg, &mut rng));
            nocac.push(augment(sampler.draw(1, bin, &mut rng), &cfg, &mut rng));
        }
        let cac_refs: Vec<&[f64]> = cac.iter().map(|v| v.as_slice()).collect();
        let nocac_refs: Vec<&[f64]> = nocac.iter().map(|v| v.as_slice()).collect();
        let xc = gan.batch_tensor(&cac_refs)?;
        let xn = gan.batch_tensor(&nocac_refs)?;

        let (fake_c, fake_n) = match fakes.take() {
            Some(f) => f,
            None => {
                let mut g = Graph::new();
                let (_, fnv, fcv) = gan.generator_objective(&mut g, xc.clone(), xn.clone(), true);
                (g.value(fcv).clone(), g.value(fnv).clone())
            }
        };
        let mut g = Graph::new();
        let d_loss = gan.discriminator_loss(&mut g, xc.clone(), fake_c, xn.clone(), fake_n);
        let d_value = g.value(d_loss).item();
        let grads = g.backward(d_loss);
        gan.d_cac.ps.accumulate(&g, &grads);
        gan.d_nocac.ps.accumulate(&g, &grads);
        opt_dc.step(&mut gan.d_cac.ps);
        opt_dn.step(&mut gan.d_nocac.ps);

        let mut g = Graph::new();
        let (l, fnv, fcv) = gan.generator_objective(&mut g, xc, xn, true);
        let losses = read_losses(&g, &l);
        let grads = g.backward(l.total);
        gan.g_r.ps.accumulate(&g, &grads);
        gan.g_s.ps.accumulate(&g, &grads);
        opt_gr.step(&mut gan.g_r.ps);
        opt_gs.step(&mut gan.g_s.ps);
        gan.d_cac.ps.zero_grad();
        gan.d_nocac.ps.zero_grad();
        fakes = Some((g.value(fcv).clone(), g.value(fnv).clone()));

        gan.iterations += 1;
        gan.history.push(IterationLog {
            generator: losses,
            discriminator: d_value,
        });
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let w = &gan.history[gan.history.len() - cfg.log_every..];
            let m = |f: fn(&IterationLog) -> f64| w.iter().map(f).sum::<f64>() / w.len() as f64;
            info!(
                "cyclegan iteration {}: adv {:.4} cyc {:.4} id {:.4} sp {:.4} total {:.4} disc {:.4}",
                it + 1,
                m(|l| l.generator.adv),
                m(|l| l.generator.cyc),
                m(|l| l.generator.id),
                m(|l| l.generator.sp),
                m(|l| l.generator.total),
                m(|l| l.discriminator)
            );
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                gan.save(&dir.join(format!("cyclegan_{:06}.json", it + 1)))?;
            }
        }
    }
    Ok(gan)
}
