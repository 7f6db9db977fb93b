//! Layers and the ResNet encoder/decoder shared by the three networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, PadMode, Var};
use super::params::{init_tensor, Init, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl Dim {
    pub fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Dim::Two => [1, k, k],
            Dim::Three => [k, k, k],
        }
    }

    pub fn stride(self, s: usize) -> [usize; 3] {
        match self {
            Dim::Two => [1, s, s],
            Dim::Three => [s, s, s],
        }
    }

    pub fn pads(self, before: usize, after: usize) -> [(usize, usize); 3] {
        match self {
            Dim::Two => [(0, 0), (before, after), (before, after)],
            Dim::Three => [(before, after); 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
    None,
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    stride: [usize; 3],
    pads: [(usize, usize); 3],
    pad_mode: PadMode,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: Dim,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: (usize, usize),
        pad_mode: PadMode,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let ks = dim.kernel(k);
        let fan_in = cin * ks.iter().product::<usize>();
        let w = ps.add(
            format!("{name}.weight"),
            init_tensor(&[cout, cin, ks[0], ks[1], ks[2]], fan_in, init, rng),
            true,
        );
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self {
            w,
            b,
            stride: dim.stride(stride),
            pads: dim.pads(pad.0, pad.1),
            pad_mode,
        }
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.b
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let x = g.pad(x, self.pads, self.pad_mode);
        let w = ps.var(g, self.w);
        let b = self.b.map(|b| ps.var(g, b));
        g.conv(x, w, b, self.stride)
    }
}

/// Transposed convolution producing exactly `stride * input` voxels per
/// axis (kernel 3, padding 1, output padding 1).
#[derive(Debug, Clone)]
pub struct UpConv {
    w: usize,
    b: Option<usize>,
    dim: Dim,
    stride: usize,
}

impl UpConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(ps: &mut ParamStore, name: &str, dim: Dim, cin: usize, cout: usize, stride: usize, bias: bool, init: Init, rng: &mut impl Rng) -> Self {
        let ks = dim.kernel(3);
        let fan_in = cin * ks.iter().product::<usize>();
        let w = ps.add(
            format!("{name}.weight"),
            init_tensor(&[cin, cout, ks[0], ks[1], ks[2]], fan_in, init, rng),
            true,
        );
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self { w, b, dim, stride }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let [_, _, d, h, w] = g.value(x).dims5();
        let wv = ps.var(g, self.w);
        let b = self.b.map(|b| ps.var(g, b));
        let y = g.conv_transpose(x, wv, b, self.dim.stride(self.stride));
        let s = self.stride;
        let (start, size) = match self.dim {
            Dim::Two => ([0, 1, 1], [d, h * s, w * s]),
            Dim::Three => ([1, 1, 1], [d * s, h * s, w * s]),
        };
        g.crop(y, start, size)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    kind: NormKind,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    momentum: f64,
    eps: f64,
}

impl Norm {
    pub fn new(ps: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Self {
        let (gamma, beta, running_mean, running_var) = if kind == NormKind::Batch {
            (
                ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
                ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
                ps.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
                ps.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            )
        } else {
            (0, 0, 0, 0)
        };
        Self {
            kind,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        match self.kind {
            NormKind::None => x,
            NormKind::Instance => g.instance_norm(x, self.eps),
            NormKind::Batch => {
                let gamma = ps.var(g, self.gamma);
                let beta = ps.var(g, self.beta);
                if train {
                    let [n, _, d, h, w] = g.value(x).dims5();
                    let m = (n * d * h * w) as f64;
                    let (y, mean, var) = g.batch_norm(x, gamma, beta, self.eps);
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    let mo = self.momentum;
                    for (r, b) in ps.get_mut(self.running_mean).data.iter_mut().zip(&mean) {
                        *r = (1.0 - mo) * *r + mo * b;
                    }
                    for (r, b) in ps.get_mut(self.running_var).data.iter_mut().zip(&var) {
                        *r = (1.0 - mo) * *r + mo * b * unbias;
                    }
                    y
                } else {
                    let mean = ps.get(self.running_mean).data.clone();
                    let var = ps.get(self.running_var).data.clone();
                    g.batch_norm_fixed(x, gamma, beta, &mean, &var, self.eps)
                }
            }
        }
    }
}

/// Convolution followed by normalisation and an activation.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: Norm,
    pub act: Act,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl ConvUnit {
    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let y = self.conv.forward(g, ps, x);
        let y = self.norm.forward(g, ps, y, train);
        apply_act(g, y, self.act)
    }
}

pub fn apply_act(g: &mut Graph, x: Var, act: Act) -> Var {
    match act {
        Act::Relu => g.relu(x),
        Act::LeakyRelu(s) => g.leaky_relu(x, s),
        Act::Identity => x,
    }
}

#[derive(Debug, Clone)]
pub struct UpUnit {
    pub up: UpConv,
    pub norm: Norm,
}

/// Two conv/norm pairs with an identity shortcut: `x + N(C(relu(N(C(x)))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    a: ConvUnit,
    b: ConvUnit,
}

impl ResBlock {
    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let y = self.a.forward(g, ps, x, train);
        let y = self.b.forward(g, ps, y, train);
        g.add(x, y)
    }
}

/// Hyper-parameters of the ResNet-style networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub dim: Dim,
    pub in_channels: usize,
    /// Channels after the first layer; the two downsampling layers double it.
    pub width: usize,
    pub blocks: usize,
    pub first_kernel: usize,
    pub pad_mode: PadMode,
    pub norm: NormKind,
    pub init: Init,
}

/// `Conv(k) -> Conv(3, s2) -> Conv(3, s2) -> residual blocks`.
#[derive(Debug, Clone)]
pub struct Encoder {
    units: Vec<ConvUnit>,
    blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, spec: &ResNetSpec, rng: &mut impl Rng) -> Self {
        let w = spec.width;
        let p = (spec.first_kernel - 1) / 2;
        let unit = |ps: &mut ParamStore, rng: &mut _, name: &str, cin, cout, k, s, pad: usize, act| ConvUnit {
            conv: Conv::new(ps, name, spec.dim, cin, cout, k, s, (pad, pad), spec.pad_mode, spec.norm == NormKind::None, spec.init, rng),
            norm: Norm::new(ps, &format!("{name}.norm"), spec.norm, cout),
            act,
        };
        let units = vec![
            unit(ps, rng, "enc0", spec.in_channels, w, spec.first_kernel, 1, p, Act::Relu),
            unit(ps, rng, "enc1", w, 2 * w, 3, 2, 1, Act::Relu),
            unit(ps, rng, "enc2", 2 * w, 4 * w, 3, 2, 1, Act::Relu),
        ];
        let blocks = (0..spec.blocks)
            .map(|i| ResBlock {
                a: unit(ps, rng, &format!("res{i}.a"), 4 * w, 4 * w, 3, 1, 1, Act::Relu),
                b: unit(ps, rng, &format!("res{i}.b"), 4 * w, 4 * w, 3, 1, 1, Act::Identity),
            })
            .collect();
        Self { units, blocks }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let mut y = x;
        for u in &self.units {
            y = u.forward(g, ps, y, train);
        }
        for b in &self.blocks {
            y = b.forward(g, ps, y, train);
        }
        y
    }
}

/// `TConv(3, s2) -> TConv(3, s2) -> Conv(k)` back to input resolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    ups: Vec<UpUnit>,
    last: Conv,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, spec: &ResNetSpec, out_channels: usize, last_kernel: usize, rng: &mut impl Rng) -> Self {
        let w = spec.width;
        let bias = spec.norm == NormKind::None;
        let ups = vec![
            UpUnit {
                up: UpConv::new(ps, "dec0", spec.dim, 4 * w, 2 * w, 2, bias, spec.init, rng),
                norm: Norm::new(ps, "dec0.norm", spec.norm, 2 * w),
            },
            UpUnit {
                up: UpConv::new(ps, "dec1", spec.dim, 2 * w, w, 2, bias, spec.init, rng),
                norm: Norm::new(ps, "dec1.norm", spec.norm, w),
            },
        ];
        let p = (last_kernel - 1) / 2;
        let last = Conv::new(ps, "out", spec.dim, w, out_channels, last_kernel, 1, (p, p), spec.pad_mode, true, spec.init, rng);
        Self { ups, last }
    }

    pub fn output_bias(&self) -> Option<usize> {
        self.last.bias_index()
    }

    pub fn output_weight(&self) -> usize {
        self.last.weight_index()
    }

    /// Returns pre-activation logits.
    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let mut y = x;
        for u in &self.ups {
            y = u.up.forward(g, ps, y);
            y = u.norm.forward(g, ps, y, train);
            y = g.relu(y);
        }
        self.last.forward(g, ps, y)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), init_tensor(&[fout, fin], fin, init, rng), true);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[fout]), true);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        g.linear(x, w, b)
    }
}
