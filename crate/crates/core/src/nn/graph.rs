//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! Spatial tensors are `[N, C, D, H, W]`; 2D images use `D = 1`. A graph is
//! built for one forward pass, `backward` walks the tape in reverse, and
//! parameter gradients are pulled out by each [`ParamStore`].
//!
//! [`ParamStore`]: super::params::ParamStore

use super::kernels::{self, Geometry};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { store: u64, index: usize },
    Pad { x: Var, map: [Vec<Option<usize>>; 3] },
    Conv { x: Var, w: Var, b: Option<Var>, geom: Geometry, cout: usize },
    TConv { x: Var, w: Var, b: Option<Var>, geom: Geometry, cin: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, invstd: Vec<f64> },
    InstanceNorm { x: Var, xhat: Vec<f64>, invstd: Vec<f64> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mean(Var),
    AbsMean(Var),
    BceLogits(Var, f64),
    MseConst(Var, f64),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Dice { p: Var, target: Vec<f64>, smooth: f64 },
    SelectChannel(Var, usize),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub(crate) fn param(&mut self, store: u64, index: usize, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Param { store, index }, trainable)
    }

    /// Parameter leaves belonging to `store`: `(node, param index)`.
    pub(crate) fn param_nodes(&self, store: u64) -> impl Iterator<Item = (Var, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param { store: s, index } if s == store => Some((Var(i), index)),
            _ => None,
        })
    }

    /// Pad the three spatial axes. `pads[a] = (before, after)`.
    pub fn pad(&mut self, x: Var, pads: [(usize, usize); 3], mode: PadMode) -> Var {
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return x;
        }
        let [_, _, d, h, w] = self.value(x).dims5();
        let src = [d, h, w];
        let map: [Vec<Option<usize>>; 3] = std::array::from_fn(|a| {
            let (before, after) = pads[a];
            (0..src[a] + before + after)
                .map(|o| {
                    let i = o as isize - before as isize;
                    if i >= 0 && (i as usize) < src[a] {
                        Some(i as usize)
                    } else {
                        match mode {
                            PadMode::Zero => None,
                            PadMode::Reflect => Some(reflect(i, src[a])),
                        }
                    }
                })
                .collect()
        });
        self.remap(x, map)
    }

    /// Crop `size` voxels starting at `start` on the spatial axes.
    pub fn crop(&mut self, x: Var, start: [usize; 3], size: [usize; 3]) -> Var {
        let [_, _, d, h, w] = self.value(x).dims5();
        let src = [d, h, w];
        for a in 0..3 {
            assert!(start[a] + size[a] <= src[a], "crop out of bounds");
        }
        let map = std::array::from_fn(|a| (start[a]..start[a] + size[a]).map(Some).collect());
        self.remap(x, map)
    }

    fn remap(&mut self, x: Var, map: [Vec<Option<usize>>; 3]) -> Var {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        let (od, oh, ow) = (map[0].len(), map[1].len(), map[2].len());
        let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
        let src_plane = d * h * w;
        let dst_plane = od * oh * ow;
        for s in 0..n * c {
            let src = &xv.data[s * src_plane..(s + 1) * src_plane];
            let dst = &mut out.data[s * dst_plane..(s + 1) * dst_plane];
            for (zo, zi) in map[0].iter().enumerate() {
                let Some(zi) = zi else { continue };
                for (yo, yi) in map[1].iter().enumerate() {
                    let Some(yi) = yi else { continue };
                    for (xo, xi) in map[2].iter().enumerate() {
                        if let Some(xi) = xi {
                            dst[(zo * oh + yo) * ow + xo] = src[(zi * h + yi) * w + xi];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Pad { x, map }, ng)
    }

    /// Valid (unpadded) convolution. `w` is `[Cout, Cin, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Var {
        let [n, cin, d, h, wd] = self.value(x).dims5();
        let ws = self.value(w).shape.clone();
        assert_eq!(ws.len(), 5);
        assert_eq!(ws[1], cin, "conv input channels");
        let cout = ws[0];
        let geom = Geometry::conv(cin, [d, h, wd], [ws[2], ws[3], ws[4]], stride);
        let np = geom.npos();
        let mut out = Tensor::zeros(&[n, cout, geom.pos[0], geom.pos[1], geom.pos[2]]);
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for i in 0..n {
                let xs = &xv.data[i * cin * geom.nimg()..(i + 1) * cin * geom.nimg()];
                kernels::conv_forward(&geom, xs, &wv.data, cout, &mut out.data[i * cout * np..(i + 1) * cout * np]);
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for i in 0..n {
                    for o in 0..cout {
                        let s = &mut out.data[(i * cout + o) * np..(i * cout + o + 1) * np];
                        s.iter_mut().for_each(|v| *v += bv.data[o]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, geom, cout }, ng)
    }

    /// Full transposed convolution (output `(in - 1) * s + k`). `w` is
    /// `[Cin, Cout, kd, kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Var {
        let [n, cin, d, h, wd] = self.value(x).dims5();
        let ws = self.value(w).shape.clone();
        assert_eq!(ws[0], cin, "transposed conv input channels");
        let cout = ws[1];
        let geom = Geometry::transposed(cout, [d, h, wd], [ws[2], ws[3], ws[4]], stride);
        let ni = geom.nimg();
        let np = geom.npos();
        let mut out = Tensor::zeros(&[n, cout, geom.img[0], geom.img[1], geom.img[2]]);
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for i in 0..n {
                let xs = &xv.data[i * cin * np..(i + 1) * cin * np];
                kernels::tconv_forward(&geom, xs, &wv.data, cin, &mut out.data[i * cout * ni..(i + 1) * cout * ni]);
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for i in 0..n {
                    for o in 0..cout {
                        out.data[(i * cout + o) * ni..(i * cout + o + 1) * ni]
                            .iter_mut()
                            .for_each(|v| *v += bv.data[o]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::TConv { x, w, b, geom, cin }, ng)
    }

    /// Batch normalisation with batch statistics. Returns the output and the
    /// per-channel batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        let s = d * h * w;
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let seg = &xv.data[(i * c + ch) * s..(i * c + ch + 1) * s];
                mean[ch] += seg.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let seg = &xv.data[(i * c + ch) * s..(i * c + ch + 1) * s];
                var[ch] += seg.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros(&xv.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    let xh = (xv.data[k] - mean[ch]) * invstd[ch];
                    xhat[k] = xh;
                    out.data[k] = g[ch] * xh + b[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, invstd }, ng);
        (v, mean, var)
    }

    /// Batch normalisation with fixed statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        let s = d * h * w;
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut out = Tensor::zeros(&xv.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    out.data[k] = g[ch] * (xv.data[k] - mean[ch]) * invstd[ch] + b[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
            },
            ng,
        )
    }

    /// Per-sample, per-channel normalisation without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        let s = d * h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut invstd = vec![0.0; n * c];
        for k in 0..n * c {
            let seg = &xv.data[k * s..(k + 1) * s];
            let mean = seg.iter().sum::<f64>() / s as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[k] = is;
            for (j, v) in seg.iter().enumerate() {
                xhat[k * s + j] = (v - mean) * is;
            }
        }
        let out = Tensor::new(xv.shape.clone(), xhat.clone());
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, xhat, invstd }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let out = Tensor::new(av.shape.clone(), av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "sub shapes");
        let out = Tensor::new(av.shape.clone(), av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean absolute value over all elements (per-pixel mean L1 norm).
    pub fn abs_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().map(|v| v.abs()).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::AbsMean(x), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// target in `[0, 1]`.
    pub fn bce_logits(&mut self, logits: Var, target: f64) -> Var {
        let xv = self.value(logits);
        let m = xv.data.iter().map(|&z| softplus(z) - target * z).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(logits);
        self.push(Tensor::scalar(m), Op::BceLogits(logits, target), ng)
    }

    pub fn mse_const(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().map(|&z| (z - target).powi(2)).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MseConst(x, target), ng)
    }

    /// Mean cross-entropy of row-wise softmax over `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.shape.len(), 2);
        let (n, k) = (xv.shape[0], xv.shape[1]);
        assert_eq!(labels.len(), n);
        let probs = softmax_rows(&xv.data, n, k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &xv.data[i * k..(i + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / n as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Soft Dice loss `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
    pub fn dice_loss(&mut self, p: Var, target: &[f64], smooth: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len());
        let inter: f64 = pv.data.iter().zip(target).map(|(a, b)| a * b).sum();
        let sp: f64 = pv.data.iter().sum();
        let st: f64 = target.iter().sum();
        let loss = 1.0 - (2.0 * inter + smooth) / (sp + st + smooth);
        let ng = self.ng(p);
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target: target.to_vec(),
                smooth,
            },
            ng,
        )
    }

    pub fn select_channel(&mut self, x: Var, c: usize) -> Var {
        let xv = self.value(x);
        let [n, ch, d, h, w] = xv.dims5();
        let s = d * h * w;
        let mut out = Tensor::zeros(&[n, 1, d, h, w]);
        for i in 0..n {
            out.data[i * s..(i + 1) * s].copy_from_slice(&xv.data[(i * ch + c) * s..(i * ch + c + 1) * s]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SelectChannel(x, c), ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        let s = d * h * w;
        let data = (0..n * c).map(|k| xv.data[k * s..(k + 1) * s].iter().sum::<f64>() / s as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], data), Op::GlobalAvgPool(x), ng)
    }

    /// `x [N, F] * w^T [F, O] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, f) = (xv.shape[0], xv.shape[1]);
        let o = wv.shape[0];
        assert_eq!(wv.shape[1], f);
        let mut out = Tensor::zeros(&[n, o]);
        for i in 0..n {
            for j in 0..o {
                out.data[i * o + j] = bv.data[j];
            }
        }
        kernels::gemm(n, f, o, 1.0, &xv.data, f, 1, &wv.data, 1, f, 1.0, &mut out.data, o, 1);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&self.value(loss).shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(&self.value(v).shape)
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Pad { x, map } => {
                let [n, c, d, h, w] = self.value(*x).dims5();
                let (od, oh, ow) = (map[0].len(), map[1].len(), map[2].len());
                let mut gx = Tensor::zeros(&[n, c, d, h, w]);
                let (sp, dp) = (d * h * w, od * oh * ow);
                for s in 0..n * c {
                    let g = &gout.data[s * dp..(s + 1) * dp];
                    let dst = &mut gx.data[s * sp..(s + 1) * sp];
                    for (zo, zi) in map[0].iter().enumerate() {
                        let Some(zi) = zi else { continue };
                        for (yo, yi) in map[1].iter().enumerate() {
                            let Some(yi) = yi else { continue };
                            for (xo, xi) in map[2].iter().enumerate() {
                                if let Some(xi) = xi {
                                    dst[(zi * h + yi) * w + xi] += g[(zo * oh + yo) * ow + xo];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv { x, w, b, geom, cout } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape[0];
                let cin = geom.channels;
                let (ni, np) = (geom.nimg(), geom.npos());
                let mut gx = self.ng(*x).then(|| self.zeros_like(*x));
                let mut gw = self.ng(*w).then(|| self.zeros_like(*w));
                for s in 0..n {
                    kernels::conv_backward(
                        geom,
                        &xv.data[s * cin * ni..(s + 1) * cin * ni],
                        &wv.data,
                        *cout,
                        &gout.data[s * cout * np..(s + 1) * cout * np],
                        gw.as_mut().map(|t| t.data.as_mut_slice()),
                        gx.as_mut().map(|t| &mut t.data[s * cin * ni..(s + 1) * cin * ni]),
                    );
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = self.zeros_like(*b);
                    for s in 0..n {
                        for o in 0..*cout {
                            gb.data[o] += gout.data[(s * cout + o) * np..(s * cout + o + 1) * np].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::TConv { x, w, b, geom, cin } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape[0];
                let cout = geom.channels;
                let (ni, np) = (geom.nimg(), geom.npos());
                let mut gx = self.ng(*x).then(|| self.zeros_like(*x));
                let mut gw = self.ng(*w).then(|| self.zeros_like(*w));
                for s in 0..n {
                    kernels::tconv_backward(
                        geom,
                        &xv.data[s * cin * np..(s + 1) * cin * np],
                        &wv.data,
                        *cin,
                        &gout.data[s * cout * ni..(s + 1) * cout * ni],
                        gw.as_mut().map(|t| t.data.as_mut_slice()),
                        gx.as_mut().map(|t| &mut t.data[s * cin * np..(s + 1) * cin * np]),
                    );
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = self.zeros_like(*b);
                    for s in 0..n {
                        for o in 0..cout {
                            gb.data[o] += gout.data[(s * cout + o) * ni..(s * cout + o + 1) * ni].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd } => {
                let [n, c, d, h, w] = self.value(*x).dims5();
                let s = d * h * w;
                let m = (n * s) as f64;
                let g = &self.value(*gamma).data;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for k in off..off + s {
                            sum_dy[ch] += gout.data[k];
                            sum_dy_xhat[ch] += gout.data[k] * xhat[k];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut gx = self.zeros_like(*x);
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let f = g[ch] * invstd[ch] / m;
                            for k in off..off + s {
                                gx.data[k] = f * (m * gout.data[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_dy_xhat));
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_dy));
            }
            Op::ChannelAffine { x, gamma, beta, mean, invstd } => {
                let xv = self.value(*x);
                let [n, c, d, h, w] = xv.dims5();
                let s = d * h * w;
                let g = &self.value(*gamma).data;
                let mut gx = self.zeros_like(*x);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for k in off..off + s {
                            let xh = (xv.data[k] - mean[ch]) * invstd[ch];
                            gg[ch] += gout.data[k] * xh;
                            gb[ch] += gout.data[k];
                            gx.data[k] = gout.data[k] * g[ch] * invstd[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, Tensor::new(vec![c], gg));
                self.accumulate(grads, *beta, Tensor::new(vec![c], gb));
            }
            Op::InstanceNorm { x, xhat, invstd } => {
                let [n, c, d, h, w] = self.value(*x).dims5();
                let s = d * h * w;
                let m = s as f64;
                let mut gx = self.zeros_like(*x);
                for k in 0..n * c {
                    let off = k * s;
                    let dy = &gout.data[off..off + s];
                    let xh = &xhat[off..off + s];
                    let sdy: f64 = dy.iter().sum();
                    let sdyx: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        gx.data[off + j] = invstd[k] / m * (m * dy[j] - sdy - xh[j] * sdyx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = Tensor::new(
                    xv.shape.clone(),
                    xv.data.iter().zip(&gout.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
                );
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let g = Tensor::new(
                    xv.shape.clone(),
                    xv.data.iter().zip(&gout.data).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect(),
                );
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let g = Tensor::new(
                    y.shape.clone(),
                    y.data.iter().zip(&gout.data).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
                );
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gout.map(|v| v * c)),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let g = gout.item() / n;
                self.accumulate(grads, *x, Tensor::full(&self.value(*x).shape, g));
            }
            Op::AbsMean(x) => {
                let xv = self.value(*x);
                let f = gout.item() / xv.len() as f64;
                let g = xv.map(|v| if v > 0.0 { f } else if v < 0.0 { -f } else { 0.0 });
                self.accumulate(grads, *x, g);
            }
            Op::BceLogits(x, t) => {
                let xv = self.value(*x);
                let f = gout.item() / xv.len() as f64;
                self.accumulate(grads, *x, xv.map(|z| f * (sigmoid(z) - t)));
            }
            Op::MseConst(x, t) => {
                let xv = self.value(*x);
                let f = gout.item() / xv.len() as f64;
                self.accumulate(grads, *x, xv.map(|z| f * 2.0 * (z - t)));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let xv = self.value(*logits);
                let (n, k) = (xv.shape[0], xv.shape[1]);
                let f = gout.item() / n as f64;
                let mut g = Tensor::new(xv.shape.clone(), probs.iter().map(|p| p * f).collect());
                for (i, &l) in labels.iter().enumerate() {
                    g.data[i * k + l] -= f;
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Dice { p, target, smooth } => {
                let pv = self.value(*p);
                let inter: f64 = pv.data.iter().zip(target).map(|(a, b)| a * b).sum();
                let denom: f64 = pv.data.iter().sum::<f64>() + target.iter().sum::<f64>() + smooth;
                let num = 2.0 * inter + smooth;
                let f = gout.item();
                // d/dp of -(num/denom)
                let g = Tensor::new(
                    pv.shape.clone(),
                    target.iter().map(|&t| -f * (2.0 * t * denom - num) / (denom * denom)).collect(),
                );
                self.accumulate(grads, *p, g);
            }
            Op::SelectChannel(x, c) => {
                let [n, ch, d, h, w] = self.value(*x).dims5();
                let s = d * h * w;
                let mut g = self.zeros_like(*x);
                for i in 0..n {
                    g.data[(i * ch + c) * s..(i * ch + c + 1) * s].copy_from_slice(&gout.data[i * s..(i + 1) * s]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, d, h, w] = self.value(*x).dims5();
                let s = d * h * w;
                let mut g = self.zeros_like(*x);
                for k in 0..n * c {
                    let v = gout.data[k] / s as f64;
                    g.data[k * s..(k + 1) * s].iter_mut().for_each(|e| *e = v);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f) = (xv.shape[0], xv.shape[1]);
                let o = wv.shape[0];
                if self.ng(*x) {
                    let mut gx = self.zeros_like(*x);
                    kernels::gemm(n, o, f, 1.0, &gout.data, o, 1, &wv.data, f, 1, 0.0, &mut gx.data, f, 1);
                    self.accumulate(grads, *x, gx);
                }
                let mut gw = self.zeros_like(*w);
                kernels::gemm(o, n, f, 1.0, &gout.data, 1, o, &xv.data, f, 1, 0.0, &mut gw.data, f, 1);
                self.accumulate(grads, *w, gw);
                let mut gb = self.zeros_like(*b);
                for i in 0..n {
                    for j in 0..o {
                        gb.data[j] += gout.data[i * o + j];
                    }
                }
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_rows(data: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..k {
            out[i * k + j] = (row[j] - mx).exp() / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = pseudo(shape, 42);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in (0..x0.len()).step_by((x0.len() / 25).max(1)) {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data[i] += delta;
                let mut g = Graph::new();
                let x = g.variable(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                "index {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn grad_reflect_pad_conv_stride() {
        let w = pseudo(&[3, 2, 1, 3, 3], 7);
        check_input_grad(&[2, 2, 1, 6, 5], |g, x| {
            let p = g.pad(x, [(0, 0), (1, 1), (1, 1)], PadMode::Reflect);
            let wv = g.input(w.clone());
            let y = g.conv(p, wv, None, [1, 2, 2]);
            let y = g.sigmoid(y);
            g.mean(y)
        });
    }

    #[test]
    fn grad_transposed_conv_and_crop() {
        let w = pseudo(&[2, 3, 1, 3, 3], 8);
        check_input_grad(&[1, 2, 1, 4, 4], |g, x| {
            let wv = g.input(w.clone());
            let y = g.conv_transpose(x, wv, None, [1, 2, 2]);
            let y = g.crop(y, [0, 1, 1], [1, 8, 8]);
            let y = g.leaky_relu(y, 0.2);
            let s = g.scale(y, 0.7);
            g.mse_const(s, 0.3)
        });
    }

    #[test]
    fn grad_norms() {
        let gamma = pseudo(&[3], 9);
        let beta = pseudo(&[3], 10);
        check_input_grad(&[2, 3, 2, 3, 3], |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            let (y, _, _) = g.batch_norm(x, ga, be, 1e-5);
            let y = g.sigmoid(y);
            let z = g.instance_norm(y, 1e-5);
            let z = g.sigmoid(z);
            g.bce_logits(z, 1.0)
        });
    }

    #[test]
    fn grad_classifier_head() {
        let w = pseudo(&[2, 3], 11);
        let b = pseudo(&[2], 12);
        check_input_grad(&[4, 3, 1, 2, 2], |g, x| {
            let p = g.global_avg_pool(x);
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let l = g.linear(p, wv, bv);
            g.softmax_cross_entropy(l, &[0, 1, 1, 0])
        });
    }

    #[test]
    fn grad_dice_and_select() {
        let target: Vec<f64> = (0..2 * 4 * 4).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        check_input_grad(&[2, 2, 1, 4, 4], |g, x| {
            let s = g.sigmoid(x);
            let c = g.select_channel(s, 1);
            g.dice_loss(c, &target, 1.0)
        });
    }

    #[test]
    fn grad_residual_and_l1() {
        check_input_grad(&[1, 1, 1, 5, 5], |g, x| {
            let y = g.relu(x);
            let z = g.add(y, x);
            let d = g.sub(z, y);
            let d = g.scale(d, 0.5);
            let a = g.abs_mean(d);
            let m = g.mean(z);
            g.add(a, m)
        });
    }

    #[test]
    fn dice_loss_extremes() {
        let target = vec![1.0, 1.0, 0.0, 0.0];
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![4], target.clone()));
        let l = g.dice_loss(p, &target, 1.0);
        assert!(g.value(l).item().abs() < 1e-12);
        let big: Vec<f64> = (0..10000).map(|i| (i % 2) as f64).collect();
        let z = g.input(Tensor::zeros(&[10000]));
        let l = g.dice_loss(z, &big, 1.0);
        assert!(g.value(l).item() > 0.999);
    }

    #[test]
    fn cross_entropy_of_confident_prediction_vanishes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 2], vec![60.0, -60.0, -60.0, 60.0]));
        let l = g.softmax_cross_entropy(x, &[0, 1]);
        assert!(g.value(l).item() < 1e-6);
    }
}
