//! Convolution numerics on `[C, D, H, W]` samples via chunked im2col + GEMM.
//!
//! A convolution with kernel `k` and stride `s` (no padding) maps an image
//! grid of size `img` onto a position grid of size `(img - k) / s + 1`. The
//! transposed convolution is the adjoint of the same geometry, so both share
//! the `im2col` / `col2im` pair below.

/// Upper bound on the number of f64 values held by one column buffer.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub img: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pos: [usize; 3],
}

impl Geometry {
    pub fn conv(channels: usize, img: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut pos = [0; 3];
        for a in 0..3 {
            assert!(img[a] >= kernel[a], "kernel {kernel:?} larger than input {img:?}");
            pos[a] = (img[a] - kernel[a]) / stride[a] + 1;
        }
        Self {
            channels,
            img,
            kernel,
            stride,
            pos,
        }
    }

    /// Geometry whose position grid is `pos` and image grid is the full
    /// transposed-convolution output.
    pub fn transposed(channels: usize, pos: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut img = [0; 3];
        for a in 0..3 {
            img[a] = (pos[a] - 1) * stride[a] + kernel[a];
        }
        Self {
            channels,
            img,
            kernel,
            stride,
            pos,
        }
    }

    #[inline]
    pub fn ksize(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.channels * self.ksize()
    }

    #[inline]
    pub fn npos(&self) -> usize {
        self.pos[0] * self.pos[1] * self.pos[2]
    }

    #[inline]
    pub fn nimg(&self) -> usize {
        self.img[0] * self.img[1] * self.img[2]
    }

    pub fn chunk(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, self.npos())
    }
}

/// Fill `col[rows, p1 - p0]` from `img[C, D, H, W]` for positions `p0..p1`.
pub fn im2col(g: &Geometry, img: &[f64], p0: usize, p1: usize, col: &mut [f64]) {
    let n = p1 - p0;
    let [id, ih, iw] = g.img;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [_, ph, pw] = g.pos;
    let plane = ih * iw;
    for c in 0..g.channels {
        let base = c * id * plane;
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let row = ((c * kd + i) * kh + j) * kw + l;
                    let out = &mut col[row * n..(row + 1) * n];
                    for (slot, p) in out.iter_mut().zip(p0..p1) {
                        let od = p / (ph * pw);
                        let oh = (p / pw) % ph;
                        let ow = p % pw;
                        *slot = img[base + (od * sd + i) * plane + (oh * sh + j) * iw + ow * sw + l];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into `img`.
pub fn col2im(g: &Geometry, col: &[f64], p0: usize, p1: usize, img: &mut [f64]) {
    let n = p1 - p0;
    let [id, ih, iw] = g.img;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [_, ph, pw] = g.pos;
    let plane = ih * iw;
    for c in 0..g.channels {
        let base = c * id * plane;
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let row = ((c * kd + i) * kh + j) * kw + l;
                    let src = &col[row * n..(row + 1) * n];
                    for (&v, p) in src.iter().zip(p0..p1) {
                        let od = p / (ph * pw);
                        let oh = (p / pw) % ph;
                        let ow = p % pw;
                        img[base + (od * sd + i) * plane + (oh * sh + j) * iw + ow * sw + l] += v;
                    }
                }
            }
        }
    }
}

/// `C[m, n] = alpha * A[m, k] B[k, n] + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds: the furthest element touched must lie inside each slice
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid convolution of one sample. `w` is `[Cout, rows]`, `out` is
/// `[Cout, npos]` and is overwritten.
pub fn conv_forward(g: &Geometry, x: &[f64], w: &[f64], cout: usize, out: &mut [f64]) {
    let rows = g.rows();
    let np = g.npos();
    let chunk = g.chunk();
    let mut col = vec![0.0; rows * chunk];
    let mut p0 = 0;
    while p0 < np {
        let p1 = (p0 + chunk).min(np);
        let n = p1 - p0;
        im2col(g, x, p0, p1, &mut col[..rows * n]);
        gemm(cout, rows, n, 1.0, w, rows, 1, &col[..rows * n], n, 1, 0.0, &mut out[p0..], np, 1);
        p0 = p1;
    }
}

/// Gradients of [`conv_forward`]: accumulates into `dw` and `dx`.
pub fn conv_backward(g: &Geometry, x: &[f64], w: &[f64], cout: usize, dout: &[f64], dw: Option<&mut [f64]>, dx: Option<&mut [f64]>) {
    let rows = g.rows();
    let np = g.npos();
    let chunk = g.chunk();
    let mut col = vec![0.0; rows * chunk];
    let mut dw = dw;
    let mut dx = dx;
    let mut p0 = 0;
    while p0 < np {
        let p1 = (p0 + chunk).min(np);
        let n = p1 - p0;
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, x, p0, p1, &mut col[..rows * n]);
            // dW[cout, rows] += dOut[cout, n] * col^T[n, rows]
            gemm(cout, n, rows, 1.0, &dout[p0..], np, 1, &col[..rows * n], 1, n, 1.0, dw, rows, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol[rows, n] = W^T[rows, cout] * dOut[cout, n]
            gemm(rows, cout, n, 1.0, w, 1, rows, &dout[p0..], np, 1, 0.0, &mut col[..rows * n], n, 1);
            col2im(g, &col[..rows * n], p0, p1, dx);
        }
        p0 = p1;
    }
}

/// Full transposed convolution of one sample. `g.channels` is `Cout`, `w`
/// is `[Cin, Cout * k]`, `x` is `[Cin, npos]`; `out` (`[Cout, img]`) is
/// accumulated into.
pub fn tconv_forward(g: &Geometry, x: &[f64], w: &[f64], cin: usize, out: &mut [f64]) {
    let rows = g.rows();
    let np = g.npos();
    let chunk = g.chunk();
    let mut col = vec![0.0; rows * chunk];
    let mut p0 = 0;
    while p0 < np {
        let p1 = (p0 + chunk).min(np);
        let n = p1 - p0;
        // col[rows, n] = W^T[rows, cin] * x[cin, n]
        gemm(rows, cin, n, 1.0, w, 1, rows, &x[p0..], np, 1, 0.0, &mut col[..rows * n], n, 1);
        col2im(g, &col[..rows * n], p0, p1, out);
        p0 = p1;
    }
}

pub fn tconv_backward(g: &Geometry, x: &[f64], w: &[f64], cin: usize, dout: &[f64], dw: Option<&mut [f64]>, dx: Option<&mut [f64]>) {
    let rows = g.rows();
    let np = g.npos();
    let chunk = g.chunk();
    let mut col = vec![0.0; rows * chunk];
    let mut dw = dw;
    let mut dx = dx;
    let mut p0 = 0;
    while p0 < np {
        let p1 = (p0 + chunk).min(np);
        let n = p1 - p0;
        im2col(g, dout, p0, p1, &mut col[..rows * n]);
        if let Some(dx) = dx.as_deref_mut() {
            // dx[cin, n] += W[cin, rows] * col[rows, n]
            gemm(cin, rows, n, 1.0, w, rows, 1, &col[..rows * n], n, 1, 1.0, &mut dx[p0..], np, 1);
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW[cin, rows] += x[cin, n] * col^T[n, rows]
            gemm(cin, n, rows, 1.0, &x[p0..], np, 1, &col[..rows * n], 1, n, 1.0, dw, rows, 1);
        }
        p0 = p1;
    }
}
