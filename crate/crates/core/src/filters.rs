//! Separable Gaussian filtering, connected-component labelling and
//! block-average degradation on x-fastest 3D buffers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Values outside the buffer are zero. Sum-preserving up to truncation.
    Zero,
    /// Mirror about the edge sample (`d c b | a b c d`).
    Reflect,
}

/// Normalised Gaussian kernel truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

#[inline]
fn reflect_index(mut i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Convolve `data` (dims `[nx, ny, nz]`) along `axis` with a centred kernel.
pub fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], boundary: Boundary) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.iter().map(|&x| x * kernel[0]).collect();
    }
    let [nx, ny, _] = dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let n = dims[axis] as isize;
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; dims[axis]];
    // iterate over every line along `axis`
    let (outer_a, outer_b) = match axis {
        0 => (ny * dims[2], 0),
        1 => (nx, dims[2]),
        _ => (nx * ny, 0),
    };
    let mut starts = Vec::new();
    match axis {
        0 => starts.extend((0..outer_a).map(|l| l * nx)),
        1 => {
            for z in 0..outer_b {
                for x in 0..outer_a {
                    starts.push(x + z * nx * ny);
                }
            }
        }
        _ => starts.extend(0..outer_a),
    }
    for start in starts {
        for (i, slot) in line.iter_mut().enumerate() {
            *slot = data[start + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - r;
                let v = if j >= 0 && j < n {
                    line[j as usize]
                } else {
                    match boundary {
                        Boundary::Zero => 0.0,
                        Boundary::Reflect => line[reflect_index(j, n)],
                    }
                };
                acc += w * v;
            }
            out[start + i as usize * stride] = acc;
        }
    }
    out
}

/// Anisotropic Gaussian blur with per-axis sigma in voxels.
pub fn gaussian_blur_3d(data: &[f64], dims: [usize; 3], sigma_vox: [f64; 3], boundary: Boundary) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if sigma_vox[axis] > 0.0 {
            cur = convolve_axis(&cur, dims, axis, &gaussian_kernel(sigma_vox[axis]), boundary);
        }
    }
    cur
}

/// Isotropic 2D Gaussian blur of a `w x h` image with mirrored borders.
pub fn gaussian_blur_2d(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    gaussian_blur_3d(img, [w, h, 1], [sigma, sigma, 0.0], Boundary::Reflect)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => (1..=2).contains(&nonzero),
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// Label connected foreground components. Labels start at 1 and follow
/// raster order of each component's first voxel; background is 0.
pub fn label_components(fg: &[bool], dims: [usize; 3], conn: Connectivity) -> (Vec<u32>, usize) {
    let [nx, ny, nz] = dims;
    let offsets = conn.offsets();
    let mut labels = vec![0u32; fg.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let x = (i % nx) as isize;
            let y = ((i / nx) % ny) as isize;
            let z = (i / (nx * ny)) as isize;
            for o in &offsets {
                let (xx, yy, zz) = (x + o[0], y + o[1], z + o[2]);
                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                    continue;
                }
                let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                if fg[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next as usize)
}

/// Keep only the largest connected component (ties resolved by lowest label).
pub fn largest_component(fg: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<bool> {
    let (labels, n) = label_components(fg, dims, conn);
    if n <= 1 {
        return fg.to_vec();
    }
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let best = (1..=n).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(1);
    labels.iter().map(|&l| l as usize == best).collect()
}

/// Average non-overlapping `factor^3` blocks (partial blocks at the far edges
/// average over their existing voxels) and write each average back over its
/// block. The total sum is conserved exactly.
pub fn block_average(data: &[f64], dims: [usize; 3], factor: usize) -> Result<Vec<f64>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(data.to_vec());
    }
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; data.len()];
    for bz in (0..nz).step_by(factor) {
        for by in (0..ny).step_by(factor) {
            for bx in (0..nx).step_by(factor) {
                let (ex, ey, ez) = ((bx + factor).min(nx), (by + factor).min(ny), (bz + factor).min(nz));
                let mut sum = 0.0;
                let mut count = 0usize;
                for z in bz..ez {
                    for y in by..ey {
                        for x in bx..ex {
                            sum += data[x + nx * (y + ny * z)];
                            count += 1;
                        }
                    }
                }
                let mean = sum / count as f64;
                for z in bz..ez {
                    for y in by..ey {
                        for x in bx..ex {
                            out[x + nx * (y + ny * z)] = mean;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
