//! Raw numeric kernels behind the tape primitives. All loops accumulate in a
//! fixed row-major order so results are bit-reproducible.

use super::Scalar;

/// `[p x q] * [q x r]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut c = vec![S::zero(); p * r];
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for j in 0..q {
            let aij = a[i * q + j];
            let b_row = &b[j * r..(j + 1) * r];
            for (ck, &bk) in c_row.iter_mut().zip(b_row) {
                *ck += aij * bk;
            }
        }
    }
    c
}

/// `ga += g * bᵀ`
pub fn matmul_grad_a<S: Scalar>(g: &[S], b: &[S], ga: &mut [S], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for j in 0..q {
            let b_row = &b[j * r..(j + 1) * r];
            let mut acc = S::zero();
            for (&gk, &bk) in g_row.iter().zip(b_row) {
                acc += gk * bk;
            }
            ga[i * q + j] += acc;
        }
    }
}

/// `gb += aᵀ * g`
pub fn matmul_grad_b<S: Scalar>(a: &[S], g: &[S], gb: &mut [S], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for j in 0..q {
            let aij = a[i * q + j];
            let gb_row = &mut gb[j * r..(j + 1) * r];
            for (o, &gk) in gb_row.iter_mut().zip(g_row) {
                *o += aij * gk;
            }
        }
    }
}

pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Geometry of a same-size dilated convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Row/column offsets of tap `(i, j)` and the output range where it stays
    /// inside the input.
    fn tap(&self, i: usize, j: usize) -> Option<(isize, isize, usize, usize, usize, usize)> {
        let dy = (self.dilation * i) as isize - (self.dilation * (self.kh - 1) / 2) as isize;
        let dx = (self.dilation * j) as isize - (self.dilation * (self.kw - 1) / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        let x0 = (-dx).max(0);
        let x1 = (w - dx).min(w);
        if y0 >= y1 || x0 >= x1 {
            return None;
        }
        Some((dy, dx, y0 as usize, y1 as usize, x0 as usize, x1 as usize))
    }
}

pub fn conv2d<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let plane = g.height * g.width;
    let mut out = vec![S::zero(); g.filters * plane];
    for f in 0..g.filters {
        let out_plane = &mut out[f * plane..(f + 1) * plane];
        for c in 0..g.channels {
            let in_plane = &x[c * plane..(c + 1) * plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wgt = k[((f * g.channels + c) * g.kh + i) * g.kw + j];
                    let Some((dy, dx, y0, y1, x0, x1)) = g.tap(i, j) else {
                        continue;
                    };
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * g.width;
                        let src = &in_plane[(src as isize + x0 as isize + dx) as usize..];
                        let dst = &mut out_plane[y * g.width + x0..y * g.width + x1];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input<S: Scalar>(grad: &[S], k: &[S], gx: &mut [S], g: &ConvGeom) {
    let plane = g.height * g.width;
    for f in 0..g.filters {
        let g_plane = &grad[f * plane..(f + 1) * plane];
        for c in 0..g.channels {
            let gx_plane = &mut gx[c * plane..(c + 1) * plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wgt = k[((f * g.channels + c) * g.kh + i) * g.kw + j];
                    let Some((dy, dx, y0, y1, x0, x1)) = g.tap(i, j) else {
                        continue;
                    };
                    for y in y0..y1 {
                        let dst = ((y as isize + dy) as usize) * g.width;
                        let dst = (dst as isize + x0 as isize + dx) as usize;
                        let src = &g_plane[y * g.width + x0..y * g.width + x1];
                        for (o, &v) in gx_plane[dst..dst + (x1 - x0)].iter_mut().zip(src) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_kernel<S: Scalar>(grad: &[S], x: &[S], gk: &mut [S], g: &ConvGeom) {
    let plane = g.height * g.width;
    for f in 0..g.filters {
        let g_plane = &grad[f * plane..(f + 1) * plane];
        for c in 0..g.channels {
            let in_plane = &x[c * plane..(c + 1) * plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let Some((dy, dx, y0, y1, x0, x1)) = g.tap(i, j) else {
                        continue;
                    };
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * g.width;
                        let src = (src as isize + x0 as isize + dx) as usize;
                        let gs = &g_plane[y * g.width + x0..y * g.width + x1];
                        for (&a, &b) in gs.iter().zip(&in_plane[src..src + (x1 - x0)]) {
                            acc += a * b;
                        }
                    }
                    gk[((f * g.channels + c) * g.kh + i) * g.kw + j] += acc;
                }
            }
        }
    }
}

/// Half-open input ranges covered by each output cell of adaptive pooling.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|o| {
            let start = o * input / output;
            let end = ((o + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Average pooling over explicit row and column bins, per channel.
pub fn pool_bins<S: Scalar>(
    x: &[S],
    channels: usize,
    height: usize,
    width: usize,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> Vec<S> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![S::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for (oy, &(r0, r1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1)) in cols.iter().enumerate() {
                let mut acc = S::zero();
                for y in r0..r1 {
                    for &v in &plane[y * width + c0..y * width + c1] {
                        acc += v;
                    }
                }
                let n = S::of(((r1 - r0) * (c1 - c0)) as f64);
                out[(c * oh + oy) * ow + ox] = acc / n;
            }
        }
    }
    out
}

pub fn pool_bins_grad<S: Scalar>(
    grad: &[S],
    gx: &mut [S],
    channels: usize,
    height: usize,
    width: usize,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) {
    let (oh, ow) = (rows.len(), cols.len());
    for c in 0..channels {
        let plane = &mut gx[c * height * width..(c + 1) * height * width];
        for (oy, &(r0, r1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1)) in cols.iter().enumerate() {
                let n = S::of(((r1 - r0) * (c1 - c0)) as f64);
                let share = grad[(c * oh + oy) * ow + ox] / n;
                for y in r0..r1 {
                    for v in &mut plane[y * width + c0..y * width + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
}

/// Align-corners source coordinate table: `(lower index, upper index, upper weight)`.
pub fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 && input > 1 {
                (o * (input - 1)) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample<S: Scalar>(
    x: &[S],
    channels: usize,
    height: usize,
    width: usize,
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) -> Vec<S> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![S::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = S::of(fy);
            let gy = S::one() - fy;
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = S::of(fx);
                let gx = S::one() - fx;
                let top = plane[y0 * width + x0] * gx + plane[y0 * width + x1] * fx;
                let bottom = plane[y1 * width + x0] * gx + plane[y1 * width + x1] * fx;
                out[(c * oh + oy) * ow + ox] = top * gy + bottom * fy;
            }
        }
    }
    out
}

pub fn upsample_grad<S: Scalar>(
    grad: &[S],
    gx: &mut [S],
    channels: usize,
    height: usize,
    width: usize,
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) {
    let (oh, ow) = (rows.len(), cols.len());
    for c in 0..channels {
        let plane = &mut gx[c * height * width..(c + 1) * height * width];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = S::of(fy);
            let gy = S::one() - fy;
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = S::of(fx);
                let gxw = S::one() - fx;
                let g = grad[(c * oh + oy) * ow + ox];
                plane[y0 * width + x0] += g * gy * gxw;
                plane[y0 * width + x1] += g * gy * fx;
                plane[y1 * width + x0] += g * fy * gxw;
                plane[y1 * width + x1] += g * fy * fx;
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}
