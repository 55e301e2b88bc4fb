//! Forward and backward kernels behind the tape operations.

use super::{cast, Real};

/// Geometry of a (possibly batched) 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_area()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let rows = g.col_rows();
    let area = g.out_area();
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * area]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let yn = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        let b_mat: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            rows,
            area,
            T::one(),
            kernel,
            (rows as isize, 1),
            b_mat,
            (area as isize, 1),
            T::zero(),
            yn,
            (area as isize, 1),
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                yn[co * area..(co + 1) * area]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let area = g.out_area();
    let (want_x, want_k, want_b) = want;
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_k.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want_b.then(|| vec![T::zero(); g.c_out]);
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * area }];
    let mut dcols = vec![T::zero(); rows * area];
    for n in 0..g.batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(dk) = dk.as_mut() {
            let b_mat: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dK += dY · colsᵀ
            T::gemm(
                g.c_out,
                area,
                rows,
                T::one(),
                dyn_,
                (area as isize, 1),
                b_mat,
                (1, area as isize),
                T::one(),
                dk,
                (rows as isize, 1),
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyn_[co * area..(co + 1) * area].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if pointwise {
                T::gemm(
                    rows,
                    g.c_out,
                    area,
                    T::one(),
                    kernel,
                    (1, rows as isize),
                    dyn_,
                    (area as isize, 1),
                    T::zero(),
                    dxn,
                    (area as isize, 1),
                );
            } else {
                // dcols = Kᵀ · dY
                T::gemm(
                    rows,
                    g.c_out,
                    area,
                    T::one(),
                    kernel,
                    (1, rows as isize),
                    dyn_,
                    (area as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (area as isize, 1),
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Max pooling over `k×k` windows with stride `stride` on the trailing two
/// axes. Returns outputs and the input index of each selected maximum.
pub(crate) fn max_pool2d<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        // strict comparison keeps the lowest linear index on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Maximum over contiguous groups of `group` values.
pub(crate) fn max_groups<T: Real>(x: &[T], group: usize) -> (Vec<T>, Vec<usize>) {
    x.chunks(group)
        .enumerate()
        .map(|(gi, chunk)| {
            let mut best = 0;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            (chunk[best], gi * group + best)
        })
        .unzip()
}

/// Half-open source window `[start, end)` for adaptive pooling output cell `i`.
pub(crate) fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn adaptive_avg_pool2d<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = adaptive_window(oy, h, ho);
            for ox in 0..wo {
                let (x0, x1) = adaptive_window(ox, w, wo);
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[y * w + xx];
                    }
                }
                out.push(s / cast::<T>(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool2d_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = adaptive_window(oy, h, ho);
            for ox in 0..wo {
                let (x0, x1) = adaptive_window(ox, w, wo);
                let share = dy[(p * ho + oy) * wo + ox] / cast::<T>(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        plane[y * w + xx] += share;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of half-pixel bilinear resampling:
/// `(lower index, upper index, weight of upper)`.
pub(crate) fn bilinear_taps(out_idx: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn bilinear<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let rows: Vec<_> = (0..ho).map(|i| bilinear_taps(i, h, ho)).collect();
    let colt: Vec<_> = (0..wo).map(|j| bilinear_taps(j, w, wo)).collect();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            let fy: T = cast(fy);
            for &(x0, x1, fx) in &colt {
                let fx: T = cast(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let rows: Vec<_> = (0..ho).map(|i| bilinear_taps(i, h, ho)).collect();
    let colt: Vec<_> = (0..wo).map(|j| bilinear_taps(j, w, wo)).collect();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy: T = cast(fy);
            for (ox, &(x0, x1, fx)) in colt.iter().enumerate() {
                let fx: T = cast(fx);
                let g = dy[(p * ho + oy) * wo + ox];
                plane[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += g * (T::one() - fy) * fx;
                plane[y1 * w + x0] += g * fy * (T::one() - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Per-channel statistics over `[N, C, spatial]`: mean and biased variance.
pub(crate) fn channel_stats<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>) {
    let count: T = cast((n * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            for &xv in &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Normalizes per channel with the given statistics, returning `(y, xhat)`.
pub(crate) fn batch_norm_apply<T: Real>(
    x: &[T],
    (n, c, spatial): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
            for i in r {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn batch_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    (n, c, spatial): (usize, usize, usize),
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * spatial..(b * c + ch + 1) * spatial {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let count: T = cast((n * spatial) as f64);
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch];
            for i in (b * c + ch) * spatial..(b * c + ch + 1) * spatial {
                dx[i] = if batch_stats {
                    k * (dy[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
