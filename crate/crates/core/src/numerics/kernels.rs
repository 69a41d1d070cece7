//! Forward and adjoint kernels for the spatial primitives.
//!
//! Every kernel writes each output element from a single sequential sum so
//! results do not depend on how rows are split across threads.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::window::Window;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfold one `cin x h x w` image into a `(cin*kh*kw) x (oh*ow)` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: accumulate the column matrix back into the image.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. Returns the output and the per-image column matrices
/// kept for the backward pass.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<Vec<T>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * n;
    let mut out = vec![T::zero(); batch * out_sz];
    let mut saved = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut cols = vec![T::zero(); g.patch() * n];
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        for (co, row) in o.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(false, false, g.cout, n, g.patch(), T::one(), weight, &cols, T::one(), o);
        saved.push(cols);
    }
    (out, saved)
}

/// Gradients of a batched convolution. Accumulates into `dw` and `db`;
/// returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    dout: &[T],
    weight: &[T],
    cols: &[Vec<T>],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let n = g.out_h() * g.out_w();
    let out_sz = g.cout * n;
    if let Some(dw) = dw {
        for b in 0..batch {
            let go = &dout[b * out_sz..(b + 1) * out_sz];
            T::gemm(false, true, g.cout, g.patch(), n, T::one(), go, &cols[b], T::one(), dw);
        }
    }
    if let Some(db) = db {
        for b in 0..batch {
            let go = &dout[b * out_sz..(b + 1) * out_sz];
            for (co, row) in go.chunks(n).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    if !want_dx {
        return None;
    }
    let in_sz = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); batch * in_sz];
    let mut dcols = vec![T::zero(); g.patch() * n];
    for b in 0..batch {
        let go = &dout[b * out_sz..(b + 1) * out_sz];
        T::gemm(true, false, g.patch(), n, g.cout, T::one(), weight, go, T::zero(), &mut dcols);
        col2im(g, &dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    Some(dx)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// Local correlation logits `scale * f1(i) . f2(i + offset_k)` over an
/// `h x w x c` pair of feature maps. Out-of-image keys are written as zero
/// and must be excluded by the caller's mask.
pub fn local_corr_forward<T: Scalar>(
    f1: &[T],
    f2: &[T],
    h: usize,
    w: usize,
    c: usize,
    win: Window,
    scale: T,
) -> Vec<T> {
    let kn = win.len();
    let mut out = vec![T::zero(); h * w * kn];
    out.par_chunks_mut(w * kn).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let q = &f1[(y * w + x) * c..(y * w + x + 1) * c];
            let o = &mut row[x * kn..(x + 1) * kn];
            for (k, v) in o.iter_mut().enumerate() {
                if let Some((ky, kx)) = win.key(y, x, k, h, w) {
                    *v = scale * dot(q, &f2[(ky * w + kx) * c..(ky * w + kx + 1) * c]);
                }
            }
        }
    });
    out
}

/// Adjoint of [`local_corr_forward`]; `g` has the layout of the logits.
#[allow(clippy::too_many_arguments)]
pub fn local_corr_backward<T: Scalar>(
    g: &[T],
    f1: &[T],
    f2: &[T],
    h: usize,
    w: usize,
    c: usize,
    win: Window,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let kn = win.len();
    let mut d1 = vec![T::zero(); h * w * c];
    d1.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            let gi = &g[(y * w + x) * kn..(y * w + x + 1) * kn];
            for (k, &gk) in gi.iter().enumerate() {
                if gk == T::zero() {
                    continue;
                }
                if let Some((ky, kx)) = win.key(y, x, k, h, w) {
                    let key = &f2[(ky * w + kx) * c..(ky * w + kx + 1) * c];
                    let s = gk * scale;
                    for (a, b) in acc.iter_mut().zip(key) {
                        *a += s * *b;
                    }
                }
            }
        }
    });
    // Gather form of the scatter into f2: key j receives from queries j - offset.
    let mut d2 = vec![T::zero(); h * w * c];
    d2.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            for k in 0..kn {
                let (du, dv) = win.offset(k);
                let qy = y as isize - dv;
                let qx = x as isize - du;
                if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                    continue;
                }
                let qi = qy as usize * w + qx as usize;
                let gk = g[qi * kn + k];
                if gk == T::zero() {
                    continue;
                }
                let s = gk * scale;
                for (a, b) in acc.iter_mut().zip(&f1[qi * c..(qi + 1) * c]) {
                    *a += s * *b;
                }
            }
        }
    });
    (d1, d2)
}

/// `out(i, :) = sum_k weights(i, k) * src(i + offset_k, :)` over in-image keys.
pub fn window_gather_forward<T: Scalar>(
    weights: &[T],
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    win: Window,
) -> Vec<T> {
    let kn = win.len();
    let mut out = vec![T::zero(); h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            let wi = &weights[(y * w + x) * kn..(y * w + x + 1) * kn];
            for (k, &wk) in wi.iter().enumerate() {
                if let Some((ky, kx)) = win.key(y, x, k, h, w) {
                    for (a, b) in acc.iter_mut().zip(&src[(ky * w + kx) * c..(ky * w + kx + 1) * c]) {
                        *a += wk * *b;
                    }
                }
            }
        }
    });
    out
}

pub fn window_gather_backward<T: Scalar>(
    g: &[T],
    weights: &[T],
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    win: Window,
) -> (Vec<T>, Vec<T>) {
    let kn = win.len();
    let mut dw = vec![T::zero(); h * w * kn];
    dw.par_chunks_mut(w * kn).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let gi = &g[(y * w + x) * c..(y * w + x + 1) * c];
            for k in 0..kn {
                if let Some((ky, kx)) = win.key(y, x, k, h, w) {
                    row[x * kn + k] = dot(gi, &src[(ky * w + kx) * c..(ky * w + kx + 1) * c]);
                }
            }
        }
    });
    let mut ds = vec![T::zero(); h * w * c];
    ds.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            for k in 0..kn {
                let (du, dv) = win.offset(k);
                let qy = y as isize - dv;
                let qx = x as isize - du;
                if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                    continue;
                }
                let qi = qy as usize * w + qx as usize;
                let wk = weights[qi * kn + k];
                for (a, b) in acc.iter_mut().zip(&g[qi * c..(qi + 1) * c]) {
                    *a += wk * *b;
                }
            }
        }
    });
    (dw, ds)
}

/// Sub-pixel rearrangement on `h x w x (u*u*k)` → `(h*u) x (w*u) x k`.
/// Input channel `(a*u + b)*k + ch` lands at output pixel `(y*u + a, x*u + b)`.
pub fn pixel_shuffle_index(h: usize, w: usize, k: usize, u: usize) -> Vec<usize> {
    let (oh, ow) = (h * u, w * u);
    let mut idx = Vec::with_capacity(oh * ow * k);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, a) = (oy / u, oy % u);
            let (x, b) = (ox / u, ox % u);
            let base = (y * w + x) * u * u * k + (a * u + b) * k;
            idx.extend(base..base + k);
        }
    }
    idx
}

/// Half-pixel-centre bilinear taps for resizing `n` samples to `m`.
pub fn bilinear_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `h x w x c` map to `oh x ow x c`.
pub fn bilinear_forward<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (a, b) in o.iter_mut().zip(&x[(yy * w + xx) * c..(yy * w + xx + 1) * c]) {
                    *a += wt * *b;
                }
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(g: &[T], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let gi = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::of(wt);
                for (a, b) in dx[(yy * w + xx) * c..(yy * w + xx + 1) * c].iter_mut().zip(gi) {
                    *a += wt * *b;
                }
            }
        }
    }
    dx
}

/// Source index for every destination element of an axis permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank).map(|d| coord[d] * strides[perm[d]]).sum();
        idx.push(src);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (out_shape, idx)
}
