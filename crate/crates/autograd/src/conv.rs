//! im2col / col2im lowering of 2-D convolution onto GEMM.

use crate::float::{gemm, Float, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        (size + 2 * pad).checked_sub(k).map(|span| span / stride + 1)
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + shift` lies in `0..w`.
fn valid_range(wo: usize, w: usize, stride: usize, shift: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift + s - 1) / s) as usize };
    let hi = if (w as isize) <= shift { 0 } else { ((w as isize - shift + s - 1) / s) as usize };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let shift = kx as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.wo, g.w, g.stride, shift);
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = (lo as isize * g.stride as isize + shift) as usize;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (d, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let shift = kx as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.wo, g.w, g.stride, shift);
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = (lo as isize * g.stride as isize + shift) as usize;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[first..first + (hi - lo)].iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.col_cols();
    let mut out = vec![T::zero(); g.n * out_per];
    let mut col = if g.direct() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let wm = MatRef::row_major(w, g.cout, g.col_rows());
    for n in 0..g.n {
        let xs = &x[n * in_per..(n + 1) * in_per];
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        let cm = if g.direct() {
            MatRef::row_major(xs, g.cin, g.col_cols())
        } else {
            im2col(g, xs, &mut col);
            MatRef::row_major(&col, g.col_rows(), g.col_cols())
        };
        gemm(wm, cm, T::zero(), dst);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                for v in &mut dst[o * g.col_cols()..(o + 1) * g.col_cols()] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution; each requested output is freshly allocated.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.col_cols();
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut dx = need_x.then(|| vec![T::zero(); g.n * in_per]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * rows]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); if g.direct() { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if need_x && !g.direct() { rows * cols } else { 0 }];
    let wm = MatRef::row_major(w, g.cout, rows);
    for n in 0..g.n {
        let dys = &dy[n * out_per..(n + 1) * out_per];
        let dym = MatRef::row_major(dys, g.cout, cols);
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dys[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[n * in_per..(n + 1) * in_per];
            let cm = if g.direct() {
                MatRef::row_major(xs, rows, cols)
            } else {
                im2col(g, xs, &mut col);
                MatRef::row_major(&col, rows, cols)
            };
            gemm(dym, cm.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_per..(n + 1) * in_per];
            if g.direct() {
                gemm(wm.t(), dym, T::zero(), dxs);
            } else {
                gemm(wm.t(), dym, T::zero(), &mut dcol);
                col2im_add(g, &dcol, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
