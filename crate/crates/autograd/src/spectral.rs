//! Power-iteration estimate of the top singular value of a weight matrix.

use crate::float::Float;

const EPS: f64 = 1e-12;

fn normalize<T: Float>(x: &mut [T]) {
    let norm = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    let inv = T::of(1.0 / (norm + EPS));
    for v in x {
        *v *= inv;
    }
}

fn wt_times<T: Float>(w: &[T], rows: usize, u: &[T]) -> Vec<T> {
    let cols = w.len() / rows;
    let mut out = vec![T::zero(); cols];
    for (r, &ur) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += ur * x;
        }
    }
    out
}

fn w_times<T: Float>(w: &[T], rows: usize, v: &[T]) -> Vec<T> {
    let cols = w.len() / rows;
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

/// `v = normalize(W^T u)` and `sigma = u^T W v` for `w` viewed as `[rows, len / rows]`.
pub fn sigma<T: Float>(w: &[T], rows: usize, u: &[T]) -> (Vec<T>, T) {
    let mut v = wt_times(w, rows, u);
    normalize(&mut v);
    let wv = w_times(w, rows, &v);
    let s: T = u.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
    (v, s.max(T::of(EPS)))
}

/// Runs `iters` rounds of `u <- normalize(W normalize(W^T u))` in place and
/// returns the resulting estimate of the largest singular value.
pub fn power_iterate<T: Float>(w: &[T], rows: usize, u: &mut [T], iters: usize) -> T {
    for _ in 0..iters {
        let mut v = wt_times(w, rows, u);
        normalize(&mut v);
        let mut next = w_times(w, rows, &v);
        normalize(&mut next);
        u.copy_from_slice(&next);
    }
    sigma(w, rows, u).1
}
