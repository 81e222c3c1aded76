//! Exact Euclidean distance transform on the pixel grid.
//!
//! Separable lower-envelope algorithm (Felzenszwalb & Huttenlocher), run on
//! squared distances so all intermediate values stay exact integers.

use ndarray::{Array2, ArrayView2};

/// Squared distance from every pixel to the nearest `true` pixel of `targets`.
/// Pixels are `f64::INFINITY` when `targets` is empty.
pub fn squared_distance_to(targets: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = targets.dim();
    let mut grid = Array2::from_shape_fn((h, w), |ix| if targets[ix] { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for r in 0..h {
        for c in 0..w {
            f[c] = grid[[r, c]];
        }
        lower_envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        for c in 0..w {
            grid[[r, c]] = d[c];
        }
    }
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[[r, c]];
        }
        lower_envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid[[r, c]] = d[r];
        }
    }
    grid
}

/// Euclidean distance to the nearest `true` pixel.
pub fn distance_to(targets: ArrayView2<'_, bool>) -> Array2<f64> {
    squared_distance_to(targets).mapv(f64::sqrt)
}

fn lower_envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            d.fill(f64::INFINITY);
            return;
        }
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let parabola = |p: usize| (f[q] + (q * q) as f64 - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = parabola(v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}
