use ndarray::{Array3, ArrayView3};

use crate::scalar::Scalar;

/// Bilinear resampling of `[h, w, c]` to `[out_h, out_w, c]` on pixel centers,
/// clamping at the edges. Stands in for learned super-resolution of the 20 m bands.
pub fn upsample_bilinear<S: Scalar>(grid: ArrayView3<'_, S>, out_h: usize, out_w: usize) -> Array3<S> {
    let (h, w, c) = grid.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Array3::zeros((out_h, out_w, c));
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        let fr = S::c(fr);
        for col in 0..out_w {
            let (c0, c1, fc) = coord(col, w, out_w);
            let fc = S::c(fc);
            for b in 0..c {
                let top = grid[[r0, c0, b]] * (S::one() - fc) + grid[[r0, c1, b]] * fc;
                let bottom = grid[[r1, c0, b]] * (S::one() - fc) + grid[[r1, c1, b]] * fc;
                out[[r, col, b]] = top * (S::one() - fr) + bottom * fr;
            }
        }
    }
    out
}
