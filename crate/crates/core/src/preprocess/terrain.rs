//! DEM denoising and slope.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::raster::PIXEL_METERS;
use crate::scalar::Scalar;

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// `size x size` median filter with reflected borders.
pub fn median_filter<S: Scalar>(grid: ArrayView2<'_, S>, size: usize) -> Array2<S> {
    let (h, w) = grid.dim();
    let half = (size / 2) as isize;
    let mut buf = Vec::with_capacity(size * size);
    Array2::from_shape_fn((h, w), |(r, c)| {
        buf.clear();
        for dr in -half..=half {
            for dc in -half..=half {
                buf.push(grid[[reflect(r as isize + dr, h), reflect(c as isize + dc, w)]]);
            }
        }
        let mid = buf.len() / 2;
        buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite DEM"));
        buf[mid]
    })
}

/// Slope in percent: 5x5 median filter, then Horn's 3x3 gradient.
pub fn compute_slope<S: Scalar>(dem: ArrayView2<'_, S>) -> Result<Array2<S>> {
    compute_slope_with_spacing(dem, PIXEL_METERS)
}

pub fn compute_slope_with_spacing<S: Scalar>(dem: ArrayView2<'_, S>, spacing_m: f64) -> Result<Array2<S>> {
    let (h, w) = dem.dim();
    if h < 5 || w < 5 {
        return Err(Error::shape("dem", "at least 5x5", format!("{h}x{w}")));
    }
    if dem.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dem".into()));
    }
    let z = median_filter(dem, 5);
    let at = |r: isize, c: isize| z[[reflect(r, h), reflect(c, w)]];
    let two = S::c(2.0);
    let denom = S::c(8.0 * spacing_m);
    let hundred = S::c(100.0);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let (a, b, cc) = (at(r - 1, c - 1), at(r - 1, c), at(r - 1, c + 1));
        let (d, f) = (at(r, c - 1), at(r, c + 1));
        let (g, hh, i) = (at(r + 1, c - 1), at(r + 1, c), at(r + 1, c + 1));
        let dzdx = ((cc + two * f + i) - (a + two * d + g)) / denom;
        let dzdy = ((g + two * hh + i) - (a + two * b + cc)) / denom;
        hundred * (dzdx * dzdx + dzdy * dzdy).sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-1, 2), 1);
        assert_eq!(reflect(7, 1), 0);
    }

    #[test]
    fn flat_dem_has_zero_slope() {
        let dem = Array2::from_elem((8, 9), 312.5_f64);
        assert!(compute_slope(dem.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plane_slope_is_ten_percent() {
        // 1 m rise per 10 m pixel along columns
        let dem = Array2::from_shape_fn((12, 12), |(_, c)| 100.0 + c as f64);
        let s = compute_slope(dem.view()).unwrap();
        for r in 3..9 {
            for c in 3..9 {
                assert!((s[[r, c]] - 10.0).abs() < 1e-9, "{}", s[[r, c]]);
            }
        }
    }

    #[test]
    fn diagonal_plane() {
        let dem = Array2::from_shape_fn((12, 12), |(r, c)| 3.0 * r as f64 + 4.0 * c as f64);
        let s = compute_slope(dem.view()).unwrap();
        assert!((s[[6, 6]] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn spike_is_removed() {
        let mut dem = Array2::from_elem((10, 10), 50.0_f64);
        dem[[5, 5]] = 150.0;
        let s = compute_slope(dem.view()).unwrap();
        assert!(s.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn errors() {
        assert!(compute_slope(Array2::<f64>::zeros((4, 10)).view()).is_err());
        let mut dem = Array2::<f64>::zeros((6, 6));
        dem[[0, 0]] = f64::INFINITY;
        assert!(matches!(compute_slope(dem.view()), Err(Error::NonFinite(_))));
    }
}
