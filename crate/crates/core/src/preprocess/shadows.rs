//! Cloud-shadow candidates filtered by proximity to detected clouds.

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::distance::squared_distance_to;
use crate::raster::{Channel, PIXEL_METERS};
use crate::scalar::Scalar;

use super::Acquisition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowConfig {
    /// Normalized B8 reflectance below which a pixel may be shadow.
    pub b8_max: f64,
    /// Normalized B11 reflectance below which a pixel may be shadow.
    pub b11_max: f64,
    /// Candidates farther than this from every cloud pixel are discarded.
    pub max_cloud_distance_m: f64,
    pub pixel_meters: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            b8_max: 0.12,
            b11_max: 0.10,
            max_cloud_distance_m: 800.0,
            pixel_meters: PIXEL_METERS,
        }
    }
}

/// Shadow mask for one acquisition. Empty when the acquisition has no clouds.
pub fn detect_shadows<S: Scalar>(acq: &Acquisition<S>, cfg: &ShadowConfig) -> Array2<bool> {
    let bands = acq.bands.view();
    let (h, w, _) = bands.dim();
    let clouds = acq.cloud_mask.view();
    if !clouds.iter().any(|&c| c) {
        return Array2::from_elem((h, w), false);
    }
    let reach_px = cfg.max_cloud_distance_m / cfg.pixel_meters;
    let reach_sq = reach_px * reach_px;
    let dist_sq = squared_distance_to(clouds);
    let (b8_max, b11_max) = (S::c(cfg.b8_max), S::c(cfg.b11_max));
    Array2::from_shape_fn((h, w), |(r, c)| {
        !clouds[[r, c]]
            && bands[[r, c, Channel::B8.index()]] < b8_max
            && bands[[r, c, Channel::B11.index()]] < b11_max
            && dist_sq[[r, c]] <= reach_sq
    })
}

/// Brightness fallback when no external cloud mask is available: `B2 > 0.25`.
pub fn fallback_cloud_mask<S: Scalar>(bands: ArrayView3<'_, S>) -> Array2<bool> {
    let (h, w, _) = bands.dim();
    let thr = S::c(0.25);
    Array2::from_shape_fn((h, w), |(r, c)| bands[[r, c, Channel::B2.index()]] > thr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Bright scene with one dark pixel at `dark` and clouds at `clouds`.
    fn scene(h: usize, w: usize, dark: (usize, usize), clouds: &[(usize, usize)]) -> Acquisition<f64> {
        let mut bands = Array3::from_elem((h, w, 10), 0.3);
        bands[[dark.0, dark.1, Channel::B8.index()]] = 0.05;
        bands[[dark.0, dark.1, Channel::B11.index()]] = 0.05;
        let mut mask = Array2::from_elem((h, w), false);
        for &(r, c) in clouds {
            mask[[r, c]] = true;
        }
        Acquisition::new(100, bands, mask).unwrap()
    }

    #[test]
    fn no_clouds_means_no_shadows() {
        let acq = scene(20, 20, (5, 5), &[]);
        assert!(!detect_shadows(&acq, &ShadowConfig::default()).iter().any(|&v| v));
    }

    #[test]
    fn candidate_near_cloud_is_kept() {
        let acq = scene(100, 100, (50, 60), &[(50, 50)]);
        let m = detect_shadows(&acq, &ShadowConfig::default());
        assert!(m[[50, 60]]);
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
    }

    #[test]
    fn candidate_far_from_cloud_is_removed() {
        // 100 px = 1000 m from the only cloud pixel.
        let acq = scene(5, 120, (2, 110), &[(2, 10)]);
        assert!(!detect_shadows(&acq, &ShadowConfig::default())[[2, 110]]);
        // exactly 80 px (800 m) is still within reach
        let acq = scene(5, 120, (2, 90), &[(2, 10)]);
        assert!(detect_shadows(&acq, &ShadowConfig::default())[[2, 90]]);
    }

    #[test]
    fn bright_pixels_are_not_candidates() {
        let acq = scene(10, 10, (0, 0), &[(5, 5)]);
        let m = detect_shadows(&acq, &ShadowConfig::default());
        assert!(m[[0, 0]]);
        assert!(!m[[1, 1]]);
    }

    #[test]
    fn fallback_thresholds_blue() {
        let mut bands = Array3::from_elem((2, 2, 10), 0.1_f32);
        bands[[1, 0, 0]] = 0.3;
        let m = fallback_cloud_mask(bands.view());
        assert_eq!(m.iter().filter(|&&v| v).count(), 1);
        assert!(m[[1, 0]]);
    }
}
