//! Raw acquisitions to clean 24-step stacks.
//!
//! Order of operations: shadow masking, acquisition filtering and
//! compositing, linear gap filling, Whittaker smoothing of the ten optical
//! bands, then indices, radar fusion and slope.

mod composite;
mod indices;
mod interpolate;
mod radar;
mod resample;
mod shadows;
mod terrain;
mod whittaker;

pub use composite::{filter_and_composite, nearest_step, Composite, CompositeConfig};
pub use indices::{compute_indices, index_to_unit, raw_indices, EviVariant, RawIndices, INDEX_LIMIT};
pub use interpolate::interpolate_gaps;
pub use radar::{fuse_s1, nearest_radar_index, RadarAcquisition};
pub use resample::upsample_bilinear;
pub use shadows::{detect_shadows, fallback_cloud_mask, ShadowConfig};
pub use terrain::{compute_slope, compute_slope_with_spacing, median_filter};
pub use whittaker::{roughness, whittaker_smooth, WhittakerConfig, WhittakerSolver};

pub(crate) use terrain::reflect;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{build_stack, step_days, NormalizationRanges, TimeSeriesStack};
use crate::scalar::Scalar;

/// One Sentinel-2 acquisition with normalized reflectances.
#[derive(Debug, Clone)]
pub struct Acquisition<S> {
    pub day_of_year: u32,
    /// `[H, W, 10]`
    pub bands: Array3<S>,
    pub cloud_mask: Array2<bool>,
}

impl<S: Scalar> Acquisition<S> {
    pub fn new(day_of_year: u32, bands: Array3<S>, cloud_mask: Array2<bool>) -> Result<Self> {
        if !(1..=366).contains(&day_of_year) {
            return Err(Error::invalid("day_of_year", format!("{day_of_year} outside 1..=366")));
        }
        let (h, w, c) = bands.dim();
        if c != 10 {
            return Err(Error::shape(format!("acquisition {day_of_year} bands"), 10, c));
        }
        if cloud_mask.dim() != (h, w) {
            return Err(Error::shape(
                format!("acquisition {day_of_year} cloud mask"),
                format!("{h}x{w}"),
                format!("{:?}", cloud_mask.dim()),
            ));
        }
        if bands.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("acquisition {day_of_year}")));
        }
        Ok(Self {
            day_of_year,
            bands,
            cloud_mask,
        })
    }

    /// Uses the brightness fallback for the cloud mask.
    pub fn with_fallback_clouds(day_of_year: u32, bands: Array3<S>) -> Result<Self> {
        let mask = fallback_cloud_mask(bands.view());
        Self::new(day_of_year, bands, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub whittaker: WhittakerConfig,
    pub shadows: ShadowConfig,
    pub composite: CompositeConfig,
    pub evi_variant: EviVariant,
    pub normalization: NormalizationRanges,
}

/// Everything observed over one plot or scene for a year, already normalized.
#[derive(Debug, Clone)]
pub struct RawScene<S> {
    pub plot_id: String,
    pub acquisitions: Vec<Acquisition<S>>,
    pub radar: Vec<RadarAcquisition<S>>,
    /// Elevation in meters.
    pub dem: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct PreprocessedScene<S> {
    /// `[24, H, W, 10]` smoothed optical bands.
    pub s2: Array4<S>,
    /// `[24, H, W, 2]` fused radar.
    pub s1: Array4<S>,
    pub dem: Array2<S>,
    /// Fraction of step-pixels that needed gap filling.
    pub missing_fraction: f64,
    pub source_days: Vec<Option<u32>>,
}

/// Cloud-or-shadow mask per acquisition.
pub fn contamination_masks<S: Scalar>(acquisitions: &[Acquisition<S>], cfg: &ShadowConfig) -> Vec<Array2<bool>> {
    acquisitions
        .iter()
        .map(|a| {
            let shadows = detect_shadows(a, cfg);
            Zip::from(&a.cloud_mask).and(&shadows).map_collect(|&c, &s| c || s)
        })
        .collect()
}

/// Applies the Whittaker smoother along time to every pixel and band, then
/// clamps to `[0, 1]`.
pub fn smooth_stack<S: Scalar>(bands: &Array4<S>, cfg: &WhittakerConfig) -> Result<Array4<S>> {
    let (t, h, w, c) = bands.dim();
    let solver = WhittakerSolver::new(t, cfg)?;
    let mut out = bands.clone();
    let mut series = vec![S::zero(); t];
    for r in 0..h {
        for col in 0..w {
            for b in 0..c {
                for (k, v) in series.iter_mut().enumerate() {
                    *v = bands[[k, r, col, b]];
                }
                solver.solve_in_place(&mut series)?;
                for (k, v) in series.iter().enumerate() {
                    out[[k, r, col, b]] = v.max(S::zero()).min(S::one());
                }
            }
        }
    }
    Ok(out)
}

pub fn preprocess_scene<S: Scalar>(raw: &RawScene<S>, cfg: &PreprocessConfig) -> Result<PreprocessedScene<S>> {
    let masks = contamination_masks(&raw.acquisitions, &cfg.shadows);
    let composite = filter_and_composite(&raw.acquisitions, &masks, &cfg.composite)?;
    let days = step_days();
    let filled = interpolate_gaps(&composite.bands, &composite.missing, &days)?;
    let s2 = smooth_stack(&filled, &cfg.whittaker)?;
    let s1 = fuse_s1(&days, &raw.radar)?;
    if (s1.dim().1, s1.dim().2) != (s2.dim().1, s2.dim().2) {
        return Err(Error::shape("radar", format!("{:?}", &s2.shape()[1..3]), format!("{:?}", &s1.shape()[1..3])));
    }
    if raw.dem.dim() != (s2.dim().1, s2.dim().2) {
        return Err(Error::shape("dem", format!("{:?}", &s2.shape()[1..3]), format!("{:?}", raw.dem.dim())));
    }
    let missing = composite.missing.iter().filter(|&&m| m).count() as f64 / composite.missing.len() as f64;
    Ok(PreprocessedScene {
        s2,
        s1,
        dem: raw.dem.clone(),
        missing_fraction: missing,
        source_days: composite.source_days,
    })
}

/// Derives indices and slope and assembles the network input stack.
pub fn stack_from_parts<S: Scalar>(
    s2: ArrayView4<'_, S>,
    s1: ArrayView4<'_, S>,
    dem: ArrayView2<'_, S>,
    plot_id: &str,
    cfg: &PreprocessConfig,
) -> Result<TimeSeriesStack<S>> {
    let indices = compute_indices(s2, cfg.evi_variant);
    let slope = cfg.normalization.slope(&compute_slope(dem)?)?;
    build_stack(s2, s1, indices.view(), slope.view(), step_days(), plot_id)
}

impl<S: Scalar> PreprocessedScene<S> {
    pub fn to_stack(&self, plot_id: &str, cfg: &PreprocessConfig) -> Result<TimeSeriesStack<S>> {
        stack_from_parts(self.s2.view(), self.s1.view(), self.dem.view(), plot_id, cfg)
    }

    /// Optical series of one pixel and band.
    pub fn optical_series(&self, r: usize, c: usize, band: usize) -> Vec<S> {
        self.s2.slice(s![.., r, c, band]).to_vec()
    }
}
