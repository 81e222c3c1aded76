//! Acquisition filtering and biweekly compositing.

use ndarray::{s, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{step_days, FIRST_DAY, STEP_DAYS, TIME_STEPS};
use crate::scalar::Scalar;

use super::Acquisition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeConfig {
    /// Acquisitions with a larger contaminated fraction are dropped.
    pub max_contaminated_fraction: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            max_contaminated_fraction: 0.25,
        }
    }
}

/// Composited optical bands with per-pixel missing flags.
#[derive(Debug, Clone)]
pub struct Composite<S> {
    /// `[24, H, W, 10]`; zero where missing.
    pub bands: Array4<S>,
    /// `[24, H, W]`, true where no clean observation exists.
    pub missing: Array3<bool>,
    /// Day of year of the acquisition chosen for each step.
    pub source_days: Vec<Option<u32>>,
}

/// Index of the composite step nearest to `day`.
pub fn nearest_step(day: u32) -> usize {
    let offset = day.saturating_sub(FIRST_DAY) as f64 / STEP_DAYS as f64;
    (offset.round() as usize).min(TIME_STEPS - 1)
}

/// Drops acquisitions over the contamination limit and assigns the rest to
/// the nearest of the 24 composite days. `masks[i]` flags cloud or shadow
/// pixels of `acquisitions[i]`.
pub fn filter_and_composite<S: Scalar>(
    acquisitions: &[Acquisition<S>],
    masks: &[Array2<bool>],
    cfg: &CompositeConfig,
) -> Result<Composite<S>> {
    if acquisitions.len() != masks.len() {
        return Err(Error::shape("contamination masks", acquisitions.len(), masks.len()));
    }
    let first = acquisitions.first().ok_or(Error::NoCleanImagery)?;
    let (h, w, bands) = first.bands.dim();
    if acquisitions.windows(2).any(|p| p[1].day_of_year < p[0].day_of_year) {
        return Err(Error::invalid("acquisitions", "must be sorted by day of year"));
    }
    for (i, (acq, mask)) in acquisitions.iter().zip(masks).enumerate() {
        if acq.bands.dim() != (h, w, bands) || mask.dim() != (h, w) {
            return Err(Error::shape(format!("acquisition {i}"), format!("{h}x{w}"), format!("{:?}", acq.bands.dim())));
        }
    }

    let days = step_days();
    let npx = (h * w) as f64;
    // (fraction, |day - target|, acquisition index) of the current winner per step
    let mut best: Vec<Option<(f64, u32, usize)>> = vec![None; TIME_STEPS];
    let mut survivors = 0;
    for (i, (acq, mask)) in acquisitions.iter().zip(masks).enumerate() {
        let fraction = mask.iter().filter(|&&m| m).count() as f64 / npx;
        if fraction > cfg.max_contaminated_fraction {
            continue;
        }
        survivors += 1;
        let k = nearest_step(acq.day_of_year);
        let gap = acq.day_of_year.abs_diff(days[k]);
        let better = match best[k] {
            None => true,
            Some((f, g, _)) => fraction < f || (fraction == f && gap < g),
        };
        if better {
            best[k] = Some((fraction, gap, i));
        }
    }
    if survivors == 0 {
        return Err(Error::NoCleanImagery);
    }

    let mut out = Array4::zeros((TIME_STEPS, h, w, bands));
    let mut missing = Array3::from_elem((TIME_STEPS, h, w), true);
    let mut source_days = vec![None; TIME_STEPS];
    for (k, slot) in best.iter().enumerate() {
        let Some((_, _, i)) = *slot else { continue };
        let acq = &acquisitions[i];
        source_days[k] = Some(acq.day_of_year);
        for r in 0..h {
            for c in 0..w {
                if masks[i][[r, c]] {
                    continue;
                }
                missing[[k, r, c]] = false;
                out.slice_mut(s![k, r, c, ..]).assign(&acq.bands.slice(s![r, c, ..]));
            }
        }
    }
    Ok(Composite {
        bands: out,
        missing,
        source_days,
    })
}
