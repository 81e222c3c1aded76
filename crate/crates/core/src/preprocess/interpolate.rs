use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fills missing values by linear interpolation in day-of-year between the
/// nearest clean steps before and after; leading and trailing gaps take the
/// nearest clean value.
pub fn interpolate_gaps<S: Scalar>(bands: &Array4<S>, missing: &Array3<bool>, days: &[u32]) -> Result<Array4<S>> {
    let (t, h, w, c) = bands.dim();
    if missing.dim() != (t, h, w) {
        return Err(Error::shape("missing mask", format!("{:?}", (t, h, w)), format!("{:?}", missing.dim())));
    }
    if days.len() != t {
        return Err(Error::shape("step days", t, days.len()));
    }
    let mut out = bands.clone();
    let mut clean = Vec::with_capacity(t);
    for r in 0..h {
        for col in 0..w {
            clean.clear();
            clean.extend((0..t).filter(|&k| !missing[[k, r, col]]));
            if clean.is_empty() {
                return Err(Error::NoCleanStep { row: r, col });
            }
            if clean.len() == t {
                continue;
            }
            // `next` indexes the first clean step strictly after k
            let mut next = 0;
            for k in 0..t {
                while next < clean.len() && clean[next] <= k {
                    next += 1;
                }
                if !missing[[k, r, col]] {
                    continue;
                }
                let before = next.checked_sub(1).map(|i| clean[i]);
                let after = clean.get(next).copied();
                for b in 0..c {
                    out[[k, r, col, b]] = match (before, after) {
                        (Some(p), Some(q)) => {
                            let span = S::c((days[q] - days[p]) as f64);
                            let frac = S::c((days[k] - days[p]) as f64) / span;
                            bands[[p, r, col, b]] + (bands[[q, r, col, b]] - bands[[p, r, col, b]]) * frac
                        }
                        (Some(p), None) => bands[[p, r, col, b]],
                        (None, Some(q)) => bands[[q, r, col, b]],
                        (None, None) => unreachable!(),
                    };
                }
            }
        }
    }
    Ok(out)
}
