use ndarray::{s, Array3, Array4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One radar acquisition: day of year and `[H, W, 2]` VV/VH grid.
#[derive(Debug, Clone)]
pub struct RadarAcquisition<S> {
    pub day_of_year: u32,
    pub grid: Array3<S>,
}

/// For every composite day, the acquisition with the smallest day difference.
/// Ties go to the earlier acquisition.
pub fn nearest_radar_index<S>(step_day: u32, acquisitions: &[RadarAcquisition<S>]) -> Option<usize> {
    acquisitions
        .iter()
        .enumerate()
        .min_by_key(|(_, a)| (a.day_of_year.abs_diff(step_day), a.day_of_year))
        .map(|(i, _)| i)
}

/// Stacks the nearest radar acquisition under each composite step.
pub fn fuse_s1<S: Scalar>(step_days: &[u32], acquisitions: &[RadarAcquisition<S>]) -> Result<Array4<S>> {
    let first = acquisitions.first().ok_or_else(|| Error::Empty("radar acquisitions".into()))?;
    let (h, w, c) = first.grid.dim();
    if c != 2 {
        return Err(Error::shape("radar grid", "2 bands", c));
    }
    if let Some(a) = acquisitions.iter().find(|a| a.grid.dim() != (h, w, c)) {
        return Err(Error::shape(
            format!("radar acquisition day {}", a.day_of_year),
            format!("{:?}", (h, w, c)),
            format!("{:?}", a.grid.dim()),
        ));
    }
    let mut out = Array4::zeros((step_days.len(), h, w, c));
    for (k, &day) in step_days.iter().enumerate() {
        let i = nearest_radar_index(day, acquisitions).expect("non-empty");
        out.slice_mut(s![k, .., .., ..]).assign(&acquisitions[i].grid);
    }
    Ok(out)
}
