//! On-disk plot, raw-scene and prediction bundles.
//!
//! Binary arrays are little-endian `f32` in row-major order. Plot bundles hold
//! `s2.bin` `[T][H][W][10]` (normalized), `s1.bin` `[T][H][W][2]`
//! (normalized), `dem.bin` `[H][W]` (meters) and an optional `labels.csv`.
//! Raw bundles hold one `s2_<day>.bin` `[H][W][10]` (reflectance digital
//! numbers) plus `cloud_<day>.csv` per optical acquisition, one
//! `s1_<day>.bin` `[H][W][2]` (dB) per radar acquisition, and `dem.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array2, Array3, Array4, Dimension, IntoDimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{stack_from_parts, Acquisition, PreprocessConfig, RadarAcquisition, RawScene};
use crate::raster::{step_days, Channel, LabelGrid, NormalizationRanges, PlotSample, TimeSeriesStack, TIME_STEPS};
use crate::scalar::Scalar;

pub const META_FILE: &str = "meta.json";
pub const S2_FILE: &str = "s2.bin";
pub const S1_FILE: &str = "s1.bin";
pub const DEM_FILE: &str = "dem.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const PROBS_FILE: &str = "probs.bin";
pub const PROBS_HEADER_FILE: &str = "probs.json";
pub const MASK_FILE: &str = "mask.csv";

/// Bands stored in plot bundles, optical then radar.
pub fn bundle_channels() -> Vec<String> {
    Channel::ALL[..10]
        .iter()
        .chain(&[Channel::Vv, Channel::Vh])
        .map(|c| c.name().to_string())
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn write_f32<S: Scalar, D: Dimension>(path: &Path, a: &Array<S, D>) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * a.len());
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_f32_bytes());
    }
    write(path, &bytes)
}

pub fn read_f32<S: Scalar, Sh: IntoDimension>(path: &Path, shape: Sh) -> Result<Array<S, Sh::Dim>> {
    let dim = shape.into_dimension();
    let bytes = read(path)?;
    if bytes.len() != 4 * dim.size() {
        return Err(Error::format(path, format!("{} bytes, expected {} for shape {:?}", bytes.len(), 4 * dim.size(), dim.slice())));
    }
    let values: Vec<S> = bytes
        .chunks_exact(4)
        .map(|b| S::c(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(Array::from_shape_vec(dim, values).expect("length checked"))
}

/// `H` lines of `W` comma-separated 0/1 values.
pub fn write_grid_csv(path: &Path, grid: &LabelGrid) -> Result<()> {
    let mut s = String::new();
    for row in grid.values().rows() {
        let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    write(path, s.as_bytes())
}

pub fn read_grid_csv(path: &Path) -> Result<LabelGrid> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| match v.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::format(path, format!("line {}: '{other}' is not 0 or 1", i + 1))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(path, format!("line {} has {} values, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let (h, w) = (rows.len(), rows[0].len());
    LabelGrid::new(Array2::from_shape_vec((h, w), rows.concat()).expect("rectangular"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotMeta {
    pub plot_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub channels: Vec<String>,
    pub timestamps: Vec<u32>,
}

/// Preprocessed arrays of one plot or scene.
#[derive(Debug, Clone)]
pub struct PlotBundle<S> {
    pub meta: PlotMeta,
    pub s2: Array4<S>,
    pub s1: Array4<S>,
    pub dem: Array2<S>,
    pub labels: Option<LabelGrid>,
}

impl<S: Scalar> PlotBundle<S> {
    pub fn new(plot_id: &str, lat: f64, lon: f64, s2: Array4<S>, s1: Array4<S>, dem: Array2<S>, labels: Option<LabelGrid>) -> Result<Self> {
        let (t, h, w, _) = s2.dim();
        if s1.dim() != (t, h, w, 2) {
            return Err(Error::shape("s1", format!("{:?}", (t, h, w, 2)), format!("{:?}", s1.dim())));
        }
        if dem.dim() != (h, w) {
            return Err(Error::shape("dem", format!("{:?}", (h, w)), format!("{:?}", dem.dim())));
        }
        if let Some(l) = &labels {
            if l.dim() != (h, w) {
                return Err(Error::shape("labels", format!("{:?}", (h, w)), format!("{:?}", l.dim())));
            }
        }
        Ok(Self {
            meta: PlotMeta {
                plot_id: plot_id.to_string(),
                lat,
                lon,
                t,
                h,
                w,
                channels: bundle_channels(),
                timestamps: step_days(),
            },
            s2,
            s1,
            dem,
            labels,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(META_FILE), &self.meta)?;
        write_f32(&dir.join(S2_FILE), &self.s2)?;
        write_f32(&dir.join(S1_FILE), &self.s1)?;
        write_f32(&dir.join(DEM_FILE), &self.dem)?;
        if let Some(l) = &self.labels {
            write_grid_csv(&dir.join(LABELS_FILE), l)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: PlotMeta = read_json(&meta_path)?;
        if meta.channels != bundle_channels() {
            return Err(Error::format(
                &meta_path,
                format!("channels {:?}, expected {:?}", meta.channels, bundle_channels()),
            ));
        }
        if meta.t != TIME_STEPS || meta.timestamps.len() != meta.t {
            return Err(Error::TimeSteps {
                expected: TIME_STEPS,
                got: meta.timestamps.len().min(meta.t),
            });
        }
        let (t, h, w) = (meta.t, meta.h, meta.w);
        let s2 = read_f32(&dir.join(S2_FILE), (t, h, w, 10))?;
        let s1 = read_f32(&dir.join(S1_FILE), (t, h, w, 2))?;
        let dem = read_f32(&dir.join(DEM_FILE), (h, w))?;
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() {
            let l = read_grid_csv(&labels_path)?;
            if l.dim() != (h, w) {
                return Err(Error::format(&labels_path, format!("{:?} grid, expected {:?}", l.dim(), (h, w))));
            }
            Some(l)
        } else {
            None
        };
        Ok(Self { meta, s2, s1, dem, labels })
    }

    /// Network input stack with derived indices and slope.
    pub fn stack(&self, cfg: &PreprocessConfig) -> Result<TimeSeriesStack<S>> {
        stack_from_parts(self.s2.view(), self.s1.view(), self.dem.view(), &self.meta.plot_id, cfg)
    }

    /// Stack and labels; fails when the bundle carries no labels.
    pub fn sample(&self, cfg: &PreprocessConfig) -> Result<PlotSample<S>> {
        let labels = self
            .labels
            .clone()
            .ok_or_else(|| Error::Empty(format!("labels of plot {}", self.meta.plot_id)))?;
        PlotSample::new(self.stack(cfg)?, labels)
    }
}

/// True when `dir` holds a bundle rather than a collection of them.
pub fn is_bundle(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

/// `dir` itself when it is a bundle, otherwise its bundle subdirectories in
/// name order.
pub fn bundle_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found")));
    }
    if is_bundle(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_bundle(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(dir, format!("no bundles (directories with {META_FILE})")));
    }
    Ok(dirs)
}

/// Every labeled plot bundle under `dir`.
pub fn load_dataset<S: Scalar>(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<PlotSample<S>>> {
    bundle_dirs(dir)?
        .iter()
        .map(|d| PlotBundle::<S>::load(d)?.sample(cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub plot_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    /// Optical acquisition days in ascending order.
    pub s2_days: Vec<u32>,
    pub s1_days: Vec<u32>,
}

fn s2_file(day: u32) -> String {
    format!("s2_{day:03}.bin")
}

fn s1_file(day: u32) -> String {
    format!("s1_{day:03}.bin")
}

fn cloud_file(day: u32) -> String {
    format!("cloud_{day:03}.csv")
}

/// Writes normalized raw observations in sensor units.
pub fn save_raw<S: Scalar>(dir: &Path, raw: &RawScene<S>, lat: f64, lon: f64, labels: Option<&LabelGrid>, ranges: &NormalizationRanges) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = raw.dem.dim();
    let meta = RawMeta {
        plot_id: raw.plot_id.clone(),
        lat,
        lon,
        h,
        w,
        s2_days: raw.acquisitions.iter().map(|a| a.day_of_year).collect(),
        s1_days: raw.radar.iter().map(|a| a.day_of_year).collect(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    for a in &raw.acquisitions {
        let dn = a.bands.mapv(|v| S::c(v.to_f64_lossy() * ranges.reflectance_scale));
        write_f32(&dir.join(s2_file(a.day_of_year)), &dn)?;
        let mask = LabelGrid::from_fn(h, w, |r, c| a.cloud_mask[[r, c]]);
        write_grid_csv(&dir.join(cloud_file(a.day_of_year)), &mask)?;
    }
    let floor = ranges.backscatter_floor_db;
    for a in &raw.radar {
        let db = a.grid.mapv(|v| S::c(v.to_f64_lossy() * -floor + floor));
        write_f32(&dir.join(s1_file(a.day_of_year)), &db)?;
    }
    write_f32(&dir.join(DEM_FILE), &raw.dem)?;
    if let Some(l) = labels {
        write_grid_csv(&dir.join(LABELS_FILE), l)?;
    }
    Ok(())
}

/// Raw scene with normalized values, plus metadata and optional labels.
pub fn load_raw<S: Scalar>(dir: &Path, ranges: &NormalizationRanges) -> Result<(RawScene<S>, RawMeta, Option<LabelGrid>)> {
    let meta: RawMeta = read_json(&dir.join(META_FILE))?;
    let (h, w) = (meta.h, meta.w);
    let mut acquisitions = Vec::with_capacity(meta.s2_days.len());
    for &day in &meta.s2_days {
        let dn: Array3<S> = read_f32(&dir.join(s2_file(day)), (h, w, 10))?;
        let clouds = read_grid_csv(&dir.join(cloud_file(day)))?;
        if clouds.dim() != (h, w) {
            return Err(Error::format(dir.join(cloud_file(day)), format!("{:?} grid, expected {:?}", clouds.dim(), (h, w))));
        }
        let mask = clouds.values().mapv(|v| v == 1);
        acquisitions.push(Acquisition::new(day, ranges.s2(&dn)?, mask)?);
    }
    let mut radar = Vec::with_capacity(meta.s1_days.len());
    for &day in &meta.s1_days {
        let db: Array3<S> = read_f32(&dir.join(s1_file(day)), (h, w, 2))?;
        radar.push(RadarAcquisition {
            day_of_year: day,
            grid: ranges.s1(&db)?,
        });
    }
    let dem = read_f32(&dir.join(DEM_FILE), (h, w))?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() { Some(read_grid_csv(&labels_path)?) } else { None };
    let raw = RawScene {
        plot_id: meta.plot_id.clone(),
        acquisitions,
        radar,
        dem,
    };
    Ok((raw, meta, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbsHeader {
    pub plot_id: String,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub dtype: String,
    pub threshold: f64,
}

/// Writes `probs.bin`, its `probs.json` header and `mask.csv`.
pub fn save_prediction<S: Scalar>(dir: &Path, plot_id: &str, probs: &Array2<S>, threshold: f64, mask: &LabelGrid) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = probs.dim();
    write_f32(&dir.join(PROBS_FILE), probs)?;
    write_json(
        &dir.join(PROBS_HEADER_FILE),
        &ProbsHeader {
            plot_id: plot_id.to_string(),
            h,
            w,
            dtype: "float32-le".into(),
            threshold,
        },
    )?;
    write_grid_csv(&dir.join(MASK_FILE), mask)
}

pub fn load_probs<S: Scalar>(dir: &Path) -> Result<(ProbsHeader, Array2<S>)> {
    let header: ProbsHeader = read_json(&dir.join(PROBS_HEADER_FILE))?;
    let probs = read_f32(&dir.join(PROBS_FILE), (header.h, header.w))?;
    Ok((header, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::preprocess_scene;
    use crate::raster::bit_identical;
    use crate::synth::{generate_plot, SynthConfig};

    #[test]
    fn plot_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_plot::<f32>(&SynthConfig::default()).unwrap();
        let cfg = PreprocessConfig::default();
        let pre = preprocess_scene(&p.raw, &cfg).unwrap();
        let b = PlotBundle::new("p1", 1.5, -2.0, pre.s2, pre.s1, pre.dem, Some(p.sample.label.clone())).unwrap();
        b.save(dir.path()).unwrap();
        let back = PlotBundle::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.meta, b.meta);
        assert!(bit_identical(&back.s2, &b.s2));
        let s = back.sample(&cfg).unwrap();
        assert!(bit_identical(&s.stack.data().to_owned(), &p.sample.stack.data().to_owned()));
        assert_eq!(s.label, p.sample.label);
        let meta = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        for key in ["plot_id", "lat", "lon", "\"T\"", "\"H\"", "\"W\"", "channels", "timestamps"] {
            assert!(meta.contains(key), "{key}");
        }
    }

    #[test]
    fn raw_bundle_round_trip_preprocesses_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_plot::<f64>(&SynthConfig { cloud_gap_fraction: 0.5, ..SynthConfig::default() }).unwrap();
        let ranges = NormalizationRanges::default();
        save_raw(dir.path(), &p.raw, 0.0, 0.0, Some(&p.sample.label), &ranges).unwrap();
        let (raw, meta, labels) = load_raw::<f64>(dir.path(), &ranges).unwrap();
        assert_eq!(meta.s2_days.len(), 24);
        assert_eq!(labels.unwrap(), p.sample.label);
        let cfg = PreprocessConfig::default();
        let a = preprocess_scene(&raw, &cfg).unwrap();
        let b = preprocess_scene(&p.raw, &cfg).unwrap();
        // f32 storage bounds the difference
        let diff = (&a.s2 - &b.s2).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn malformed_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        fs::write(&path, "0,1\n1\n").unwrap();
        assert!(matches!(read_grid_csv(&path), Err(Error::Format { .. })));
        fs::write(&path, "0,2\n").unwrap();
        assert!(matches!(read_grid_csv(&path), Err(Error::Format { .. })));
        let bin = dir.path().join("x.bin");
        fs::write(&bin, [0u8; 10]).unwrap();
        assert!(matches!(read_f32::<f32, _>(&bin, (2, 2)), Err(Error::Format { .. })));
        assert!(bundle_dirs(&dir.path().join("nope")).is_err());
        assert!(bundle_dirs(dir.path()).is_err());
    }

    #[test]
    fn prediction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let probs = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f32 / 12.0);
        let mask = LabelGrid::from_fn(3, 4, |r, c| probs[[r, c]] >= 0.5);
        save_prediction(dir.path(), "s", &probs, 0.5, &mask).unwrap();
        let (h, back) = load_probs::<f32>(dir.path()).unwrap();
        assert_eq!((h.h, h.w, h.threshold), (3, 4, 0.5));
        assert_eq!(back, probs);
        assert_eq!(read_grid_csv(&dir.path().join(MASK_FILE)).unwrap(), mask);
    }
}
