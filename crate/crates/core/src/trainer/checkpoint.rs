//! `model.json` manifest, `params.bin` weights and `optimizer.bin` moments.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, ParamSpec, ParamStore};
use crate::scalar::Scalar;

use super::{AdaBound, TrainConfig};

pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub threshold: Option<f64>,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub manifest: ModelManifest,
    pub params: ParamStore<S>,
    pub optimizer: Option<AdaBound>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: TrainConfig, seed: u64, epoch: u32, threshold: Option<f64>, params: ParamStore<S>, optimizer: Option<AdaBound>) -> Self {
        let mut offset = 0;
        let tensors = params
            .specs()
            .iter()
            .map(|s| {
                let e = TensorEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    learnable: s.learnable,
                    offset,
                    len: s.len(),
                };
                offset += 4 * s.len();
                e
            })
            .collect();
        Self {
            manifest: ModelManifest {
                format_version: FORMAT_VERSION,
                config,
                seed,
                epoch,
                threshold,
                optimizer_step: optimizer.as_ref().map_or(0, |o| o.t),
                tensors,
            },
            params,
            optimizer,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(4 * self.params.values().iter().map(Vec::len).sum::<usize>());
        for v in self.params.values().iter().flatten() {
            bytes.write_f32::<LittleEndian>(v.to_f64_lossy() as f32).expect("vec write");
        }
        write_file(&dir.join(PARAMS_FILE), &bytes)?;
        if let Some(opt) = &self.optimizer {
            let mut ob = Vec::new();
            for v in opt.m.iter().chain(&opt.v).flatten() {
                ob.write_f64::<LittleEndian>(*v).expect("vec write");
            }
            write_file(&dir.join(OPTIMIZER_FILE), &ob)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_file(&dir.join(MODEL_FILE), json.as_bytes())
    }

    /// Loads and checks the tensors against the configured network.
    pub fn load(dir: &Path) -> Result<Self> {
        let model_path = dir.join(MODEL_FILE);
        let manifest: ModelManifest = serde_json::from_slice(&read_file(&model_path)?)
            .map_err(|e| Error::format(&model_path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&model_path, format!("unsupported format version {}", manifest.format_version)));
        }
        let network = Network::new(manifest.config.net)?;
        let specs: Vec<ParamSpec> = network.registry().specs().to_vec();
        if specs.len() != manifest.tensors.len() {
            return Err(Error::format(
                &model_path,
                format!("{} tensors listed, network has {}", manifest.tensors.len(), specs.len()),
            ));
        }
        for (s, t) in specs.iter().zip(&manifest.tensors) {
            if s.name != t.name || s.shape != t.shape || s.len() != t.len {
                return Err(Error::format(&model_path, format!("tensor {} does not match the network layout", t.name)));
            }
        }

        let params_path = dir.join(PARAMS_FILE);
        let bytes = read_file(&params_path)?;
        let total: usize = specs.iter().map(ParamSpec::len).sum();
        if bytes.len() != 4 * total {
            return Err(Error::format(&params_path, format!("{} bytes, expected {}", bytes.len(), 4 * total)));
        }
        let mut values = Vec::with_capacity(specs.len());
        for t in &manifest.tensors {
            let mut cur = Cursor::new(&bytes[t.offset..t.offset + 4 * t.len]);
            let v: Vec<S> = (0..t.len)
                .map(|_| cur.read_f32::<LittleEndian>().map(|x| S::c(f64::from(x))))
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&params_path, e))?;
            values.push(v);
        }
        let params = ParamStore::from_parts(specs, values)?;
        params.check_finite()?;

        let opt_path = dir.join(OPTIMIZER_FILE);
        let optimizer = if opt_path.exists() {
            let ob = read_file(&opt_path)?;
            if ob.len() != 16 * total {
                return Err(Error::format(&opt_path, format!("{} bytes, expected {}", ob.len(), 16 * total)));
            }
            let mut cur = Cursor::new(ob.as_slice());
            let mut read = || -> Vec<Vec<f64>> {
                manifest
                    .tensors
                    .iter()
                    .map(|t| (0..t.len).map(|_| cur.read_f64::<LittleEndian>().expect("length checked")).collect())
                    .collect()
            };
            let m = read();
            let v = read();
            Some(AdaBound {
                config: manifest.config.optimizer,
                t: manifest.optimizer_step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }
}
