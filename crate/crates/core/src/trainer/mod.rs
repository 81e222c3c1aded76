//! Training loop: equibatch sampling, scheduled regularization, AdaBound
//! updates, checkpoints and a per-epoch CSV log.

mod adabound;
mod checkpoint;
mod equibatch;

pub use adabound::{AdaBound, AdaBoundConfig};
pub use checkpoint::{Checkpoint, ModelManifest, TensorEntry, MODEL_FILE, OPTIMIZER_FILE, PARAMS_FILE};
pub use equibatch::{Equibatch, DECILES};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{strict_confusion, users_producers, Confusion};
use crate::inference::select_threshold;
use crate::network::{apply_running_updates, mix_seed, warmup_momentum, renorm_clamps, Mode, NetConfig, Network, ParamStore};
use crate::objective::{alpha_schedule, class_weights, loss_from_logits, signed_distance_map, EFFECTIVE_BETA};
use crate::raster::{LabelGrid, PlotSample, TimeSeriesStack};
use crate::scalar::Scalar;

pub const LOG_FILE: &str = "training_log.csv";
pub const LOG_HEADER: &str = "epoch,ce,bl,alpha,total,train_ua,train_pa";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedules {
    /// Epochs over which DropBlock ramps from 0 to its maximum.
    pub dropblock_ramp_epochs: u32,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            dropblock_ramp_epochs: 50,
        }
    }
}

/// Scheduled values at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub dropblock: f64,
    pub alpha: f64,
    pub rmax: f64,
    pub dmax: f64,
}

impl Schedules {
    pub fn dropblock(&self, epoch: u32, max: f64) -> f64 {
        if self.dropblock_ramp_epochs == 0 {
            return max;
        }
        max * (f64::from(epoch) / f64::from(self.dropblock_ramp_epochs)).min(1.0)
    }

    pub fn at(&self, epoch: u32, net: &NetConfig) -> ScheduleValues {
        let (rmax, dmax) = renorm_clamps(epoch);
        ScheduleValues {
            dropblock: self.dropblock(epoch, net.dropblock_max),
            alpha: alpha_schedule(i64::from(epoch)).expect("epoch is nonnegative"),
            rmax,
            dmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub optimizer: AdaBoundConfig,
    pub schedules: Schedules,
    pub epochs: u32,
    pub batch_size: usize,
    pub checkpoint_every: u32,
    /// Rescales gradients whose global norm exceeds this value.
    pub grad_clip_norm: Option<f64>,
    pub class_weight_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            optimizer: AdaBoundConfig::default(),
            schedules: Schedules::default(),
            epochs: 100,
            batch_size: 20,
            checkpoint_every: 10,
            grad_clip_norm: None,
            class_weight_beta: EFFECTIVE_BETA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.batch_size % DECILES != 0 {
            return Err(Error::invalid(
                "batch_size",
                format!("{} is not a positive multiple of {DECILES}", self.batch_size),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every", "must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("grad_clip_norm", format!("{c} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.class_weight_beta) {
            return Err(Error::invalid("class_weight_beta", format!("{} outside [0, 1)", self.class_weight_beta)));
        }
        Ok(())
    }
}

/// Epoch means over batches; UA and PA use training-mode outputs at 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub ce: f64,
    pub bl: f64,
    pub alpha: f64,
    pub total: f64,
    pub train_ua: Option<f64>,
    pub train_pa: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.ce,
            self.bl,
            self.alpha,
            self.total,
            opt(self.train_ua),
            opt(self.train_pa)
        )
    }
}

pub struct Trainer<S> {
    pub config: TrainConfig,
    pub seed: u64,
    pub network: Network,
    pub params: ParamStore<S>,
    pub optimizer: AdaBound,
    pub class_weights: [f64; 2],
    pub log: Vec<EpochLog>,
    inputs: Vec<Array4<S>>,
    labels: Vec<LabelGrid>,
    phis: Vec<Array2<f64>>,
    ids: Vec<String>,
    sampler: Equibatch,
    epoch: u32,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, data: &[PlotSample<S>], seed: u64) -> Result<Self> {
        config.validate()?;
        let network = Network::new(config.net)?;
        let params = network.init_params(seed);
        let optimizer = AdaBound::new(config.optimizer, &params)?;
        Self::assemble(config, seed, network, params, optimizer, 0, data)
    }

    /// Continues from a saved checkpoint; the data must be the original set.
    pub fn resume(checkpoint: Checkpoint<S>, data: &[PlotSample<S>]) -> Result<Self> {
        let m = checkpoint.manifest;
        m.config.validate()?;
        let network = Network::new(m.config.net)?;
        let optimizer = match checkpoint.optimizer {
            Some(o) => o,
            None => AdaBound::new(m.config.optimizer, &checkpoint.params)?,
        };
        Self::assemble(m.config, m.seed, network, checkpoint.params, optimizer, m.epoch, data)
    }

    fn assemble(
        config: TrainConfig,
        seed: u64,
        network: Network,
        params: ParamStore<S>,
        optimizer: AdaBound,
        epoch: u32,
        data: &[PlotSample<S>],
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let steps = config.net.time_steps;
        let inputs = data
            .iter()
            .map(|s| {
                let d = s.stack.data();
                if d.dim().0 == steps {
                    Ok(d.to_owned())
                } else {
                    TimeSeriesStack::subsample_time(d, steps)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<LabelGrid> = data.iter().map(|s| s.label.clone()).collect();
        let counts = labels.iter().fold([0u64; 2], |mut acc, l| {
            let p = l.positives() as u64;
            acc[1] += p;
            acc[0] += l.values().len() as u64 - p;
            acc
        });
        let class_weights = class_weights(counts, config.class_weight_beta)?;
        let phis = labels.iter().map(signed_distance_map).collect();
        let covers: Vec<f64> = data.iter().map(|s| s.cover).collect();
        let sampler = Equibatch::new(&covers, config.batch_size)?;
        Ok(Self {
            config,
            seed,
            network,
            params,
            optimizer,
            class_weights,
            log: Vec::new(),
            inputs,
            labels,
            phis,
            ids: data.iter().map(|s| s.stack.plot_id().to_string()).collect(),
            sampler,
            epoch,
        })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn batches(&self, epoch: u32) -> Vec<Vec<usize>> {
        self.sampler.epoch(self.seed, epoch)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let e = self.epoch;
        let sched = self.config.schedules.at(e, &self.config.net);
        let batches = self.batches(e);
        let (mut ce, mut bl, mut total) = (0.0, 0.0, 0.0);
        let mut confusion = Confusion::default();
        for (bi, batch) in batches.iter().enumerate() {
            let mut mode = Mode::train(e, mix_seed(mix_seed(self.seed, u64::from(e)), bi as u64), sched.dropblock);
            mode.rmax = sched.rmax;
            mode.dmax = sched.dmax;
            mode.stat_momentum = warmup_momentum(self.optimizer.t);
            let views: Vec<ArrayView4<'_, S>> = batch.iter().map(|&i| self.inputs[i].view()).collect();
            let pass = self.network.forward_batch(&self.params, &views, &mode)?;
            let scale = 1.0 / batch.len() as f64;
            let mut dlogits = Vec::with_capacity(batch.len());
            for (logits, &i) in pass.logits.iter().zip(batch) {
                let (terms, dl) = loss_from_logits(
                    logits.view(),
                    &self.labels[i],
                    self.phis[i].view(),
                    sched.alpha,
                    self.class_weights,
                    scale,
                )?;
                if !terms.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {e}, batch {bi}, plot {} (ce {}, bl {})",
                        self.ids[i], terms.ce, terms.bl
                    )));
                }
                ce += terms.ce * scale;
                bl += terms.bl * scale;
                total += terms.total * scale;
                let pred = LabelGrid::from_fn(logits.nrows(), logits.ncols(), |r, c| logits[[r, c]] >= S::zero());
                confusion = confusion + strict_confusion(&self.labels[i], &pred)?;
                dlogits.push(dl);
            }
            let mut grads = self.network.backward_batch(&self.params, &pass.cache, &dlogits);
            if let Some(limit) = self.config.grad_clip_norm {
                let norm = grads.global_norm().to_f64_lossy();
                if norm > limit {
                    grads.scale(S::c(limit / norm));
                }
            }
            self.optimizer.step(&mut self.params, &grads)?;
            apply_running_updates(&mut self.params, &pass.updates);
        }
        let nb = batches.len() as f64;
        let (ua, pa) = users_producers(&confusion);
        let row = EpochLog {
            epoch: e,
            ce: ce / nb,
            bl: bl / nb,
            alpha: sched.alpha,
            total: total / nb,
            train_ua: ua,
            train_pa: pa,
        };
        self.epoch += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Eval-mode probabilities for every training plot.
    pub fn predict_train(&self) -> Result<Vec<Array2<S>>> {
        self.inputs.iter().map(|x| self.network.predict(&self.params, x.view())).collect()
    }

    /// Strict pixel accuracy of eval-mode predictions at `p >= 0.5`.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let mut right = 0usize;
        let mut total = 0usize;
        for (p, y) in self.predict_train()?.iter().zip(&self.labels) {
            for (pv, &yv) in p.iter().zip(y.values().iter()) {
                right += usize::from((pv.to_f64_lossy() >= 0.5) == (yv == 1));
                total += 1;
            }
        }
        Ok(right as f64 / total as f64)
    }

    /// Youden-optimal threshold over the training plots.
    pub fn train_threshold(&self) -> Result<f64> {
        let mut probs = Vec::new();
        let mut truth = Vec::new();
        for (p, y) in self.predict_train()?.iter().zip(&self.labels) {
            probs.extend(p.iter().map(|v| v.to_f64_lossy()));
            truth.extend(y.values().iter().map(|&v| v == 1));
        }
        select_threshold(&probs, &truth)
    }

    pub fn checkpoint(&self, threshold: Option<f64>) -> Checkpoint<S> {
        Checkpoint::new(
            self.config,
            self.seed,
            self.epoch,
            threshold,
            self.params.clone(),
            Some(self.optimizer.clone()),
        )
    }

    /// Trains to the configured epoch budget, appending to the log in `out`
    /// and checkpointing every `checkpoint_every` epochs and at the end. The
    /// final checkpoint carries the training-set threshold when both classes
    /// are present.
    pub fn train(&mut self, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log = dir.join(LOG_FILE);
            if self.epoch == 0 || !log.exists() {
                fs::write(&log, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log, e))?;
            }
        }
        while self.epoch < self.config.epochs {
            let row = self.run_epoch()?;
            log::info!("epoch {} total {:.5} ce {:.5} bl {:.5}", row.epoch, row.total, row.ce, row.bl);
            if let Some(dir) = out {
                let path = dir.join(LOG_FILE);
                let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&path, e))?;
                if self.epoch % self.config.checkpoint_every == 0 && self.epoch < self.config.epochs {
                    self.checkpoint(None).save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            let threshold = match self.train_threshold() {
                Ok(t) => Some(t),
                Err(Error::SingleClass) => None,
                Err(e) => return Err(e),
            };
            self.checkpoint(threshold).save(dir)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
