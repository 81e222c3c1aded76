//! Conv block: 3x3 conv, batch renormalization, ReLU, csSE, DropBlock.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::network::layers::{relu, relu_backward, Conv2d, SpatialGate};
use crate::network::params::{Grads, Init, ParamId, ParamRegistry, ParamStore};
use crate::network::tensor::FeatureMap;
use crate::scalar::{sigmoid, Scalar};

pub const RENORM_EPS: f64 = 1e-3;
pub const RENORM_MOMENTUM: f64 = 0.9;
pub const DROP_BLOCK: usize = 3;

/// Batch renormalization settings for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renorm {
    pub train: bool,
    pub rmax: f64,
    pub dmax: f64,
    /// Weight kept by the running statistics on a training pass.
    pub momentum: f64,
}

/// Running-statistic momentum after `updates` earlier updates: a cumulative
/// average until it reaches [`RENORM_MOMENTUM`].
pub fn warmup_momentum(updates: u64) -> f64 {
    let k = updates as f64;
    (k / (k + 1.0)).min(RENORM_MOMENTUM)
}

/// Running-statistic values produced by a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate<S> {
    pub mean_id: ParamId,
    pub std_id: ParamId,
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_std: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub spatial: SpatialGate,
    pub c: usize,
    pub reduced: usize,
}

#[derive(Debug, Clone)]
struct RecalCache<S> {
    relu_out: FeatureMap<S>,
    squeeze: Vec<S>,
    hidden: Vec<S>,
    channel_gate: Vec<S>,
    spatial_gate: Vec<S>,
    channel_wins: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    inputs: Vec<FeatureMap<S>>,
    normalized: Vec<FeatureMap<S>>,
    spread: Vec<S>,
    r: Vec<S>,
    d: Vec<S>,
    train: bool,
    recal: Vec<RecalCache<S>>,
    drop: Vec<Option<(Vec<bool>, S)>>,
}

impl ConvBlock {
    pub fn register(reg: &mut ParamRegistry, name: &str, cin: usize, c: usize) -> Self {
        let reduced = (c / 2).max(1);
        Self {
            conv: Conv2d::register(reg, &format!("{name}.conv"), 3, cin, c, 1, false, Conv2d::he(3, cin)),
            gamma: reg.add(format!("{name}.renorm.gamma"), &[c], Init::Const(1.0)),
            beta: reg.add(format!("{name}.renorm.beta"), &[c], Init::Zeros),
            running_mean: reg.add_state(format!("{name}.renorm.running_mean"), &[c], Init::Zeros),
            running_std: reg.add_state(format!("{name}.renorm.running_std"), &[c], Init::Const(1.0)),
            fc1_weight: reg.add(
                format!("{name}.cse.fc1.weight"),
                &[c, reduced],
                Init::GlorotUniform {
                    fan_in: c,
                    fan_out: reduced,
                },
            ),
            fc1_bias: reg.add(format!("{name}.cse.fc1.bias"), &[reduced], Init::Zeros),
            fc2_weight: reg.add(
                format!("{name}.cse.fc2.weight"),
                &[reduced, c],
                Init::GlorotUniform {
                    fan_in: reduced,
                    fan_out: c,
                },
            ),
            fc2_bias: reg.add(format!("{name}.cse.fc2.bias"), &[c], Init::Zeros),
            spatial: SpatialGate::register(reg, &format!("{name}.sse"), c),
            c,
            reduced,
        }
    }

    /// Batch statistics `(mean, sqrt(var + eps))` per channel.
    fn batch_stats<S: Scalar>(&self, xs: &[FeatureMap<S>]) -> (Vec<S>, Vec<S>) {
        let c = self.c;
        let n = S::c(xs.iter().map(|x| x.pixels()).sum::<usize>() as f64);
        let mut mean = vec![S::zero(); c];
        for x in xs {
            for px in x.data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![S::zero(); c];
        for x in xs {
            for px in x.data.chunks_exact(c) {
                for j in 0..c {
                    let d = px[j] - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let std = var.into_iter().map(|v| (v / n + S::c(RENORM_EPS)).sqrt()).collect();
        (mean, std)
    }

    /// `(block outputs, cache, running-stat update)`; the update is `None` in eval mode.
    pub fn forward_batch<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        inputs: &[FeatureMap<S>],
        renorm: Renorm,
        neutral_se: bool,
        drop_prob: f64,
        rngs: &mut [ChaCha8Rng],
    ) -> (Vec<FeatureMap<S>>, BlockCache<S>, Option<RunningUpdate<S>>) {
        let c = self.c;
        let pre: Vec<FeatureMap<S>> = inputs.iter().map(|x| self.conv.forward(ps, x)).collect();
        let run_mean = ps.get(self.running_mean);
        let run_std = ps.get(self.running_std);
        let (center, spread, r, d, update) = if renorm.train {
            let (mean, std) = self.batch_stats(&pre);
            let rmax = S::c(renorm.rmax);
            let dmax = S::c(renorm.dmax);
            let r: Vec<S> = (0..c).map(|j| (std[j] / run_std[j]).max(S::one() / rmax).min(rmax)).collect();
            let d: Vec<S> = (0..c)
                .map(|j| ((mean[j] - run_mean[j]) / run_std[j]).max(-dmax).min(dmax))
                .collect();
            let m = S::c(renorm.momentum);
            let update = RunningUpdate {
                mean_id: self.running_mean,
                std_id: self.running_std,
                mean: (0..c).map(|j| m * run_mean[j] + (S::one() - m) * mean[j]).collect(),
                std: (0..c).map(|j| m * run_std[j] + (S::one() - m) * std[j]).collect(),
            };
            (mean, std, r, d, Some(update))
        } else {
            (run_mean.to_vec(), run_std.to_vec(), vec![S::one(); c], vec![S::zero(); c], None)
        };
        let (gamma, beta) = (ps.get(self.gamma), ps.get(self.beta));
        let mut normalized = Vec::with_capacity(pre.len());
        let mut outputs = Vec::with_capacity(pre.len());
        let mut recal = Vec::with_capacity(pre.len());
        let mut drop = Vec::with_capacity(pre.len());
        for (i, p) in pre.iter().enumerate() {
            let mut xhat = p.clone();
            let mut y = p.clone();
            for (k, v) in xhat.data.iter_mut().enumerate() {
                let j = k % c;
                *v = (*v - center[j]) / spread[j] * r[j] + d[j];
                y.data[k] = gamma[j] * *v + beta[j];
            }
            normalized.push(xhat);
            let u = relu(&y);
            let (mut out, rc) = self.recalibrate(ps, u, neutral_se);
            let dm = if renorm.train { drop_block(&mut out, drop_prob, &mut rngs[i]) } else { None };
            outputs.push(out);
            recal.push(rc);
            drop.push(dm);
        }
        let cache = BlockCache {
            inputs: inputs.to_vec(),
            normalized,
            spread,
            r,
            d,
            train: renorm.train,
            recal,
            drop,
        };
        (outputs, cache, update)
    }

    fn recalibrate<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        u: FeatureMap<S>,
        neutral: bool,
    ) -> (FeatureMap<S>, RecalCache<S>) {
        let (c, rd) = (self.c, self.reduced);
        let squeeze = u.channel_means();
        let (hidden, channel_gate) = if neutral {
            (vec![S::zero(); rd], vec![S::one(); c])
        } else {
            let (w1, b1) = (ps.get(self.fc1_weight), ps.get(self.fc1_bias));
            let (w2, b2) = (ps.get(self.fc2_weight), ps.get(self.fc2_bias));
            let hidden: Vec<S> = (0..rd)
                .map(|k| {
                    let a = b1[k] + (0..c).map(|j| squeeze[j] * w1[j * rd + k]).sum::<S>();
                    a.max(S::zero())
                })
                .collect();
            let gate = (0..c)
                .map(|j| sigmoid(b2[j] + (0..rd).map(|k| hidden[k] * w2[k * c + j]).sum::<S>()))
                .collect();
            (hidden, gate)
        };
        let spatial_gate = self.spatial.gate(ps, &u, neutral);
        let mut out = u.clone();
        let mut channel_wins = vec![false; u.data.len()];
        for (p, px) in out.data.chunks_exact_mut(c).enumerate() {
            let q = spatial_gate[p];
            for j in 0..c {
                let v = px[j];
                let a = v * channel_gate[j];
                let b = v * q;
                channel_wins[p * c + j] = a >= b;
                px[j] = if a >= b { a } else { b };
            }
        }
        (
            out,
            RecalCache {
                relu_out: u,
                squeeze,
                hidden,
                channel_gate,
                spatial_gate,
                channel_wins,
            },
        )
    }

    fn recalibrate_backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        rc: &RecalCache<S>,
        dout: &FeatureMap<S>,
        grads: &mut Grads<S>,
        neutral: bool,
    ) -> FeatureMap<S> {
        let (c, rd) = (self.c, self.reduced);
        let u = &rc.relu_out;
        let mut dchan = dout.clone();
        let mut dspat = dout.clone();
        for (k, &won) in rc.channel_wins.iter().enumerate() {
            if won {
                dspat.data[k] = S::zero();
            } else {
                dchan.data[k] = S::zero();
            }
        }
        let mut du = self.spatial.backward(ps, u, &rc.spatial_gate, &dspat, grads, neutral);
        let mut dgate = vec![S::zero(); c];
        for (k, (&g, &v)) in dchan.data.iter().zip(&u.data).enumerate() {
            let j = k % c;
            du.data[k] += g * rc.channel_gate[j];
            dgate[j] += g * v;
        }
        if neutral {
            return du;
        }
        let w1 = ps.get(self.fc1_weight);
        let w2 = ps.get(self.fc2_weight);
        let dpre2: Vec<S> = (0..c)
            .map(|j| dgate[j] * rc.channel_gate[j] * (S::one() - rc.channel_gate[j]))
            .collect();
        let mut dhidden = vec![S::zero(); rd];
        {
            let dw2 = grads.get_mut(self.fc2_weight);
            for k in 0..rd {
                for j in 0..c {
                    dw2[k * c + j] += rc.hidden[k] * dpre2[j];
                    dhidden[k] += w2[k * c + j] * dpre2[j];
                }
            }
        }
        for (a, &v) in grads.get_mut(self.fc2_bias).iter_mut().zip(&dpre2) {
            *a += v;
        }
        let dpre1: Vec<S> = (0..rd)
            .map(|k| if rc.hidden[k] > S::zero() { dhidden[k] } else { S::zero() })
            .collect();
        let mut dsq = vec![S::zero(); c];
        {
            let dw1 = grads.get_mut(self.fc1_weight);
            for j in 0..c {
                for k in 0..rd {
                    dw1[j * rd + k] += rc.squeeze[j] * dpre1[k];
                    dsq[j] += w1[j * rd + k] * dpre1[k];
                }
            }
        }
        for (a, &v) in grads.get_mut(self.fc1_bias).iter_mut().zip(&dpre1) {
            *a += v;
        }
        let n = S::c(u.pixels() as f64);
        for px in du.data.chunks_exact_mut(c) {
            for j in 0..c {
                px[j] += dsq[j] / n;
            }
        }
        du
    }

    /// Gradients w.r.t. the block inputs.
    pub fn backward_batch<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &BlockCache<S>,
        douts: &[FeatureMap<S>],
        grads: &mut Grads<S>,
        neutral_se: bool,
        need_dx: bool,
    ) -> Vec<Option<FeatureMap<S>>> {
        let c = self.c;
        let gamma = ps.get(self.gamma);
        let mut dxhat_all = Vec::with_capacity(douts.len());
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for (i, dout) in douts.iter().enumerate() {
            let mut d = dout.clone();
            if let Some((mask, scale)) = &cache.drop[i] {
                for (k, v) in d.data.iter_mut().enumerate() {
                    *v = if mask[k / c] { *v * *scale } else { S::zero() };
                }
            }
            let rc = &cache.recal[i];
            let du = self.recalibrate_backward(ps, rc, &d, grads, neutral_se);
            let dy = relu_backward(&rc.relu_out, &du);
            let xhat = &cache.normalized[i];
            let mut dxhat = dy.clone();
            for (k, v) in dxhat.data.iter_mut().enumerate() {
                let j = k % c;
                dgamma[j] += dy.data[k] * xhat.data[k];
                dbeta[j] += dy.data[k];
                *v = dy.data[k] * gamma[j];
            }
            dxhat_all.push(dxhat);
        }
        for (a, v) in grads.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a += v;
        }
        for (a, v) in grads.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a += v;
        }

        // through the normalization; r and d are constants
        let dpre: Vec<FeatureMap<S>> = if cache.train {
            let n = S::c(cache.normalized.iter().map(|x| x.pixels()).sum::<usize>() as f64);
            let mut m1 = vec![S::zero(); c];
            let mut m2 = vec![S::zero(); c];
            for (xhat, dxh) in cache.normalized.iter().zip(dxhat_all.iter_mut()) {
                for (k, g) in dxh.data.iter_mut().enumerate() {
                    let j = k % c;
                    let z = (xhat.data[k] - cache.d[j]) / cache.r[j];
                    *g *= cache.r[j];
                    m1[j] += *g;
                    m2[j] += *g * z;
                }
            }
            m1.iter_mut().for_each(|v| *v /= n);
            m2.iter_mut().for_each(|v| *v /= n);
            cache
                .normalized
                .iter()
                .zip(dxhat_all)
                .map(|(xhat, mut g)| {
                    for (k, v) in g.data.iter_mut().enumerate() {
                        let j = k % c;
                        let z = (xhat.data[k] - cache.d[j]) / cache.r[j];
                        *v = (*v - m1[j] - z * m2[j]) / cache.spread[j];
                    }
                    g
                })
                .collect()
        } else {
            dxhat_all
                .into_iter()
                .map(|mut g| {
                    for (k, v) in g.data.iter_mut().enumerate() {
                        *v /= cache.spread[k % c];
                    }
                    g
                })
                .collect()
        };
        cache
            .inputs
            .iter()
            .zip(&dpre)
            .map(|(x, g)| self.conv.backward(ps, x, g, grads, need_dx))
            .collect()
    }
}

/// Zeroes 3x3 blocks in place and rescales survivors; returns the keep mask.
pub fn drop_block<S: Scalar>(x: &mut FeatureMap<S>, prob: f64, rng: &mut ChaCha8Rng) -> Option<(Vec<bool>, S)> {
    let b = DROP_BLOCK;
    if prob <= 0.0 || x.h < b || x.w < b {
        return None;
    }
    let (h, w) = (x.h, x.w);
    let gamma = prob / (b * b) as f64 * (h * w) as f64 / ((h - b + 1) * (w - b + 1)) as f64;
    let mut keep = vec![true; h * w];
    for r in b / 2..h - b / 2 {
        for c in b / 2..w - b / 2 {
            if rng.random::<f64>() < gamma {
                for dr in 0..b {
                    for dc in 0..b {
                        keep[(r + dr - b / 2) * w + (c + dc - b / 2)] = false;
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = S::c((h * w) as f64 / kept.max(1) as f64);
    for (p, px) in x.data.chunks_exact_mut(x.c).enumerate() {
        if keep[p] {
            px.iter_mut().for_each(|v| *v *= scale);
        } else {
            px.iter_mut().for_each(|v| *v = S::zero());
        }
    }
    Some((keep, scale))
}
