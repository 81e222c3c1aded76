//! Bidirectional cGRU encoder, pyramid attention decoder, two csSE conv
//! blocks and a hypercolumn sigmoid head, with hand-written gradients.

mod block;
mod cgru;
mod fpa;
mod layers;
mod params;
mod tensor;

pub use block::{drop_block, warmup_momentum, ConvBlock, Renorm, RunningUpdate, DROP_BLOCK, RENORM_EPS, RENORM_MOMENTUM};
pub use cgru::{BidirectionalGru, GruDirection, Zoneout};
pub use fpa::{FeaturePyramid, FPA_MIN_SIZE};
pub use layers::{crop, reflect_pad, Conv2d, LayerNorm, SpatialGate};
pub use params::{Grads, Init, ParamId, ParamRegistry, ParamSpec, ParamStore};
pub use tensor::FeatureMap;

use ndarray::{s, Array2, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ChannelLayout;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_channels: usize,
    pub hidden_per_direction: usize,
    pub fpa_width: usize,
    /// Channels inside the pyramid levels.
    pub pyramid_width: usize,
    pub conv_block_width: usize,
    pub zoneout_prob: f64,
    pub dropblock_max: f64,
    pub head_prior: f64,
    /// Time steps fed to the encoder; fewer than 24 subsamples the stack.
    pub time_steps: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_channels: ChannelLayout::COUNT,
            hidden_per_direction: 32,
            fpa_width: 32,
            pyramid_width: 16,
            conv_block_width: 32,
            zoneout_prob: 0.2,
            dropblock_max: 0.2,
            head_prior: 0.01,
            time_steps: crate::raster::TIME_STEPS,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_channels", self.input_channels),
            ("hidden_per_direction", self.hidden_per_direction),
            ("fpa_width", self.fpa_width),
            ("pyramid_width", self.pyramid_width),
            ("conv_block_width", self.conv_block_width),
            ("time_steps", self.time_steps),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        for (name, p) in [("zoneout_prob", self.zoneout_prob), ("dropblock_max", self.dropblock_max)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, 1]")));
            }
        }
        if !(self.head_prior > 0.0 && self.head_prior < 1.0) {
            return Err(Error::invalid("head_prior", format!("{} outside (0, 1)", self.head_prior)));
        }
        if self.time_steps > crate::raster::TIME_STEPS || crate::raster::TIME_STEPS % self.time_steps != 0 {
            return Err(Error::invalid("time_steps", format!("{} must divide 24", self.time_steps)));
        }
        Ok(())
    }

    pub fn hypercolumn_width(&self) -> usize {
        2 * self.hidden_per_direction + self.fpa_width + 2 * self.conv_block_width
    }
}

/// Batch renormalization clamps `(rmax, dmax)` at an epoch.
pub fn renorm_clamps(epoch: u32) -> (f64, f64) {
    let e = epoch as f64;
    let rmax = 1.0 + 2.0 * ((e - 5.0) / 35.0).clamp(0.0, 1.0);
    let dmax = 5.0 * ((e - 5.0) / 20.0).clamp(0.0, 1.0);
    (rmax, dmax)
}

/// Test overrides for stochastic and gating layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hooks {
    pub zoneout: Option<f64>,
    pub dropblock: Option<f64>,
    /// Channel and spatial SE gates fixed to 1 in the conv blocks.
    pub neutral_se: bool,
    pub zero_attention: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub train: bool,
    pub epoch: u32,
    pub seed: u64,
    pub dropblock_prob: f64,
    pub rmax: f64,
    pub dmax: f64,
    /// Running-statistic momentum for training passes.
    pub stat_momentum: f64,
    pub hooks: Hooks,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            train: false,
            epoch: 0,
            seed: 0,
            dropblock_prob: 0.0,
            rmax: 1.0,
            dmax: 0.0,
            stat_momentum: RENORM_MOMENTUM,
            hooks: Hooks::default(),
        }
    }

    pub fn train(epoch: u32, seed: u64, dropblock_prob: f64) -> Self {
        let (rmax, dmax) = renorm_clamps(epoch);
        Self {
            train: true,
            epoch,
            seed,
            dropblock_prob,
            rmax,
            dmax,
            stat_momentum: RENORM_MOMENTUM,
            hooks: Hooks::default(),
        }
    }

    pub fn with_hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = hooks;
        self
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, sample: usize, layer: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, sample as u64), layer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub encoder: BidirectionalGru,
    pub pyramid: FeaturePyramid,
    pub blocks: [ConvBlock; 2],
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    registry: ParamRegistry,
}

struct SampleCache<S> {
    encoder: cgru::EncoderCache<S>,
    pyramid: fpa::FpaCache<S>,
    hyper: FeatureMap<S>,
}

/// State kept between a forward pass and its backward pass.
pub struct ForwardCache<S> {
    samples: Vec<SampleCache<S>>,
    blocks: Vec<block::BlockCache<S>>,
    hooks: Hooks,
}

pub struct ForwardPass<S> {
    /// Pre-sigmoid scores, one `[H, W]` grid per sample.
    pub logits: Vec<Array2<S>>,
    /// New running statistics; empty in eval mode.
    pub updates: Vec<RunningUpdate<S>>,
    pub cache: ForwardCache<S>,
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::default();
        let hid = config.hidden_per_direction;
        let encoder = BidirectionalGru::register(&mut reg, "encoder", config.input_channels, hid);
        let pyramid = FeaturePyramid::register(&mut reg, "pyramid", 2 * hid, config.fpa_width, config.pyramid_width);
        let b1 = ConvBlock::register(&mut reg, "block1", config.fpa_width, config.conv_block_width);
        let b2 = ConvBlock::register(&mut reg, "block2", config.conv_block_width, config.conv_block_width);
        let hw = config.hypercolumn_width();
        let head_weight = reg.add("head.weight", &[hw], Init::Normal { std: 0.01 });
        let prior = config.head_prior;
        let head_bias = reg.add("head.bias", &[1], Init::Const(-((1.0 - prior) / prior).ln()));
        Ok(Self {
            config,
            encoder,
            pyramid,
            blocks: [b1, b2],
            head_weight,
            head_bias,
            registry: reg,
        })
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamStore::initialize(&self.registry, &mut rng)
    }

    pub fn param_count(&self) -> usize {
        self.registry.learnable_count()
    }

    fn check_input<S: Scalar>(&self, x: &ArrayView4<'_, S>) -> Result<()> {
        let (t, h, w, c) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::shape("network input channels", self.config.input_channels, c));
        }
        if t == 0 {
            return Err(Error::Empty("network input time steps".into()));
        }
        if h < FPA_MIN_SIZE || w < FPA_MIN_SIZE {
            return Err(Error::shape(
                "network input",
                format!("at least {FPA_MIN_SIZE}x{FPA_MIN_SIZE}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Forward pass over a batch of `[T, H, W, C]` inputs sharing one shape.
    pub fn forward_batch<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        inputs: &[ArrayView4<'_, S>],
        mode: &Mode,
    ) -> Result<ForwardPass<S>> {
        let first = inputs.first().ok_or_else(|| Error::Empty("batch".into()))?;
        for x in inputs {
            self.check_input(x)?;
            if x.dim() != first.dim() {
                return Err(Error::shape("batch member", format!("{:?}", first.dim()), format!("{:?}", x.dim())));
            }
        }
        let hooks = mode.hooks;
        let zp = hooks.zoneout.unwrap_or(self.config.zoneout_prob);
        let zoneout = if mode.train { Zoneout::Sample(zp) } else { Zoneout::Expect(zp) };

        let front: Vec<(FeatureMap<S>, SampleCache<S>)> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| -> Result<_> {
                let steps: Vec<FeatureMap<S>> =
                    (0..x.dim().0).map(|t| FeatureMap::from_view(x.slice(s![t, .., .., ..]))).collect();
                let mut rng = stream(mode.seed, i, 0);
                let (enc, ec) = self.encoder.encode(ps, &steps, zoneout, &mut rng);
                enc.check_finite("encoder")?;
                let (dec, fc) = self.pyramid.forward(ps, &enc, hooks.zero_attention)?;
                dec.check_finite("pyramid")?;
                Ok((
                    dec,
                    SampleCache {
                        encoder: ec,
                        pyramid: fc,
                        hyper: enc,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let (decoded, mut samples): (Vec<_>, Vec<_>) = front.into_iter().unzip();

        let renorm = Renorm {
            train: mode.train,
            rmax: mode.rmax,
            dmax: mode.dmax,
            momentum: mode.stat_momentum,
        };
        let drop_prob = hooks.dropblock.unwrap_or(mode.dropblock_prob);
        let mut block_caches = Vec::with_capacity(2);
        let mut updates = Vec::new();
        let mut block_outs: Vec<Vec<FeatureMap<S>>> = Vec::with_capacity(2);
        let mut cur = decoded.clone();
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut rngs: Vec<ChaCha8Rng> = (0..inputs.len()).map(|i| stream(mode.seed, i, 1 + b as u64)).collect();
            let (out, cache, update) = blk.forward_batch(ps, &cur, renorm, hooks.neutral_se, drop_prob, &mut rngs);
            for o in &out {
                o.check_finite(&format!("block{}", b + 1))?;
            }
            block_caches.push(cache);
            updates.extend(update);
            block_outs.push(out.clone());
            cur = out;
        }

        let wts = ps.get(self.head_weight);
        let bias = ps.get(self.head_bias)[0];
        let mut logits = Vec::with_capacity(inputs.len());
        for (i, sc) in samples.iter_mut().enumerate() {
            let hyper = FeatureMap::concat(&[&sc.hyper, &decoded[i], &block_outs[0][i], &block_outs[1][i]]);
            let grid: Vec<S> = hyper
                .data
                .chunks_exact(hyper.c)
                .map(|px| bias + px.iter().zip(wts).map(|(&a, &b)| a * b).sum::<S>())
                .collect();
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("activations of head".into()));
            }
            logits.push(Array2::from_shape_vec((hyper.h, hyper.w), grid).expect("consistent shape"));
            sc.hyper = hyper;
        }
        Ok(ForwardPass {
            logits,
            updates,
            cache: ForwardCache {
                samples,
                blocks: block_caches,
                hooks,
            },
        })
    }

    /// Parameter gradients given `dL/dlogits` for every sample.
    pub fn backward_batch<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &ForwardCache<S>,
        dlogits: &[Array2<S>],
    ) -> Grads<S> {
        let cfg = &self.config;
        let mut grads = Grads::zeros_like(ps);
        let wts = ps.get(self.head_weight);
        let widths = [2 * cfg.hidden_per_direction, cfg.fpa_width, cfg.conv_block_width, cfg.conv_block_width];
        let mut d_enc = Vec::with_capacity(dlogits.len());
        let mut d_dec = Vec::with_capacity(dlogits.len());
        let mut d_b1 = Vec::with_capacity(dlogits.len());
        let mut d_b2 = Vec::with_capacity(dlogits.len());
        for (sc, dl) in cache.samples.iter().zip(dlogits) {
            let hyper = &sc.hyper;
            let mut dh = FeatureMap::zeros(hyper.h, hyper.w, hyper.c);
            {
                let dw = grads.get_mut(self.head_weight);
                for (p, &g) in dl.iter().enumerate() {
                    let px = &hyper.data[p * hyper.c..(p + 1) * hyper.c];
                    let dpx = &mut dh.data[p * hyper.c..(p + 1) * hyper.c];
                    for j in 0..hyper.c {
                        dw[j] += g * px[j];
                        dpx[j] = g * wts[j];
                    }
                }
            }
            grads.get_mut(self.head_bias)[0] += dl.iter().copied().sum::<S>();
            let mut parts = dh.split(&widths).into_iter();
            d_enc.push(parts.next().expect("four parts"));
            d_dec.push(parts.next().expect("four parts"));
            d_b1.push(parts.next().expect("four parts"));
            d_b2.push(parts.next().expect("four parts"));
        }
        let neutral = cache.hooks.neutral_se;
        let dx2 = self.blocks[1].backward_batch(ps, &cache.blocks[1], &d_b2, &mut grads, neutral, true);
        for (a, b) in d_b1.iter_mut().zip(dx2) {
            a.add_assign(&b.expect("dx requested"));
        }
        let dx1 = self.blocks[0].backward_batch(ps, &cache.blocks[0], &d_b1, &mut grads, neutral, true);
        for (a, b) in d_dec.iter_mut().zip(dx1) {
            a.add_assign(&b.expect("dx requested"));
        }

        let per_sample: Vec<Grads<S>> = cache
            .samples
            .par_iter()
            .zip(d_dec.par_iter().zip(d_enc.par_iter()))
            .map(|(sc, (dd, de))| {
                let mut g = Grads::zeros_like(ps);
                let mut denc = self.pyramid.backward(ps, &sc.pyramid, dd, &mut g);
                denc.add_assign(de);
                self.encoder.encode_backward(ps, &sc.encoder, &denc, &mut g);
                g
            })
            .collect();
        for g in &per_sample {
            grads.add(g);
        }
        grads
    }

    /// Eval-mode probabilities for one `[T, H, W, C]` input.
    pub fn predict<S: Scalar>(&self, ps: &ParamStore<S>, input: ArrayView4<'_, S>) -> Result<Array2<S>> {
        let pass = self.forward_batch(ps, &[input], &Mode::eval())?;
        Ok(pass.logits[0].mapv(sigmoid))
    }
}

/// Writes running-statistic updates into the store.
pub fn apply_running_updates<S: Scalar>(ps: &mut ParamStore<S>, updates: &[RunningUpdate<S>]) {
    for u in updates {
        ps.get_mut(u.mean_id).copy_from_slice(&u.mean);
        ps.get_mut(u.std_id).copy_from_slice(&u.std);
    }
}

/// Learnable parameter count for a configuration.
pub fn param_count(config: &NetConfig) -> Result<usize> {
    Ok(Network::new(*config)?.param_count())
}
