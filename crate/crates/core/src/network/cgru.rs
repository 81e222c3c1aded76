//! Bidirectional convolutional GRU with layer-normalized, SE-gated updates.

use rand::Rng;

use crate::network::layers::{Conv2d, LayerNorm, LayerNormCache, SpatialGate};
use crate::network::params::{Grads, ParamRegistry, ParamStore};
use crate::network::tensor::FeatureMap;
use crate::scalar::{sigmoid, Scalar};

/// One recurrent direction; weights shared across time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub conv_gates: Conv2d,
    pub conv_candidate: Conv2d,
    pub ln_update: LayerNorm,
    pub ln_reset: LayerNorm,
    pub ln_candidate: LayerNorm,
    pub se_update: SpatialGate,
    pub se_reset: SpatialGate,
    pub cin: usize,
    pub hidden: usize,
}

/// How zoneout mixes the previous and the new state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Zoneout {
    /// Each unit keeps its previous value with this probability.
    Sample(f64),
    /// Deterministic mixing by the keep probability.
    Expect(f64),
}

#[derive(Debug, Clone)]
pub struct StepCache<S> {
    xh: FeatureMap<S>,
    h_prev: FeatureMap<S>,
    ln_update: LayerNormCache<S>,
    ln_reset: LayerNormCache<S>,
    ln_candidate: LayerNormCache<S>,
    s_update: FeatureMap<S>,
    s_reset: FeatureMap<S>,
    q_update: Vec<S>,
    q_reset: Vec<S>,
    update: FeatureMap<S>,
    reset: FeatureMap<S>,
    xrh: FeatureMap<S>,
    candidate: FeatureMap<S>,
    keep: Vec<S>,
}

fn scale_by_pixel<S: Scalar>(x: &FeatureMap<S>, q: &[S]) -> FeatureMap<S> {
    let mut out = x.clone();
    for (px, &g) in out.data.chunks_exact_mut(x.c).zip(q) {
        px.iter_mut().for_each(|v| *v *= g);
    }
    out
}

impl GruDirection {
    pub fn register(reg: &mut ParamRegistry, name: &str, cin: usize, hidden: usize) -> Self {
        let k = 3;
        let cat = cin + hidden;
        Self {
            conv_gates: Conv2d::register(
                reg,
                &format!("{name}.gates"),
                k,
                cat,
                2 * hidden,
                1,
                false,
                Conv2d::glorot(k, cat, 2 * hidden),
            ),
            conv_candidate: Conv2d::register(
                reg,
                &format!("{name}.candidate"),
                k,
                cat,
                hidden,
                1,
                false,
                Conv2d::glorot(k, cat, hidden),
            ),
            ln_update: LayerNorm::register(reg, &format!("{name}.ln_update"), hidden),
            ln_reset: LayerNorm::register(reg, &format!("{name}.ln_reset"), hidden),
            ln_candidate: LayerNorm::register(reg, &format!("{name}.ln_candidate"), hidden),
            se_update: SpatialGate::register(reg, &format!("{name}.se_update"), hidden),
            se_reset: SpatialGate::register(reg, &format!("{name}.se_reset"), hidden),
            cin,
            hidden,
        }
    }

    pub fn step<S: Scalar, R: Rng>(
        &self,
        ps: &ParamStore<S>,
        x: &FeatureMap<S>,
        h_prev: &FeatureMap<S>,
        zoneout: Zoneout,
        rng: &mut R,
    ) -> (FeatureMap<S>, StepCache<S>) {
        let hid = self.hidden;
        let xh = FeatureMap::concat(&[x, h_prev]);
        let gates = self.conv_gates.forward(ps, &xh).split(&[hid, hid]);
        let (lz, ln_update) = self.ln_update.forward(ps, &gates[0]);
        let (lr, ln_reset) = self.ln_reset.forward(ps, &gates[1]);
        let s_update = lz.map(sigmoid);
        let s_reset = lr.map(sigmoid);
        let q_update = self.se_update.gate(ps, &s_update, false);
        let q_reset = self.se_reset.gate(ps, &s_reset, false);
        let update = scale_by_pixel(&s_update, &q_update);
        let reset = scale_by_pixel(&s_reset, &q_reset);

        let mut rh = h_prev.clone();
        for (v, &r) in rh.data.iter_mut().zip(&reset.data) {
            *v *= r;
        }
        let xrh = FeatureMap::concat(&[x, &rh]);
        let (lc, ln_candidate) = self.ln_candidate.forward(ps, &self.conv_candidate.forward(ps, &xrh));
        let candidate = lc.map(|v| v.tanh());

        let n = h_prev.data.len();
        let keep: Vec<S> = match zoneout {
            Zoneout::Sample(p) => (0..n)
                .map(|_| if rng.random::<f64>() < p { S::one() } else { S::zero() })
                .collect(),
            Zoneout::Expect(p) => vec![S::c(p); n],
        };
        let mut h = h_prev.clone();
        for i in 0..n {
            let hp = h_prev.data[i];
            let z = update.data[i];
            let fresh = (S::one() - z) * hp + z * candidate.data[i];
            let k = keep[i];
            h.data[i] = if k == S::one() { hp } else { k * hp + (S::one() - k) * fresh };
        }
        let cache = StepCache {
            xh,
            h_prev: h_prev.clone(),
            ln_update,
            ln_reset,
            ln_candidate,
            s_update,
            s_reset,
            q_update,
            q_reset,
            update,
            reset,
            xrh,
            candidate,
            keep,
        };
        (h, cache)
    }

    /// Returns `dL/dh_prev`.
    pub fn step_backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &StepCache<S>,
        dh: &FeatureMap<S>,
        grads: &mut Grads<S>,
    ) -> FeatureMap<S> {
        let hid = self.hidden;
        let n = dh.data.len();
        let mut dh_prev = dh.clone();
        let mut dz = FeatureMap::zeros(dh.h, dh.w, hid);
        let mut dlc = FeatureMap::zeros(dh.h, dh.w, hid);
        for i in 0..n {
            let k = cache.keep[i];
            let dfresh = (S::one() - k) * dh.data[i];
            let z = cache.update.data[i];
            let c = cache.candidate.data[i];
            let hp = cache.h_prev.data[i];
            dh_prev.data[i] = k * dh.data[i] + dfresh * (S::one() - z);
            dz.data[i] = dfresh * (c - hp);
            dlc.data[i] = dfresh * z * (S::one() - c * c);
        }
        let dac = self.ln_candidate.backward(ps, &cache.ln_candidate, &dlc, grads);
        let dxrh = self
            .conv_candidate
            .backward(ps, &cache.xrh, &dac, grads, true)
            .expect("dx requested");
        let drh = &dxrh.split(&[self.cin, hid])[1];
        let mut dr = FeatureMap::zeros(dh.h, dh.w, hid);
        for i in 0..n {
            dr.data[i] = drh.data[i] * cache.h_prev.data[i];
            dh_prev.data[i] += drh.data[i] * cache.reset.data[i];
        }

        let gate_back = |s: &FeatureMap<S>,
                         q: &[S],
                         se: &SpatialGate,
                         ln: &LayerNorm,
                         lc: &LayerNormCache<S>,
                         d: &FeatureMap<S>,
                         grads: &mut Grads<S>| {
            let mut ds = se.backward(ps, s, q, d, grads, false);
            for (g, &v) in ds.data.iter_mut().zip(&s.data) {
                *g *= v * (S::one() - v);
            }
            ln.backward(ps, lc, &ds, grads)
        };
        let daz = gate_back(
            &cache.s_update,
            &cache.q_update,
            &self.se_update,
            &self.ln_update,
            &cache.ln_update,
            &dz,
            grads,
        );
        let dar = gate_back(
            &cache.s_reset,
            &cache.q_reset,
            &self.se_reset,
            &self.ln_reset,
            &cache.ln_reset,
            &dr,
            grads,
        );
        let dgates = FeatureMap::concat(&[&daz, &dar]);
        let dxh = self
            .conv_gates
            .backward(ps, &cache.xh, &dgates, grads, true)
            .expect("dx requested");
        dh_prev.add_assign(&dxh.split(&[self.cin, hid])[1]);
        dh_prev
    }

    /// Runs over `inputs` in the given order from a zero state.
    pub fn run<S: Scalar, R: Rng>(
        &self,
        ps: &ParamStore<S>,
        inputs: &[&FeatureMap<S>],
        zoneout: Zoneout,
        rng: &mut R,
    ) -> (FeatureMap<S>, Vec<StepCache<S>>) {
        let (h, w) = (inputs[0].h, inputs[0].w);
        let mut state = FeatureMap::zeros(h, w, self.hidden);
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, cache) = self.step(ps, x, &state, zoneout, rng);
            state = next;
            caches.push(cache);
        }
        (state, caches)
    }

    pub fn run_backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        caches: &[StepCache<S>],
        d_final: &FeatureMap<S>,
        grads: &mut Grads<S>,
    ) {
        let mut dh = d_final.clone();
        for cache in caches.iter().rev() {
            dh = self.step_backward(ps, cache, &dh, grads);
        }
    }
}

/// Forward-in-time and backward-in-time directions with separate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalGru {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    forward: Vec<StepCache<S>>,
    backward: Vec<StepCache<S>>,
}

impl BidirectionalGru {
    pub fn register(reg: &mut ParamRegistry, name: &str, cin: usize, hidden: usize) -> Self {
        Self {
            forward: GruDirection::register(reg, &format!("{name}.forward"), cin, hidden),
            backward: GruDirection::register(reg, &format!("{name}.backward"), cin, hidden),
        }
    }

    pub fn out_channels(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Final states of both directions concatenated channel-wise.
    pub fn encode<S: Scalar, R: Rng>(
        &self,
        ps: &ParamStore<S>,
        steps: &[FeatureMap<S>],
        zoneout: Zoneout,
        rng: &mut R,
    ) -> (FeatureMap<S>, EncoderCache<S>) {
        let fwd: Vec<&FeatureMap<S>> = steps.iter().collect();
        let bwd: Vec<&FeatureMap<S>> = steps.iter().rev().collect();
        let (hf, cf) = self.forward.run(ps, &fwd, zoneout, rng);
        let (hb, cb) = self.backward.run(ps, &bwd, zoneout, rng);
        (
            FeatureMap::concat(&[&hf, &hb]),
            EncoderCache {
                forward: cf,
                backward: cb,
            },
        )
    }

    pub fn encode_backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &EncoderCache<S>,
        dout: &FeatureMap<S>,
        grads: &mut Grads<S>,
    ) {
        let hid = self.forward.hidden;
        let parts = dout.split(&[hid, hid]);
        self.forward.run_backward(ps, &cache.forward, &parts[0], grads);
        self.backward.run_backward(ps, &cache.backward, &parts[1], grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    fn cell() -> (GruDirection, ParamStore<f64>) {
        let mut reg = ParamRegistry::default();
        let dir = GruDirection::register(&mut reg, "gru", 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::initialize(&reg, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.get_mut(id) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        (dir, ps)
    }

    #[test]
    fn zoneout_one_keeps_previous_state() {
        let (dir, ps) = cell();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, 4, 4, 3);
        let h = random_map(&mut rng, 4, 4, 4);
        for z in [Zoneout::Sample(1.0), Zoneout::Expect(1.0)] {
            let (out, _) = dir.step(&ps, &x, &h, z, &mut rng);
            assert_eq!(out, h);
        }
    }

    #[test]
    fn eval_step_is_deterministic() {
        let (dir, ps) = cell();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, 4, 5, 3);
        let h = random_map(&mut rng, 4, 5, 4);
        let a = dir.step(&ps, &x, &h, Zoneout::Expect(0.2), &mut rng).0;
        let b = dir.step(&ps, &x, &h, Zoneout::Expect(0.2), &mut rng).0;
        assert_eq!(a, b);
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let (dir, mut ps) = cell();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_map(&mut rng, 4, 4, 3);
        let h = random_map(&mut rng, 4, 4, 4);
        let dy = random_map(&mut rng, 4, 4, 4);
        let seed = 11;
        let loss = |ps: &ParamStore<f64>, h: &FeatureMap<f64>| -> f64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (out, _) = dir.step(ps, &x, h, Zoneout::Sample(0.3), &mut r);
            out.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (_, cache) = dir.step(&ps, &x, &h, Zoneout::Sample(0.3), &mut r);
        let mut grads = Grads::zeros_like(&ps);
        let dh = dir.step_backward(&ps, &cache, &dy, &mut grads);
        let eps = 1e-6;
        let rel = |a: &[f64], b: &[f64]| -> f64 {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / n.max(1e-300)
        };
        let num_dh: Vec<f64> = (0..h.data.len())
            .map(|i| {
                let mut hp = h.clone();
                hp.data[i] += eps;
                let mut hm = h.clone();
                hm.data[i] -= eps;
                (loss(&ps, &hp) - loss(&ps, &hm)) / (2.0 * eps)
            })
            .collect();
        assert!(rel(&num_dh, &dh.data) < 1e-4);
        for id in ps.ids().collect::<Vec<_>>() {
            let num: Vec<f64> = (0..ps.get(id).len())
                .map(|i| {
                    let orig = ps.get(id)[i];
                    ps.get_mut(id)[i] = orig + eps;
                    let lp = loss(&ps, &h);
                    ps.get_mut(id)[i] = orig - eps;
                    let lm = loss(&ps, &h);
                    ps.get_mut(id)[i] = orig;
                    (lp - lm) / (2.0 * eps)
                })
                .collect();
            let e = rel(&num, grads.get(id));
            assert!(e < 1e-4, "{} rel err {e}", ps.specs()[id.index()].name);
        }
    }
}
