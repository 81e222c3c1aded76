//! Adam moments with per-element step sizes clipped into converging bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaBoundConfig {
    pub lr: f64,
    pub final_lr: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Floor applied to the lower bound.
    pub min_rate: f64,
    /// Ceiling applied to the upper bound.
    pub max_rate: f64,
    /// Test hook: drop the bounds, reducing the update to Adam.
    #[serde(skip)]
    pub unbounded: bool,
}

impl Default for AdaBoundConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            final_lr: 2e-2,
            gamma: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_rate: 1e-4,
            max_rate: 2e-2,
            unbounded: false,
        }
    }
}

impl AdaBoundConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("final_lr", self.final_lr), ("gamma", self.gamma), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} outside [0, 1)")));
            }
        }
        if !(self.min_rate > 0.0 && self.min_rate <= self.max_rate) {
            return Err(Error::invalid(
                "rate bounds",
                format!("[{}, {}] is not a positive interval", self.min_rate, self.max_rate),
            ));
        }
        Ok(())
    }

    /// Step-size interval at step `t >= 1`.
    pub fn bounds(&self, t: u64) -> (f64, f64) {
        if self.unbounded {
            return (0.0, f64::INFINITY);
        }
        let gt = self.gamma * t as f64;
        let lower = self.final_lr * (1.0 - 1.0 / (gt + 1.0));
        let upper = self.final_lr * (1.0 + 1.0 / gt);
        (lower.clamp(self.min_rate, self.max_rate), upper.clamp(self.min_rate, self.max_rate))
    }
}

/// Moments are kept in 64-bit regardless of the parameter scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaBound {
    pub config: AdaBoundConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdaBound {
    pub fn new<S: Scalar>(config: AdaBoundConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|v| vec![0.0; v.len()]).collect();
        Ok(Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &Grads<S>) -> Result<()> {
        for (spec, g) in params.specs().iter().zip(grads.values()) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", spec.name)));
            }
        }
        if self.m.len() != grads.values().len() {
            return Err(Error::shape("optimizer state", self.m.len(), grads.values().len()));
        }
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let step_size = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (lower, upper) = c.bounds(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !params.specs()[k].learnable {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in params.get_mut(id).iter_mut().enumerate() {
                let gj = g[j].to_f64_lossy();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let rate = (step_size / (v[j].sqrt() + c.eps)).clamp(lower, upper);
                *p = S::c(p.to_f64_lossy() - rate * m[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Init, ParamRegistry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore<f64>, Grads<f64>) {
        let mut reg = ParamRegistry::default();
        reg.add("a", &[3, 4], Init::Normal { std: 1.0 });
        reg.add("b", &[5], Init::Normal { std: 1.0 });
        reg.add_state("s", &[2], Init::Const(1.0));
        let ps = ParamStore::initialize(&reg, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Grads::zeros_like(&ps);
        (ps, g)
    }

    fn random_grads(ps: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Grads<f64> {
        let mut g = Grads::zeros_like(ps);
        for (k, id) in ps.ids().enumerate() {
            if ps.specs()[k].learnable {
                g.get_mut(id).iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
            }
        }
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut ps, g) = store();
        let before = ps.clone();
        let mut opt = AdaBound::new(AdaBoundConfig::default(), &ps).unwrap();
        opt.step(&mut ps, &g).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn unbounded_matches_adam() {
        let (mut ps, _) = store();
        let cfg = AdaBoundConfig {
            unbounded: true,
            ..AdaBoundConfig::default()
        };
        let mut opt = AdaBound::new(cfg, &ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reference: Vec<Vec<f64>> = ps.values().to_vec();
        let mut m: Vec<Vec<f64>> = reference.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut v = m.clone();
        for t in 1..=50 {
            let g = random_grads(&ps, &mut rng);
            opt.step(&mut ps, &g).unwrap();
            for (k, gv) in g.values().iter().enumerate() {
                for j in 0..gv.len() {
                    m[k][j] = 0.9 * m[k][j] + 0.1 * gv[j];
                    v[k][j] = 0.999 * v[k][j] + 0.001 * gv[j] * gv[j];
                    let mh = m[k][j] / (1.0 - 0.9f64.powi(t));
                    let vh = v[k][j] / (1.0 - 0.999f64.powi(t));
                    let eps_hat = 1e-8 / (1.0 - 0.999f64.powi(t)).sqrt();
                    reference[k][j] -= 1e-3 * mh / (vh.sqrt() + eps_hat);
                }
            }
            for (a, b) in ps.values().iter().flatten().zip(reference.iter().flatten()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "step {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn effective_rate_within_bounds() {
        let cfg = AdaBoundConfig::default();
        for t in [1u64, 2, 10, 100, 1_000, 100_000, 10_000_000] {
            let (lo, hi) = cfg.bounds(t);
            assert!((1e-4..=2e-2).contains(&lo) && (1e-4..=2e-2).contains(&hi) && lo <= hi, "{t}");
        }
        // one step from zero moments moves each element by rate * (1 - beta1) * g
        let (mut ps, _) = store();
        let before = ps.clone();
        let mut opt = AdaBound::new(cfg, &ps).unwrap();
        let g = random_grads(&ps, &mut ChaCha8Rng::seed_from_u64(1));
        opt.step(&mut ps, &g).unwrap();
        for ((a, b), gv) in ps.values().iter().flatten().zip(before.values().iter().flatten()).zip(g.values().iter().flatten()) {
            if *gv != 0.0 {
                let rate = (b - a) / (0.1 * gv);
                assert!((1e-4 * (1.0 - 1e-9)..=2e-2 * (1.0 + 1e-9)).contains(&rate), "{rate}");
            }
        }
        assert_eq!(ps.by_name("s"), before.by_name("s"));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut ps, mut g) = store();
        let id = ps.id("b").unwrap();
        g.get_mut(id)[2] = f64::NAN;
        let mut opt = AdaBound::new(AdaBoundConfig::default(), &ps).unwrap();
        assert!(matches!(opt.step(&mut ps, &g), Err(Error::NonFinite(_))));
    }
}
