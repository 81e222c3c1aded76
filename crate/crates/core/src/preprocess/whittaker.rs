//! Whittaker smoother: `argmin_z |z - y|^2 + lambda |D2 z|^2`.
//!
//! The normal equations `(I + lambda D2'D2) z = y` form a symmetric positive
//! definite pentadiagonal system, solved with a band Cholesky factorization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhittakerConfig {
    pub lambda: f64,
    /// Difference order; only 2 is supported.
    pub order: usize,
}

impl Default for WhittakerConfig {
    fn default() -> Self {
        Self {
            lambda: 800.0,
            order: 2,
        }
    }
}

impl WhittakerConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda", format!("must be positive and finite, got {}", self.lambda)));
        }
        if self.order != 2 {
            return Err(Error::invalid("order", format!("only second differences are supported, got {}", self.order)));
        }
        Ok(())
    }
}

/// Band Cholesky factor of `I + lambda D2'D2` for a fixed length; reusable
/// across every pixel series of that length.
#[derive(Debug, Clone)]
pub struct WhittakerSolver<S> {
    diag: Vec<S>,
    sub1: Vec<S>,
    sub2: Vec<S>,
}

impl<S: Scalar> WhittakerSolver<S> {
    pub fn new(n: usize, cfg: &WhittakerConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = S::c(cfg.lambda);
        // Bands of A = I + lambda D'D: a0[j] = A[j][j], a1[j] = A[j+1][j], a2[j] = A[j+2][j].
        let mut a0 = vec![S::one(); n];
        let mut a1 = vec![S::zero(); n];
        let mut a2 = vec![S::zero(); n];
        let stencil = [S::one(), S::c(-2.0), S::one()];
        for row in 0..n.saturating_sub(2) {
            for (p, &sp) in stencil.iter().enumerate() {
                for (q, &sq) in stencil.iter().enumerate().skip(p) {
                    let v = lambda * sp * sq;
                    match q - p {
                        0 => a0[row + p] += v,
                        1 => a1[row + p] += v,
                        _ => a2[row + p] += v,
                    }
                }
            }
        }

        let mut diag = vec![S::zero(); n];
        let mut sub1 = vec![S::zero(); n];
        let mut sub2 = vec![S::zero(); n];
        for j in 0..n {
            if j >= 2 {
                sub2[j] = a2[j - 2] / diag[j - 2];
            }
            if j >= 1 {
                let coupling = if j >= 2 { sub2[j] * sub1[j - 1] } else { S::zero() };
                sub1[j] = (a1[j - 1] - coupling) / diag[j - 1];
            }
            let pivot = a0[j] - sub1[j] * sub1[j] - sub2[j] * sub2[j];
            if !(pivot > S::zero()) {
                return Err(Error::invalid("whittaker system", "matrix is not positive definite"));
            }
            diag[j] = pivot.sqrt();
        }
        Ok(Self { diag, sub1, sub2 })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Solves in place; `series.len()` must equal the factored length.
    pub fn solve_in_place(&self, series: &mut [S]) -> Result<()> {
        let n = self.diag.len();
        if series.len() != n {
            return Err(Error::shape("series", n, series.len()));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("whittaker input".into()));
        }
        for j in 0..n {
            let mut acc = series[j];
            if j >= 1 {
                acc -= self.sub1[j] * series[j - 1];
            }
            if j >= 2 {
                acc -= self.sub2[j] * series[j - 2];
            }
            series[j] = acc / self.diag[j];
        }
        for j in (0..n).rev() {
            let mut acc = series[j];
            if j + 1 < n {
                acc -= self.sub1[j + 1] * series[j + 1];
            }
            if j + 2 < n {
                acc -= self.sub2[j + 2] * series[j + 2];
            }
            series[j] = acc / self.diag[j];
        }
        Ok(())
    }
}

/// Smooths one series with a freshly factored system.
pub fn whittaker_smooth<S: Scalar>(series: &[S], cfg: &WhittakerConfig) -> Result<Vec<S>> {
    let solver = WhittakerSolver::new(series.len(), cfg)?;
    let mut out = series.to_vec();
    solver.solve_in_place(&mut out)?;
    Ok(out)
}

/// `|D2 z|^2`.
pub fn roughness<S: Scalar>(z: &[S]) -> S {
    z.windows(3)
        .map(|w| {
            let d = w[0] - S::c(2.0) * w[1] + w[2];
            d * d
        })
        .sum()
}
