//! Group penalties on loading columns and the group soft-thresholding
//! operator used in the loading update.
//!
//! Each penalty is a concave, non-decreasing function `g(σ)` of a column's
//! Euclidean norm `σ`. A block's penalty is `λ_l √J_l Σ_r g(σ_lr)`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PenaltyFamily {
    /// `g(σ) = σ`.
    Lasso,
    /// Bridge penalty `g(σ) = σ^q`, `0 < q ≤ 1`.
    Lq { q: f64 },
    /// Generalized double Pareto, `g(σ) = log(1 + σ/γ)`.
    Gdp { gamma: f64 },
}

impl Default for PenaltyFamily {
    fn default() -> Self {
        PenaltyFamily::Gdp { gamma: 1.0 }
    }
}

impl PenaltyFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltyFamily::Lasso => Ok(()),
            PenaltyFamily::Lq { q } if q > 0.0 && q <= 1.0 => Ok(()),
            PenaltyFamily::Lq { q } => Err(Error::contract(format!("Lq exponent must lie in (0, 1], got {q}"))),
            PenaltyFamily::Gdp { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            PenaltyFamily::Gdp { gamma } => Err(Error::contract(format!("GDP scale must be positive, got {gamma}"))),
        }
    }

    pub fn value(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0) {
            return Err(Error::contract(format!("group norm must be non-negative, got {sigma}")));
        }
        Ok(match *self {
            PenaltyFamily::Lasso => sigma,
            PenaltyFamily::Lq { q } => sigma.powf(q),
            PenaltyFamily::Gdp { gamma } => (sigma / gamma).ln_1p(),
        })
    }

    /// A supergradient at `sigma`. `f64::INFINITY` for the bridge penalty at
    /// zero (q < 1), where the function has a vertical tangent.
    pub fn supergradient(&self, sigma: f64) -> f64 {
        match *self {
            PenaltyFamily::Lasso => 1.0,
            PenaltyFamily::Lq { q } if q == 1.0 => 1.0,
            PenaltyFamily::Lq { q } => {
                if sigma <= 0.0 {
                    f64::INFINITY
                } else {
                    q * sigma.powf(q - 1.0)
                }
            }
            PenaltyFamily::Gdp { gamma } => 1.0 / (gamma + sigma.max(0.0)),
        }
    }
}

/// Penalty family together with the per-block tuning parameters `λ_l`.
/// The `√J_l` column-count weights are derived from the blocks at use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambdas: Vec<f64>,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambdas: Vec<f64>) -> Result<Self> {
        family.validate()?;
        if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::contract(format!("tuning parameters must be finite and >= 0, got {l}")));
        }
        Ok(PenaltySpec { family, lambdas })
    }

    /// Same λ for every block.
    pub fn uniform(family: PenaltyFamily, lambda: f64, n_blocks: usize) -> Result<Self> {
        Self::new(family, vec![lambda; n_blocks])
    }

    /// No penalty at all (classical ESCA).
    pub fn none(n_blocks: usize) -> Self {
        PenaltySpec { family: PenaltyFamily::default(), lambdas: vec![0.0; n_blocks] }
    }

    pub fn value(&self, sigma: f64) -> Result<f64> {
        self.family.value(sigma)
    }

    pub fn supergradient(&self, sigma: f64) -> f64 {
        self.family.supergradient(sigma)
    }

    /// `λ_l √J_l Σ_r g(σ_lr)` for one block.
    pub fn block_penalty(&self, block: usize, n_cols: usize, sigmas: ArrayView1<f64>) -> Result<f64> {
        let lambda = self.lambdas[block];
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for &s in sigmas {
            acc += self.family.value(s)?;
        }
        Ok(lambda * (n_cols as f64).sqrt() * acc)
    }
}

/// Proximal operator of `λ̃‖·‖₂`: `max(0, 1 − λ̃/‖v‖₂)·v`.
///
/// Returns the zero vector when `‖v‖₂ ≤ λ̃`, including `v = 0` and `λ̃ = ∞`.
pub fn group_prox(v: ArrayView1<f64>, lambda_tilde: f64) -> Array1<f64> {
    let nv = v.dot(&v).sqrt();
    if lambda_tilde <= 0.0 {
        return v.to_owned();
    }
    if nv <= lambda_tilde || nv == 0.0 {
        return Array1::zeros(v.len());
    }
    let shrink = 1.0 - lambda_tilde / nv;
    v.mapv(|x| shrink * x)
}
