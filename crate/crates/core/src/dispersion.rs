//! Noise-variance estimation for quantitative blocks.
//!
//! A PCA model is fitted with EM imputation of missing cells, its rank picked
//! by hold-out cross-validation, and the residual sum of squares divided by
//! the residual degrees of freedom `‖W‖₀ − (I+J)R`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_sq_masked, masked_column_means, truncated_factors};
use crate::selection::draw_test_cells;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmPcaConfig {
    /// EM stops once the relative decrease of the observed-cell squared
    /// error falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmPcaConfig {
    fn default() -> Self {
        EmPcaConfig { tol: 1e-6, max_iter: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub scores: Array2<f64>,
    pub loadings: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PcaFit {
    pub fn reconstruction(&self) -> Array2<f64> {
        self.scores.dot(&self.loadings.t())
    }
}

/// Rank-`r` PCA of `x` with missing cells (`w = 0`) imputed by the current
/// reconstruction. `x` should already be column-centered over observed cells.
pub fn weighted_pca(x: ArrayView2<f64>, w: ArrayView2<f64>, r: usize, cfg: &EmPcaConfig) -> Result<PcaFit> {
    weighted_pca_from(x, w, r, cfg, None)
}

fn weighted_pca_from(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    r: usize,
    cfg: &EmPcaConfig,
    start: Option<ArrayView2<f64>>,
) -> Result<PcaFit> {
    if x.dim() != w.dim() {
        return Err(Error::contract("data and mask shapes differ"));
    }
    let (rows, cols) = x.dim();
    if r > rows.min(cols) {
        return Err(Error::contract(format!("rank {r} exceeds min dimension of {rows}x{cols}")));
    }
    let complete = w.iter().all(|&v| v != 0.0);
    let mut filled = Array2::zeros((rows, cols));
    Zip::from(&mut filled).and(&x).and(&w).for_each(|f, &x, &w| *f = w * x);
    if r == 0 {
        return Ok(PcaFit {
            scores: Array2::zeros((rows, 0)),
            loadings: Array2::zeros((cols, 0)),
            iterations: 0,
            converged: true,
        });
    }
    if let Some(s) = start {
        Zip::from(&mut filled).and(&s).and(&w).for_each(|f, &s, &w| {
            if w == 0.0 {
                *f = s
            }
        });
    }
    let mut prev_loss: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let (scores, loadings) = truncated_factors(filled.view(), r)?;
        iterations += 1;
        if complete {
            return Ok(PcaFit { scores, loadings, iterations, converged: true });
        }
        let rec = scores.dot(&loadings.t());
        let loss = Zip::from(&x).and(&rec).and(&w).fold(0.0, |acc, &x, &r, &w| acc + w * (x - r) * (x - r));
        let done = match prev_loss {
            Some(p) => p <= 0.0 || (p - loss) <= cfg.tol * p,
            None => false,
        };
        if done || iterations >= cfg.max_iter {
            return Ok(PcaFit { scores, loadings, iterations, converged: done });
        }
        Zip::from(&mut filled).and(&rec).and(&w).for_each(|f, &r, &w| {
            if w == 0.0 {
                *f = r
            }
        });
        prev_loss = Some(loss);
    }
}

/// CV errors closer than this fraction of the rank-0 error count as equal.
pub const RANK_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCvReport {
    pub candidate_ranks: Vec<usize>,
    pub cv_errors: Vec<f64>,
    pub chosen_rank: usize,
}

/// Default largest candidate rank: `min(I, J)/2`, capped at 30.
pub fn default_max_rank(rows: usize, cols: usize) -> usize {
    (rows.min(cols) / 2).min(30)
}

/// Column-centers `x` over the cells with `w = 1`. Columns without such cells
/// are left at zero.
fn center_observed(x: ArrayView2<f64>, w: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (means, _) = masked_column_means(x, w);
    let mut c = &x - &means.view().insert_axis(Axis(0));
    c *= &w;
    (c, means)
}

/// Candidate ranks and stopping rule of the rank scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankCvConfig {
    /// Largest candidate rank; `None` uses [`default_max_rank`].
    pub max_rank: Option<usize>,
    /// Stop the ascending scan after this many consecutive ranks without a
    /// new minimum. `None` scans every rank up to `max_rank`.
    pub patience: Option<usize>,
    pub em: EmPcaConfig,
}

impl Default for RankCvConfig {
    fn default() -> Self {
        RankCvConfig { max_rank: None, patience: Some(5), em: EmPcaConfig::default() }
    }
}

/// Hold-out cross-validation of the PCA rank over `0..=max_rank`. The data
/// are column-centered over all observed cells before the split.
pub fn select_rank(x: ArrayView2<f64>, w: ArrayView2<f64>, cfg: &RankCvConfig, seed: u64) -> Result<RankCvReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_rank_with(x, w, cfg, &mut rng)
}

fn select_rank_with(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    cfg: &RankCvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RankCvReport> {
    let (rows, cols) = x.dim();
    if x.dim() != w.dim() {
        return Err(Error::contract("data and mask shapes differ"));
    }
    let r_max = cfg.max_rank.unwrap_or_else(|| default_max_rank(rows, cols));
    if r_max >= rows.min(cols) {
        return Err(Error::contract(format!("largest candidate rank {r_max} must be below min({rows}, {cols})")));
    }
    let observed: Vec<(usize, usize)> =
        w.indexed_iter().filter(|(_, v)| **v != 0.0).map(|(ix, _)| ix).collect();
    let (xc, _) = center_observed(x, w);
    let test = draw_test_cells(&observed, 0.1, rng);
    let mut train_mask = w.to_owned();
    for &(i, j) in &test {
        train_mask[[i, j]] = 0.0;
    }

    let mut cv_errors: Vec<f64> = Vec::with_capacity(r_max + 1);
    let mut warm: Option<Array2<f64>> = None;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for r in 0..=r_max {
        let fit = weighted_pca_from(xc.view(), train_mask.view(), r, &cfg.em, warm.as_ref().map(|a| a.view()))?;
        let rec = fit.reconstruction();
        let err: f64 = test
            .iter()
            .map(|&(i, j)| {
                let d = xc[[i, j]] - rec[[i, j]];
                d * d
            })
            .sum();
        cv_errors.push(err);
        warm = Some(rec);
        if err < best {
            best = err;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience.map_or(false, |p| since_best >= p) {
            break;
        }
    }
    // Errors within a hair of the minimum (relative to the rank-0 error) are
    // numerical ties and go to the smallest rank.
    let min = cv_errors.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = RANK_TIE_TOL * cv_errors[0];
    let chosen = cv_errors.iter().position(|e| *e <= min + slack).unwrap_or(0);
    Ok(RankCvReport { candidate_ranks: (0..cv_errors.len()).collect(), cv_errors, chosen_rank: chosen })
}

/// `‖W⊙(X − ABᵀ)‖² / (‖W‖₀ − (I+J)R)` for a rank-`r` PCA fitted on all
/// observed cells.
pub fn dispersion_at_rank(x: ArrayView2<f64>, w: ArrayView2<f64>, r: usize, cfg: &EmPcaConfig) -> Result<f64> {
    let (rows, cols) = x.dim();
    let observed = w.iter().filter(|v| **v != 0.0).count() as f64;
    let dof = observed - ((rows + cols) * r) as f64;
    if dof <= 0.0 {
        return Err(Error::Estimation(format!(
            "rank {r} leaves no residual degrees of freedom ({observed} observed cells)"
        )));
    }
    let (xc, _) = center_observed(x, w);
    let fit = weighted_pca(xc.view(), w, r, cfg)?;
    let resid = frob_sq_masked((&xc - &fit.reconstruction()).view(), w);
    Ok(resid / dof)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispersionConfig {
    pub repeats: usize,
    pub rank_cv: RankCvConfig,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        DispersionConfig { repeats: 3, rank_cv: RankCvConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    /// Mean over repeats.
    pub alpha: f64,
    pub per_repeat: Vec<f64>,
    pub std: f64,
    pub reports: Vec<RankCvReport>,
}

/// Mean of `repeats` independent estimates, each with its own hold-out split.
pub fn estimate_dispersion(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    cfg: &DispersionConfig,
    seed: u64,
) -> Result<DispersionEstimate> {
    if cfg.repeats == 0 {
        return Err(Error::contract("at least one repeat is required"));
    }
    if x.iter().zip(w.iter()).any(|(v, w)| *w != 0.0 && !v.is_finite()) {
        return Err(Error::contract("observed cells must be finite"));
    }
    let runs: Vec<Result<(f64, RankCvReport)>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let report = select_rank_with(x, w, &cfg.rank_cv, &mut rng)?;
            let alpha = dispersion_at_rank(x, w, report.chosen_rank, &cfg.rank_cv.em)?;
            Ok((alpha, report))
        })
        .collect();
    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    let mut reports = Vec::with_capacity(cfg.repeats);
    for run in runs {
        let (a, r) = run?;
        per_repeat.push(a);
        reports.push(r);
    }
    let n = per_repeat.len() as f64;
    let alpha = per_repeat.iter().sum::<f64>() / n;
    let var = per_repeat.iter().map(|a| (a - alpha).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(DispersionEstimate { alpha, per_repeat, std: var.sqrt(), reports })
}
