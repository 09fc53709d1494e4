use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::model::EscaModel;
use super::updates::{procrustes, update_loadings, update_offsets};
use crate::error::{Error, Result};
use crate::expfam::{curvature_bound_masked, log_partition, mean_map, pseudo_data, DataBlock};
use crate::linalg::{centered_orthonormal_completion, masked_column_means, top_eigh};
use crate::penalty::PenaltySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Stop once the relative decrease of the objective drops below this.
    pub epsilon_f: f64,
    pub max_iter: usize,
    /// Number of components `R` used when initializing from SCA.
    pub n_components: usize,
    /// Recorded for reproducibility. The SCA initialization is
    /// deterministic, so the seed currently has no effect on a fit.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { epsilon_f: 1e-6, max_iter: 500, n_components: 50, seed: 0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_f > 0.0) {
            return Err(Error::contract(format!("epsilon_f must be positive, got {}", self.epsilon_f)));
        }
        if self.max_iter == 0 {
            return Err(Error::contract("max_iter must be at least 1"));
        }
        if self.n_components == 0 {
            return Err(Error::contract("n_components must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: EscaModel,
    /// Objective at the initial point followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `L × R` group norms of the final model.
    pub sigma_table: Array2<f64>,
    /// Iterations in which the Procrustes cross-product was rank deficient.
    pub rank_deficient_steps: usize,
}

impl FitResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace always holds the initial objective")
    }
}

pub(crate) fn check_blocks(blocks: &[DataBlock]) -> Result<usize> {
    let first = blocks.first().ok_or_else(|| Error::contract("at least one data block is required"))?;
    let rows = first.nrows();
    for (l, b) in blocks.iter().enumerate() {
        if b.nrows() != rows {
            return Err(Error::contract(format!("block {l} has {} rows, block 0 has {rows}", b.nrows())));
        }
        if b.observed_count() == 0 {
            return Err(Error::contract(format!("block {l} has no observed cells")));
        }
    }
    Ok(rows)
}

fn check_model(model: &EscaModel, blocks: &[DataBlock]) -> Result<()> {
    if model.n_blocks() != blocks.len() {
        return Err(Error::contract(format!("model has {} blocks, data {}", model.n_blocks(), blocks.len())));
    }
    if model.n_rows() != blocks[0].nrows() {
        return Err(Error::contract(format!("model has {} rows, data {}", model.n_rows(), blocks[0].nrows())));
    }
    for (l, (w, b)) in model.block_widths().iter().zip(blocks).enumerate() {
        if *w != b.ncols() {
            return Err(Error::contract(format!("block {l}: model width {w}, data width {}", b.ncols())));
        }
    }
    Ok(())
}

fn check_penalty(spec: &PenaltySpec, blocks: &[DataBlock]) -> Result<()> {
    spec.family.validate()?;
    if spec.lambdas.len() != blocks.len() {
        return Err(Error::contract(format!(
            "{} tuning parameters for {} blocks",
            spec.lambdas.len(),
            blocks.len()
        )));
    }
    Ok(())
}

/// Classical SCA start: the top-`r` left singular vectors of the centered,
/// `1/√α_l`-weighted, zero-imputed concatenation. Non-Gaussian blocks enter
/// through their pseudo-data at `Θ = 0`.
pub fn initialize(blocks: &[DataBlock], r: usize) -> Result<EscaModel> {
    let rows = check_blocks(blocks)?;
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    if r == 0 || r + 1 > rows || r > total {
        return Err(Error::contract(format!(
            "cannot initialize {r} components from {rows} rows and {total} columns"
        )));
    }
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut centered = Vec::with_capacity(blocks.len());
    let mut gram = Array2::<f64>::zeros((rows, rows));
    for b in blocks {
        let zero = Array2::zeros((rows, b.ncols()));
        let rho = curvature_bound_masked(b.dist(), zero.view(), b.mask())?;
        let h = pseudo_data(b, zero.view(), rho)?;
        let (mu, _) = masked_column_means(h.view(), b.mask());
        let mut z = h - &mu.view().insert_axis(Axis(0));
        z *= &b.mask();
        gram.scaled_add(1.0 / b.dispersion(), &z.dot(&z.t()));
        offsets.push(mu);
        centered.push(z);
    }
    let (_, u) = top_eigh(gram.view(), r)?;
    let a = centered_orthonormal_completion(u.view(), None, r)?;
    let loadings = centered.iter().map(|z| z.t().dot(&a)).collect();
    EscaModel::new_unchecked(offsets, a, loadings)
}

/// Penalized negative log-likelihood
/// `Σ_l f_l(Θ_l) + λ_l √J_l Σ_r g(σ_lr)`, Θ-free constants dropped.
pub fn objective(model: &EscaModel, blocks: &[DataBlock], spec: &PenaltySpec) -> Result<f64> {
    check_model(model, blocks)?;
    check_penalty(spec, blocks)?;
    let thetas = model.thetas();
    objective_with_thetas(model, &thetas, blocks, spec)
}

fn objective_with_thetas(
    model: &EscaModel,
    thetas: &[Array2<f64>],
    blocks: &[DataBlock],
    spec: &PenaltySpec,
) -> Result<f64> {
    let sigma = model.sigma_table();
    let mut f = 0.0;
    for (l, (b, t)) in blocks.iter().zip(thetas).enumerate() {
        f += crate::expfam::block_neg_loglik(b, t.view())?;
        f += spec.block_penalty(l, b.ncols(), sigma.row(l))?;
    }
    Ok(f)
}

/// The majorizing surrogate anchored at `anchor`, evaluated at `model`,
/// with all constants kept so that `surrogate(m, m) == objective(m)`.
pub fn surrogate(model: &EscaModel, anchor: &EscaModel, blocks: &[DataBlock], spec: &PenaltySpec) -> Result<f64> {
    check_model(model, blocks)?;
    check_model(anchor, blocks)?;
    check_penalty(spec, blocks)?;
    let sigma = model.sigma_table();
    let sigma_k = anchor.sigma_table();
    let mut total = 0.0;
    for (l, b) in blocks.iter().enumerate() {
        let dist = b.dist();
        let alpha = b.dispersion();
        let theta = model.theta(l);
        let theta_k = anchor.theta(l);
        let rho = curvature_bound_masked(dist, theta_k.view(), b.mask())?;
        let h = pseudo_data(b, theta_k.view(), rho)?;
        let mut constant = 0.0;
        Zip::from(&theta_k).and(b.values()).and(b.mask()).for_each(|&t, &x, &w| {
            if w != 0.0 {
                let grad = mean_map(dist, t) - x;
                constant += log_partition(dist, t) - x * t - grad * grad / (2.0 * rho);
            }
        });
        let quad: f64 = Zip::from(&theta).and(&h).fold(0.0, |acc, &t, &h| acc + (t - h) * (t - h));
        total += constant / alpha + rho / (2.0 * alpha) * quad;

        let lambda = spec.lambdas[l];
        if lambda == 0.0 {
            continue;
        }
        let weight = lambda * (b.ncols() as f64).sqrt();
        for (s, sk) in sigma.row(l).iter().zip(sigma_k.row(l)) {
            let g_k = spec.value(*sk)?;
            let omega = spec.supergradient(*sk);
            let term = if omega.is_infinite() {
                if *s == *sk {
                    g_k
                } else {
                    f64::INFINITY
                }
            } else {
                g_k + omega * (s - sk)
            };
            total += weight * term;
        }
    }
    Ok(total)
}

/// Runs the MM iteration from the SCA start, or from `init` when given.
pub fn fit(
    blocks: &[DataBlock],
    spec: &PenaltySpec,
    config: &FitConfig,
    init: Option<&EscaModel>,
) -> Result<FitResult> {
    config.validate()?;
    check_blocks(blocks)?;
    check_penalty(spec, blocks)?;
    let mut model = match init {
        Some(m) => {
            check_model(m, blocks)?;
            m.clone()
        }
        None => initialize(blocks, config.n_components)?,
    };

    let mut thetas = model.thetas();
    let f0 = objective_with_thetas(&model, &thetas, blocks, spec)?;
    if !f0.is_finite() {
        return Err(Error::Diverged { iteration: 0, value: f0, trace: Vec::new() });
    }
    let mut trace = vec![f0];
    let mut converged = false;
    let mut iterations = 0;
    let mut deficient = 0;

    while iterations < config.max_iter {
        let f_prev = *trace.last().unwrap();
        if f_prev == 0.0 {
            converged = true;
            break;
        }
        let step = mm_step(&model, &thetas, blocks, spec)?;
        iterations += 1;
        if step.rank_deficient {
            deficient += 1;
        }
        model = step.model;
        thetas = model.thetas();
        let f = objective_with_thetas(&model, &thetas, blocks, spec)?;
        if !f.is_finite() {
            return Err(Error::Diverged { iteration: iterations, value: f, trace });
        }
        trace.push(f);
        if (f_prev - f) / f_prev.abs() < config.epsilon_f {
            converged = true;
            break;
        }
    }
    log::debug!(
        "fit finished after {iterations} iterations (converged: {converged}), objective {}",
        trace.last().unwrap()
    );
    Ok(FitResult {
        sigma_table: model.sigma_table(),
        model,
        objective_trace: trace,
        iterations,
        converged,
        rank_deficient_steps: deficient,
    })
}

struct Step {
    model: EscaModel,
    rank_deficient: bool,
}

/// One pass of pseudo-data, offsets, scores, loadings. `H` is built once and
/// consumed by both the score and the loading update.
fn mm_step(model: &EscaModel, thetas: &[Array2<f64>], blocks: &[DataBlock], spec: &PenaltySpec) -> Result<Step> {
    let mut rhos = Vec::with_capacity(blocks.len());
    let mut hs = Vec::with_capacity(blocks.len());
    for (b, t) in blocks.iter().zip(thetas) {
        let rho = curvature_bound_masked(b.dist(), t.view(), b.mask())?;
        hs.push(pseudo_data(b, t.view(), rho)?);
        rhos.push(rho);
    }
    let offsets: Vec<Array1<f64>> = update_offsets(&hs);
    let jhs: Vec<Array2<f64>> = hs
        .into_iter()
        .zip(&offsets)
        .map(|(h, mu)| h - &mu.view().insert_axis(Axis(0)))
        .collect();

    let r = model.n_components();
    let mut cross = Array2::<f64>::zeros((model.n_rows(), r));
    for (l, (jh, b)) in jhs.iter().zip(blocks).enumerate() {
        let d2 = rhos[l] / b.dispersion();
        cross.scaled_add(d2, &jh.dot(&model.loading(l)));
    }
    let scores = procrustes(cross, Some(model.scores()))?;

    let sigma_prev = model.sigma_table();
    let mut loadings = Vec::with_capacity(blocks.len());
    for (l, (jh, b)) in jhs.iter().zip(blocks).enumerate() {
        loadings.push(update_loadings(
            jh.view(),
            scores.scores.view(),
            spec,
            l,
            sigma_prev.row(l),
            rhos[l],
            b.dispersion(),
        )?);
    }
    Ok(Step {
        model: EscaModel::new_unchecked(offsets, scores.scores, loadings)?,
        rank_deficient: scores.rank_deficient,
    })
}
