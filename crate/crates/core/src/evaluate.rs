//! Scoring a fitted model against simulation truth.

use ndarray::{Array1, Array2, ArrayView, ArrayView2, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::frob_sq;
use crate::simulate::{SimulationTruth, STRUCTURE_NAMES, STRUCTURE_SUPPORTS};
use crate::solver::{EscaModel, ACTIVE_TOL};

/// Relative squared error `‖t − e‖² / ‖t‖²`. NaN when `t` is zero.
pub fn rmse<D: Dimension>(truth: ArrayView<f64, D>, estimate: ArrayView<f64, D>) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::contract(format!("shape mismatch: {:?} vs {:?}", truth.shape(), estimate.shape())));
    }
    let denom: f64 = truth.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Ok(f64::NAN);
    }
    let num: f64 = truth.iter().zip(estimate.iter()).map(|(t, e)| (t - e) * (t - e)).sum();
    Ok(num / denom)
}

fn offdiag_cross_product(x: ArrayView2<f64>) -> Array2<f64> {
    let mut g = x.dot(&x.t());
    g.diag_mut().fill(0.0);
    g
}

/// RV coefficient of the row configurations of `x` and `y` with the
/// diagonals of both cross-product matrices removed. Returns 0 when either
/// cross-product vanishes.
pub fn modified_rv(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::contract(format!("row counts differ: {} vs {}", x.nrows(), y.nrows())));
    }
    let gx = offdiag_cross_product(x);
    let gy = offdiag_cross_product(y);
    let nx = frob_sq(gx.view()).sqrt();
    let ny = frob_sq(gy.view()).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((&gx * &gy).sum() / (nx * ny))
}

/// Structure label of every component plus per-structure counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAssignment {
    /// Index into [`STRUCTURE_NAMES`], `None` for dead components.
    pub labels: Vec<Option<usize>>,
    pub ranks: Vec<usize>,
}

impl StructureAssignment {
    pub fn components_of(&self, structure: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&r| self.labels[r] == Some(structure)).collect()
    }
}

/// Labels each component by the set of blocks where its loading column has
/// norm above `zero_tol`.
pub fn assign_structures(model: &EscaModel, zero_tol: f64) -> Result<StructureAssignment> {
    if model.n_blocks() != 3 {
        return Err(Error::contract(format!("structure labels need three blocks, model has {}", model.n_blocks())));
    }
    let sigma = model.sigma_table();
    let mut labels = Vec::with_capacity(model.n_components());
    let mut ranks = vec![0; STRUCTURE_NAMES.len()];
    for r in 0..model.n_components() {
        let active: Vec<usize> = (0..3).filter(|&l| sigma[[l, r]] > zero_tol).collect();
        let label = STRUCTURE_SUPPORTS.iter().position(|s| *s == active.as_slice());
        if let Some(s) = label {
            ranks[s] += 1;
        }
        labels.push(label);
    }
    Ok(StructureAssignment { labels, ranks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRecovery {
    pub name: String,
    pub rv: f64,
    pub rank: usize,
    pub true_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub structures: Vec<StructureRecovery>,
    pub rmse_theta: f64,
    pub rmse_theta_blocks: Vec<f64>,
    pub rmse_mu: f64,
    pub assignment: StructureAssignment,
}

impl RecoveryReport {
    pub fn structure(&self, name: &str) -> Option<&StructureRecovery> {
        self.structures.iter().find(|s| s.name == name)
    }

    pub fn csv_header() -> Vec<String> {
        let mut h = Vec::new();
        for name in STRUCTURE_NAMES {
            h.push(format!("rv_{name}"));
            h.push(format!("rank_{name}"));
        }
        h.push("rmse_theta".into());
        for l in 1..=3 {
            h.push(format!("rmse_theta{l}"));
        }
        h.push("rmse_mu".into());
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut row = Vec::new();
        for s in &self.structures {
            row.push(s.rv.to_string());
            row.push(s.rank.to_string());
        }
        row.push(self.rmse_theta.to_string());
        row.extend(self.rmse_theta_blocks.iter().map(|v| v.to_string()));
        row.push(self.rmse_mu.to_string());
        row
    }
}

/// Every component labelled with a structure contributes `â_r b̂_rᵀ` to the
/// estimate of that structure, which is compared with the simulated one by
/// [`modified_rv`]. Absent structures have an all-zero truth and score 0.
pub fn recovery_report(model: &EscaModel, truth: &SimulationTruth, zero_tol: f64) -> Result<RecoveryReport> {
    let est_thetas = model.thetas();
    if est_thetas.len() != truth.thetas.len()
        || est_thetas.iter().zip(&truth.thetas).any(|(e, t)| e.dim() != t.dim())
    {
        return Err(Error::contract("model and truth have different block shapes"));
    }
    let assignment = assign_structures(model, zero_tol)?;
    let b_all = ndarray::concatenate(
        Axis(0),
        &model.loadings().iter().map(|b| b.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::contract(e.to_string()))?;
    let n = model.n_rows();
    let p = b_all.nrows();

    let mut structures = Vec::with_capacity(STRUCTURE_NAMES.len());
    for (s, name) in STRUCTURE_NAMES.iter().enumerate() {
        let comps = assignment.components_of(s);
        let mut est = Array2::zeros((n, p));
        for &r in &comps {
            let a = model.scores().column(r).insert_axis(Axis(1)).to_owned();
            let b = b_all.column(r).insert_axis(Axis(0)).to_owned();
            est += &a.dot(&b);
        }
        let (true_mat, true_rank) = match truth.structure(name) {
            Some(st) => (truth.structure_matrix(st), st.components.len()),
            None => (Array2::zeros((n, p)), 0),
        };
        structures.push(StructureRecovery {
            name: name.to_string(),
            rv: modified_rv(true_mat.view(), est.view())?,
            rank: comps.len(),
            true_rank,
        });
    }

    let rmse_theta_blocks = est_thetas
        .iter()
        .zip(&truth.thetas)
        .map(|(e, t)| rmse(t.view(), e.view()))
        .collect::<Result<Vec<_>>>()?;
    let est_views: Vec<ArrayView2<f64>> = est_thetas.iter().map(|t| t.view()).collect();
    let est_concat = crate::linalg::hstack(&est_views);
    let rmse_theta = rmse(truth.theta_concat().view(), est_concat.view())?;
    let mu_hat = Array1::from_iter(model.offsets().iter().flat_map(|m| m.iter().copied()));
    let rmse_mu = rmse(truth.offsets_concat().view(), mu_hat.view())?;

    Ok(RecoveryReport { structures, rmse_theta, rmse_theta_blocks, rmse_mu, assignment })
}

/// Recovery of one structure averaged over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub name: String,
    pub mean_rv: f64,
    pub mean_rank: f64,
    pub ranks: Vec<usize>,
}

impl StructureSummary {
    /// Cell text in the `mean RV(mean rank)` layout, e.g. `0.998(3)`.
    pub fn cell(&self) -> String {
        if self.mean_rv == 0.0 && self.mean_rank == 0.0 {
            return "0(0)".into();
        }
        let rank = if self.mean_rank.fract() == 0.0 { format!("{}", self.mean_rank) } else { format!("{:.1}", self.mean_rank) };
        format!("{:.3}({rank})", self.mean_rv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub repetitions: usize,
    pub structures: Vec<StructureSummary>,
    pub mean_rmse_theta: f64,
    pub mean_rmse_theta_blocks: Vec<f64>,
    pub mean_rmse_mu: f64,
}

impl RecoverySummary {
    pub fn structure(&self, name: &str) -> Option<&StructureSummary> {
        self.structures.iter().find(|s| s.name == name)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn summarize(reports: &[RecoveryReport]) -> RecoverySummary {
    let structures = STRUCTURE_NAMES
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let ranks: Vec<usize> = reports.iter().map(|r| r.structures[s].rank).collect();
            StructureSummary {
                name: name.to_string(),
                mean_rv: mean(reports.iter().map(|r| r.structures[s].rv)),
                mean_rank: mean(ranks.iter().map(|&k| k as f64)),
                ranks,
            }
        })
        .collect();
    let n_blocks = reports.first().map_or(0, |r| r.rmse_theta_blocks.len());
    RecoverySummary {
        repetitions: reports.len(),
        structures,
        mean_rmse_theta: mean(reports.iter().map(|r| r.rmse_theta)),
        mean_rmse_theta_blocks: (0..n_blocks).map(|l| mean(reports.iter().map(|r| r.rmse_theta_blocks[l]))).collect(),
        mean_rmse_mu: mean(reports.iter().map(|r| r.rmse_mu)),
    }
}

/// Default group-activity threshold for structure labels.
pub const DEFAULT_ZERO_TOL: f64 = ACTIVE_TOL;
