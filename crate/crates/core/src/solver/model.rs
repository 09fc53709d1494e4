use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{max_abs_column_sum, norm, orthonormality_defect};

/// Tolerance of the score-matrix constraints `AᵀA = I` and `1ᵀA = 0`.
pub const CONSTRAINT_TOL: f64 = 1e-9;

/// Group norms at or below this value count as exactly zero.
pub const ACTIVE_TOL: f64 = 1e-12;

/// Fitted parameters `(μ_l, A, B_l)`. The natural parameters
/// `Θ_l = 1μ_lᵀ + A B_lᵀ` are always derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EscaModel {
    offsets: Vec<Array1<f64>>,
    scores: Array2<f64>,
    loadings: Vec<Array2<f64>>,
}

impl EscaModel {
    /// Validates shapes and the score constraints.
    pub fn new(offsets: Vec<Array1<f64>>, scores: Array2<f64>, loadings: Vec<Array2<f64>>) -> Result<Self> {
        let model = Self::new_unchecked(offsets, scores, loadings)?;
        let defect = orthonormality_defect(model.scores.view());
        let colsum = max_abs_column_sum(model.scores.view());
        if defect > CONSTRAINT_TOL || colsum > CONSTRAINT_TOL {
            return Err(Error::contract(format!(
                "scores violate AᵀA = I / 1ᵀA = 0 (defect {defect:.3e}, column sum {colsum:.3e})"
            )));
        }
        Ok(model)
    }

    /// Shape checks only. Used by the solver, which maintains the
    /// constraints itself.
    pub(crate) fn new_unchecked(
        offsets: Vec<Array1<f64>>,
        scores: Array2<f64>,
        loadings: Vec<Array2<f64>>,
    ) -> Result<Self> {
        if offsets.len() != loadings.len() {
            return Err(Error::contract(format!(
                "{} offset vectors but {} loading matrices",
                offsets.len(),
                loadings.len()
            )));
        }
        let r = scores.ncols();
        for (l, (mu, b)) in offsets.iter().zip(&loadings).enumerate() {
            if b.ncols() != r {
                return Err(Error::contract(format!("block {l}: loadings have {} columns, scores {r}", b.ncols())));
            }
            if mu.len() != b.nrows() {
                return Err(Error::contract(format!(
                    "block {l}: offset length {} but {} loading rows",
                    mu.len(),
                    b.nrows()
                )));
            }
        }
        let all_finite = scores.iter().all(|v| v.is_finite())
            && offsets.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && loadings.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::InvalidState("model contains non-finite parameters".into()));
        }
        Ok(EscaModel { offsets, scores, loadings })
    }

    pub fn n_blocks(&self) -> usize {
        self.loadings.len()
    }

    pub fn n_rows(&self) -> usize {
        self.scores.nrows()
    }

    /// `R`, the number of columns of `A`, including inactive ones.
    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    pub fn block_widths(&self) -> Vec<usize> {
        self.loadings.iter().map(|b| b.nrows()).collect()
    }

    pub fn offsets(&self) -> &[Array1<f64>] {
        &self.offsets
    }

    pub fn offset(&self, l: usize) -> ArrayView1<'_, f64> {
        self.offsets[l].view()
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn loadings(&self) -> &[Array2<f64>] {
        &self.loadings
    }

    pub fn loading(&self, l: usize) -> ArrayView2<'_, f64> {
        self.loadings[l].view()
    }

    /// `Θ_l = 1μ_lᵀ + A B_lᵀ`.
    pub fn theta(&self, l: usize) -> Array2<f64> {
        let mut t = self.scores.dot(&self.loadings[l].t());
        t += &self.offsets[l].view().insert_axis(Axis(0));
        t
    }

    pub fn thetas(&self) -> Vec<Array2<f64>> {
        (0..self.n_blocks()).map(|l| self.theta(l)).collect()
    }

    /// `L × R` table of group norms `σ_lr = ‖b_{l,r}‖₂`.
    pub fn sigma_table(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.n_blocks(), self.n_components()));
        for (l, b) in self.loadings.iter().enumerate() {
            for (r, col) in b.columns().into_iter().enumerate() {
                t[[l, r]] = norm(col);
            }
        }
        t
    }

    /// Indices `r` with `max_l σ_lr > 1e-12`.
    pub fn active_components(&self) -> Vec<usize> {
        let t = self.sigma_table();
        (0..self.n_components())
            .filter(|&r| t.column(r).iter().any(|&s| s > ACTIVE_TOL))
            .collect()
    }

    /// Blocks in which component `r` has a non-zero loading column.
    pub fn active_blocks(&self, r: usize) -> Vec<usize> {
        self.loadings
            .iter()
            .enumerate()
            .filter(|(_, b)| norm(b.column(r)) > ACTIVE_TOL)
            .map(|(l, _)| l)
            .collect()
    }

    /// `‖AᵀA − I‖_F` and `‖1ᵀA‖_∞`.
    pub fn constraint_defects(&self) -> (f64, f64) {
        (orthonormality_defect(self.scores.view()), max_abs_column_sum(self.scores.view()))
    }

    #[cfg(test)]
    pub(crate) fn into_parts(self) -> (Vec<Array1<f64>>, Array2<f64>, Vec<Array2<f64>>) {
        (self.offsets, self.scores, self.loadings)
    }
}
