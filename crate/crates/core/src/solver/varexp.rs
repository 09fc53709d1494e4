use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::model::EscaModel;
use crate::error::{Error, Result};
use crate::expfam::{curvature_bound_masked, pseudo_data, DataBlock};
use crate::linalg::frob_sq_masked;

/// Variation explained ratios. `NaN` marks a ratio whose denominator is zero
/// (a block that is constant after offset removal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationExplained {
    /// `L × R`, single-component ratios `varExp_lr`.
    pub per_component: Array2<f64>,
    /// `varExp_l` of the full model on each block.
    pub per_block: Array1<f64>,
    /// Per-component ratios on the `1/√α_l`-weighted concatenation.
    pub combined_per_component: Array1<f64>,
    pub combined: f64,
}

fn ratio(resid: f64, total: f64) -> f64 {
    if total > 0.0 {
        1.0 - resid / total
    } else {
        f64::NAN
    }
}

/// Ratios of explained to offset-removed variation, with non-Gaussian
/// blocks replaced by their pseudo-data at the fitted model.
pub fn variation_explained(model: &EscaModel, blocks: &[DataBlock]) -> Result<VariationExplained> {
    if model.n_blocks() != blocks.len() {
        return Err(Error::contract(format!("model has {} blocks, data {}", model.n_blocks(), blocks.len())));
    }
    let (l_count, r_count) = (blocks.len(), model.n_components());
    let mut per_component = Array2::zeros((l_count, r_count));
    let mut per_block = Array1::zeros(l_count);
    let mut comb_total = 0.0;
    let mut comb_resid = 0.0;
    let mut comb_comp_resid = Array1::<f64>::zeros(r_count);
    let a = model.scores();

    for (l, b) in blocks.iter().enumerate() {
        if b.nrows() != model.n_rows() || b.ncols() != model.loading(l).nrows() {
            return Err(Error::contract(format!("block {l} does not match the model shape")));
        }
        let target = if b.dist().is_gaussian() {
            b.values().to_owned()
        } else {
            let theta = model.theta(l);
            let rho = curvature_bound_masked(b.dist(), theta.view(), b.mask())?;
            pseudo_data(b, theta.view(), rho)?
        };
        let centered = target - &model.offset(l).insert_axis(Axis(0));
        let w = b.mask();
        let weight = 1.0 / b.dispersion();
        let total = frob_sq_masked(centered.view(), w);
        let bl = model.loading(l);
        let resid = frob_sq_masked((&centered - &a.dot(&bl.t())).view(), w);
        per_block[l] = ratio(resid, total);
        comb_total += weight * total;
        comb_resid += weight * resid;
        for r in 0..r_count {
            let part = a.column(r).insert_axis(Axis(1)).dot(&bl.column(r).insert_axis(Axis(0)));
            let rr = frob_sq_masked((&centered - &part).view(), w);
            per_component[[l, r]] = ratio(rr, total);
            comb_comp_resid[r] += weight * rr;
        }
    }
    Ok(VariationExplained {
        per_component,
        per_block,
        combined_per_component: comb_comp_resid.mapv(|rr| ratio(rr, comb_total)),
        combined: ratio(comb_resid, comb_total),
    })
}
