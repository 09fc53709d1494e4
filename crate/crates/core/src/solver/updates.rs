//! Closed-form block-coordinate updates of the majorized problem.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{centered_orthonormal_completion, column_means, thin_svd};
use crate::penalty::{group_prox, PenaltySpec};

/// Result of the orthogonal Procrustes step.
#[derive(Debug, Clone)]
pub struct ScoresUpdate {
    pub scores: Array2<f64>,
    /// The cross-product had (numerically) zero singular values, so part of
    /// `A` was completed arbitrarily within the centered subspace.
    pub rank_deficient: bool,
}

/// `μ_l = (1/I) H_lᵀ 1`.
pub fn update_offsets(h: &[Array2<f64>]) -> Vec<Array1<f64>> {
    h.iter().map(|h| column_means(h.view())).collect()
}

/// `A = U Vᵀ` from the SVD of `JH̃ B̃`, the minimizer of `‖A B̃ᵀ − JH̃‖²_F`
/// over centered orthonormal `A`.
pub fn update_scores(jh_weighted: ArrayView2<f64>, b_weighted: ArrayView2<f64>) -> Result<ScoresUpdate> {
    if jh_weighted.ncols() != b_weighted.nrows() {
        return Err(Error::contract(format!(
            "JH has {} columns but B has {} rows",
            jh_weighted.ncols(),
            b_weighted.nrows()
        )));
    }
    let m = jh_weighted.dot(&b_weighted);
    procrustes(m, None)
}

/// Procrustes rotation from the cross-product `M = JH̃ B̃` directly.
///
/// `M` is re-centered exactly before the SVD. Left singular vectors of
/// negligible singular values are replaced by a centered orthonormal
/// completion, seeded with `previous` when available so that inactive
/// components stay put.
pub(crate) fn procrustes(mut m: Array2<f64>, previous: Option<ArrayView2<f64>>) -> Result<ScoresUpdate> {
    let (i, r) = m.dim();
    if r + 1 > i {
        return Err(Error::contract(format!("{r} components need at least {} rows, got {i}", r + 1)));
    }
    let means = column_means(m.view());
    for (mut col, mean) in m.columns_mut().into_iter().zip(means.iter()) {
        col -= *mean;
    }
    let (u, s, v) = thin_svd(m.view())?;
    let smax = s.iter().copied().fold(0.0_f64, f64::max);
    let keep = s.iter().take_while(|&&x| smax > 0.0 && x > smax * 1e-10).count();
    let u_full = centered_orthonormal_completion(u.slice(ndarray::s![.., ..keep]), previous, r)?;
    Ok(ScoresUpdate { scores: u_full.dot(&v.t()), rank_deficient: keep < r })
}

/// Per-column group-soft-thresholded projections `b_{l,r} = prox((JH_l)ᵀ a_r, λ̃_lr)`
/// with `λ̃_lr = λ_l √J_l ω_lr α_l / ρ_l` and `ω_lr` the supergradient at
/// the previous group norm.
pub fn update_loadings(
    jh: ArrayView2<f64>,
    scores: ArrayView2<f64>,
    spec: &PenaltySpec,
    block: usize,
    sigma_prev: ArrayView1<f64>,
    rho: f64,
    alpha: f64,
) -> Result<Array2<f64>> {
    let r = scores.ncols();
    if sigma_prev.len() != r {
        return Err(Error::contract(format!("{} previous group norms for {r} components", sigma_prev.len())));
    }
    let lambda = *spec
        .lambdas
        .get(block)
        .ok_or_else(|| Error::contract(format!("no tuning parameter for block {block}")))?;
    let mut proj = jh.t().dot(&scores);
    if lambda == 0.0 {
        return Ok(proj);
    }
    let scale = lambda * (jh.ncols() as f64).sqrt() * alpha / rho;
    for (k, mut col) in proj.columns_mut().into_iter().enumerate() {
        let lt = scale * spec.supergradient(sigma_prev[k]);
        let shrunk = group_prox(col.view(), lt);
        col.assign(&shrunk);
    }
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frob_sq, max_abs_column_sum, orthonormality_defect};
    use crate::penalty::PenaltyFamily;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    fn centered(mut x: Array2<f64>) -> Array2<f64> {
        crate::linalg::center_columns(&mut x);
        x
    }

    #[test]
    fn offsets_examples() {
        let h = vec![array![[1.0, 5.0], [3.0, 5.0]]];
        let mu = update_offsets(&h);
        assert_eq!(mu[0], array![2.0, 5.0]);
        let c = vec![array![[1.0], [-1.0]]];
        assert_eq!(update_offsets(&c)[0], array![0.0]);
    }

    #[test]
    fn scores_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = centered_orthonormal_completion(gaussian(12, 3, &mut rng).view(), None, 3).unwrap();
        let a = update_scores(q.view(), Array2::eye(3).view()).unwrap();
        assert!(!a.rank_deficient);
        for (x, y) in a.scores.iter().zip(q.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    /// Random centered orthonormal candidates never beat the Procrustes
    /// solution.
    #[test]
    fn scores_beat_random_orthonormal_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let jh = centered(gaussian(20, 12, &mut rng));
        let b = gaussian(12, 5, &mut rng);
        let a = update_scores(jh.view(), b.view()).unwrap().scores;
        assert!(orthonormality_defect(a.view()) < 1e-10);
        assert!(max_abs_column_sum(a.view()) < 1e-10);
        let loss = |a: &Array2<f64>| frob_sq((a.dot(&b.t()) - &jh).view());
        let best = loss(&a);
        for _ in 0..1000 {
            let cand = centered_orthonormal_completion(gaussian(20, 5, &mut rng).view(), None, 5).unwrap();
            assert!(best <= loss(&cand) + 1e-9);
        }
    }

    #[test]
    fn scores_rank_deficient_product_stays_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jh = centered(gaussian(15, 8, &mut rng));
        let mut b = gaussian(8, 4, &mut rng);
        b.column_mut(1).fill(0.0);
        b.column_mut(3).fill(0.0);
        let up = update_scores(jh.view(), b.view()).unwrap();
        assert!(up.rank_deficient);
        assert!(orthonormality_defect(up.scores.view()) < 1e-10);
        assert!(max_abs_column_sum(up.scores.view()) < 1e-10);
        let zero = update_scores(jh.view(), Array2::zeros((8, 4)).view()).unwrap();
        assert!(orthonormality_defect(zero.scores.view()) < 1e-10);
    }

    #[test]
    fn loadings_without_penalty_are_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let jh = centered(gaussian(10, 6, &mut rng));
        let a = centered_orthonormal_completion(gaussian(10, 2, &mut rng).view(), None, 2).unwrap();
        let spec = PenaltySpec::none(1);
        let b = update_loadings(jh.view(), a.view(), &spec, 0, array![0.0, 0.0].view(), 1.0, 1.0).unwrap();
        let expect = jh.t().dot(&a);
        assert_eq!(b, expect);
    }

    #[test]
    fn loadings_threshold_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jh = centered(gaussian(10, 4, &mut rng));
        let a = centered_orthonormal_completion(gaussian(10, 2, &mut rng).view(), None, 2).unwrap();
        let proj = jh.t().dot(&a);
        let n0 = crate::linalg::norm(proj.column(0));
        // lasso: λ̃ = λ √J α/ρ = λ·2; pick λ so column 0 is exactly at threshold
        let spec = PenaltySpec::uniform(PenaltyFamily::Lasso, n0 / 2.0, 1).unwrap();
        let b = update_loadings(jh.view(), a.view(), &spec, 0, array![1.0, 1.0].view(), 1.0, 1.0).unwrap();
        assert!(b.column(0).iter().all(|&v| v == 0.0));
        let lq = PenaltySpec::uniform(PenaltyFamily::Lq { q: 0.5 }, 0.1, 1).unwrap();
        let b = update_loadings(jh.view(), a.view(), &lq, 0, array![0.0, 1.0].view(), 1.0, 1.0).unwrap();
        assert!(b.column(0).iter().all(|&v| v == 0.0));
        assert!(b.column(1).iter().any(|&v| v != 0.0));
    }

    /// Each column minimizes `(ρ/2α)‖b − (JH)ᵀa‖² + λ√J ω ‖b‖` against a
    /// derivative-free numeric minimizer started from the projection.
    #[test]
    fn loadings_match_numeric_column_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (i, j, r) = (30, 8, 3);
        let jh = centered(gaussian(i, j, &mut rng));
        let a = centered_orthonormal_completion(gaussian(i, r, &mut rng).view(), None, r).unwrap();
        let spec = PenaltySpec::uniform(PenaltyFamily::Gdp { gamma: 1.0 }, 0.7, 1).unwrap();
        let sigma_prev = array![0.5, 2.0, 4.0];
        let (rho, alpha) = (0.25, 1.0);
        let b = update_loadings(jh.view(), a.view(), &spec, 0, sigma_prev.view(), rho, alpha).unwrap();
        for k in 0..r {
            let target = jh.t().dot(&a.column(k));
            let w = spec.supergradient(sigma_prev[k]);
            let obj = |x: &Array1<f64>| {
                let d = x - &target;
                rho / (2.0 * alpha) * d.dot(&d) + 0.7 * (j as f64).sqrt() * w * x.dot(x).sqrt()
            };
            let mut best = target.clone();
            let mut fbest = obj(&best);
            let mut step = 1.0;
            while step > 1e-10 {
                let mut improved = false;
                for c in 0..j {
                    for sgn in [-1.0, 1.0] {
                        let mut cand = best.clone();
                        cand[c] += sgn * step;
                        let f = obj(&cand);
                        if f < fbest {
                            best = cand;
                            fbest = f;
                            improved = true;
                        }
                    }
                }
                // shrinking the whole vector handles the non-smooth point at 0
                let shrunk = &best * (1.0 - step.min(1.0));
                if obj(&shrunk) < fbest {
                    fbest = obj(&shrunk);
                    best = shrunk;
                    improved = true;
                }
                if !improved {
                    step *= 0.5;
                }
            }
            let diff = (&best - &b.column(k)).mapv(f64::abs).fold(0.0_f64, |m, x| m.max(*x));
            assert!(diff < 1e-6, "column {k}: {diff}");
        }
    }
}
