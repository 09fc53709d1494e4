//! Exponential-family kernel: log-partition functions, their derivatives,
//! curvature bounds for the quadratic majorizer, masked likelihoods and the
//! pseudo-data transform that turns each majorization step into least squares.
//!
//! The Θ-free constant of every log-likelihood is dropped throughout; only
//! differences of objective values are ever compared.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Distribution {
    /// Quantitative data with noise variance `alpha`.
    Gaussian { alpha: f64 },
    Bernoulli,
    Poisson,
}

impl Distribution {
    pub fn gaussian(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::contract(format!("Gaussian dispersion must be positive, got {alpha}")));
        }
        Ok(Distribution::Gaussian { alpha })
    }

    pub fn dispersion(&self) -> f64 {
        match *self {
            Distribution::Gaussian { alpha } => alpha,
            Distribution::Bernoulli | Distribution::Poisson => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Gaussian { .. } => "gaussian",
            Distribution::Bernoulli => "bernoulli",
            Distribution::Poisson => "poisson",
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Distribution::Gaussian { .. })
    }

    pub fn is_bernoulli(&self) -> bool {
        matches!(self, Distribution::Bernoulli)
    }
}

/// `b(θ)`.
pub fn log_partition(dist: Distribution, theta: f64) -> f64 {
    match dist {
        Distribution::Gaussian { .. } => 0.5 * theta * theta,
        Distribution::Bernoulli => softplus(theta),
        Distribution::Poisson => theta.exp(),
    }
}

/// `b'(θ)`, the conditional mean.
pub fn mean_map(dist: Distribution, theta: f64) -> f64 {
    match dist {
        Distribution::Gaussian { .. } => theta,
        Distribution::Bernoulli => logistic(theta),
        Distribution::Poisson => theta.exp(),
    }
}

/// `log(1 + exp(θ))` without overflow.
pub fn softplus(theta: f64) -> f64 {
    if theta > 0.0 {
        theta + (-theta).exp().ln_1p()
    } else {
        theta.exp().ln_1p()
    }
}

pub fn logistic(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// Upper bound `ρ` on `b''` used by the quadratic majorizer.
///
/// Gaussian: 1. Bernoulli: 0.25. Poisson: `max exp(θ)` over the matrix,
/// which is only a local bound and must be recomputed every iteration.
pub fn curvature_bound(dist: Distribution, theta: ArrayView2<f64>) -> Result<f64> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidState("non-finite natural parameter".into()));
    }
    Ok(match dist {
        Distribution::Gaussian { .. } => 1.0,
        Distribution::Bernoulli => 0.25,
        Distribution::Poisson => poisson_bound(theta.iter().copied()),
    })
}

/// As [`curvature_bound`], but masked cells never enter the Poisson maximum.
pub fn curvature_bound_masked(
    dist: Distribution,
    theta: ArrayView2<f64>,
    mask: ArrayView2<f64>,
) -> Result<f64> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidState("non-finite natural parameter".into()));
    }
    Ok(match dist {
        Distribution::Gaussian { .. } => 1.0,
        Distribution::Bernoulli => 0.25,
        Distribution::Poisson => poisson_bound(
            theta.iter().zip(mask.iter()).filter(|(_, w)| **w != 0.0).map(|(t, _)| *t),
        ),
    })
}

fn poisson_bound(thetas: impl Iterator<Item = f64>) -> f64 {
    let max = thetas.fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // nothing observed: any positive value gives the same pseudo-data
        1.0
    } else {
        max.exp().max(f64::MIN_POSITIVE)
    }
}

/// One observed data matrix together with its missing-value mask and family.
///
/// Values at masked cells are canonicalized to 0 on construction, so no
/// downstream computation can depend on them.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    values: Array2<f64>,
    mask: Array2<f64>,
    dist: Distribution,
}

impl DataBlock {
    pub fn new(values: Array2<f64>, mask: Array2<f64>, dist: Distribution) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::contract(format!(
                "values {:?} and mask {:?} differ in shape",
                values.dim(),
                mask.dim()
            )));
        }
        if let Distribution::Gaussian { alpha } = dist {
            Distribution::gaussian(alpha)?;
        }
        let mut values = values;
        for (v, w) in values.iter_mut().zip(mask.iter()) {
            if *w == 0.0 {
                *v = 0.0;
                continue;
            }
            if *w != 1.0 {
                return Err(Error::contract(format!("mask entries must be 0 or 1, found {w}")));
            }
            if !v.is_finite() {
                return Err(Error::contract("observed value is not finite"));
            }
            match dist {
                Distribution::Bernoulli if *v != 0.0 && *v != 1.0 => {
                    return Err(Error::contract(format!("binary block holds non-binary value {v}")));
                }
                Distribution::Poisson if *v < 0.0 || v.fract() != 0.0 => {
                    return Err(Error::contract(format!("count block holds non-count value {v}")));
                }
                _ => {}
            }
        }
        Ok(DataBlock { values, mask, dist })
    }

    /// Fully observed block.
    pub fn complete(values: Array2<f64>, dist: Distribution) -> Result<Self> {
        let mask = Array2::ones(values.dim());
        Self::new(values, mask, dist)
    }

    /// Block whose missing cells are marked by NaN in `values`.
    pub fn from_nan_coded(values: Array2<f64>, dist: Distribution) -> Result<Self> {
        let mask = values.mapv(|v| if v.is_nan() { 0.0 } else { 1.0 });
        Self::new(values, mask, dist)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn mask(&self) -> ArrayView2<'_, f64> {
        self.mask.view()
    }

    pub fn dist(&self) -> Distribution {
        self.dist
    }

    pub fn dispersion(&self) -> f64 {
        self.dist.dispersion()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|w| **w != 0.0).count()
    }

    /// Same data under a different mask (e.g. a training mask).
    pub fn with_mask(&self, mask: Array2<f64>) -> Result<Self> {
        if mask.iter().zip(self.mask.iter()).any(|(new, old)| *new != 0.0 && *old == 0.0) {
            return Err(Error::contract("new mask observes a cell that is missing in the data"));
        }
        DataBlock::new(self.values.clone(), mask, self.dist)
    }

    /// Same data with a different family (e.g. after dispersion estimation).
    pub fn with_dist(&self, dist: Distribution) -> Result<Self> {
        DataBlock::new(self.values.clone(), self.mask.clone(), dist)
    }

    /// Values with NaN at missing cells, the CSV interchange convention.
    pub fn nan_coded(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        Zip::from(&mut out).and(&self.mask).for_each(|v, w| {
            if *w == 0.0 {
                *v = f64::NAN;
            }
        });
        out
    }
}

/// `(1/α)(⟨W, b(Θ)⟩ − ⟨W⊙X, Θ⟩)`.
pub fn block_neg_loglik(block: &DataBlock, theta: ArrayView2<f64>) -> Result<f64> {
    if theta.dim() != block.values.dim() {
        return Err(Error::contract(format!(
            "theta {:?} does not match block {:?}",
            theta.dim(),
            block.values.dim()
        )));
    }
    Ok(masked_neg_loglik(block.dist, block.values.view(), block.mask.view(), theta))
}

pub(crate) fn masked_neg_loglik(
    dist: Distribution,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    theta: ArrayView2<f64>,
) -> f64 {
    let mut acc = 0.0;
    Zip::from(&x).and(&w).and(&theta).for_each(|&x, &w, &t| {
        if w != 0.0 {
            acc += log_partition(dist, t) - x * t;
        }
    });
    acc / dist.dispersion()
}

/// `H = Θᵏ − (1/ρ) W⊙(b'(Θᵏ) − X)`; masked cells carry `Θᵏ` forward.
pub fn pseudo_data(block: &DataBlock, theta_k: ArrayView2<f64>, rho: f64) -> Result<Array2<f64>> {
    if theta_k.dim() != block.values.dim() {
        return Err(Error::contract(format!(
            "theta {:?} does not match block {:?}",
            theta_k.dim(),
            block.values.dim()
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::contract(format!("curvature bound must be positive, got {rho}")));
    }
    let dist = block.dist;
    let inv = 1.0 / rho;
    let mut h = theta_k.to_owned();
    Zip::from(&mut h).and(&block.values).and(&block.mask).for_each(|h, &x, &w| {
        if w != 0.0 {
            *h -= inv * (mean_map(dist, *h) - x);
        }
    });
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G1: Distribution = Distribution::Gaussian { alpha: 1.0 };
    const FAMILIES: [Distribution; 3] =
        [Distribution::Gaussian { alpha: 1.0 }, Distribution::Bernoulli, Distribution::Poisson];

    #[test]
    fn log_partition_examples() {
        assert_eq!(log_partition(G1, 2.0), 2.0);
        assert!((log_partition(Distribution::Bernoulli, 0.0) - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(log_partition(Distribution::Poisson, 0.0), 1.0);
    }

    #[test]
    fn mean_map_examples() {
        assert_eq!(mean_map(Distribution::Bernoulli, 0.0), 0.5);
        assert_eq!(mean_map(G1, -3.2), -3.2);
        assert!((mean_map(Distribution::Poisson, 1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn curvature_bound_examples() {
        let any = array![[3.0, -20.0], [0.5, 7.0]];
        assert_eq!(curvature_bound(Distribution::Bernoulli, any.view()).unwrap(), 0.25);
        assert_eq!(curvature_bound(G1, any.view()).unwrap(), 1.0);
        let t = array![[0.0, 3f64.ln()]];
        assert!((curvature_bound(Distribution::Poisson, t.view()).unwrap() - 3.0).abs() < 1e-12);
        let bad = array![[f64::NAN]];
        assert!(matches!(curvature_bound(G1, bad.view()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn poisson_bound_ignores_masked_cells() {
        let t = array![[0.0, 10.0]];
        let w = array![[1.0, 0.0]];
        let rho = curvature_bound_masked(Distribution::Poisson, t.view(), w.view()).unwrap();
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn neg_loglik_examples() {
        let b = DataBlock::complete(array![[1.0]], G1).unwrap();
        assert_eq!(block_neg_loglik(&b, array![[1.0]].view()).unwrap(), -0.5);

        let b = DataBlock::new(array![[1.0, 2.0]], array![[0.0, 0.0]], G1).unwrap();
        assert_eq!(block_neg_loglik(&b, array![[5.0, -1.0]].view()).unwrap(), 0.0);

        let b = DataBlock::complete(array![[1.0]], Distribution::Bernoulli).unwrap();
        let v = block_neg_loglik(&b, array![[0.0]].view()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        assert!(block_neg_loglik(&b, array![[0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn neg_loglik_scales_with_dispersion() {
        let x = array![[1.0, -2.0]];
        let b1 = DataBlock::complete(x.clone(), G1).unwrap();
        let b4 = DataBlock::complete(x, Distribution::Gaussian { alpha: 4.0 }).unwrap();
        let t = array![[0.3, 0.7]];
        let v1 = block_neg_loglik(&b1, t.view()).unwrap();
        let v4 = block_neg_loglik(&b4, t.view()).unwrap();
        assert!((v1 - 4.0 * v4).abs() < 1e-14);
    }

    #[test]
    fn pseudo_data_examples() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let b = DataBlock::complete(x.clone(), Distribution::Gaussian { alpha: 7.0 }).unwrap();
        let theta = array![[0.1, 0.2], [-4.0, 9.0]];
        let h = pseudo_data(&b, theta.view(), 1.0).unwrap();
        for (a, e) in h.iter().zip(x.iter()) {
            assert!((a - e).abs() < 1e-14);
        }

        let b = DataBlock::new(x, Array2::zeros((2, 2)), G1).unwrap();
        assert_eq!(pseudo_data(&b, theta.view(), 1.0).unwrap(), theta);

        let b = DataBlock::complete(array![[1.0]], Distribution::Bernoulli).unwrap();
        let h = pseudo_data(&b, array![[0.0]].view(), 0.25).unwrap();
        assert!((h[[0, 0]] - 2.0).abs() < 1e-15);
    }

    /// The Bernoulli pseudo-data cell equals the minimizer of the scalar
    /// quadratic majorizer, located here by a finite-difference Newton step.
    #[test]
    fn pseudo_data_is_majorizer_minimizer() {
        let (x, tk, rho) = (1.0, 0.0, 0.25);
        let d = Distribution::Bernoulli;
        let fk = log_partition(d, tk) - x * tk;
        let surrogate = |t: f64| {
            let h = 1e-5;
            let grad = (log_partition(d, tk + h) - log_partition(d, tk - h)) / (2.0 * h) - x;
            fk + grad * (t - tk) + 0.5 * rho * (t - tk) * (t - tk)
        };
        let h = 1e-4;
        let g0 = (surrogate(h) - surrogate(-h)) / (2.0 * h);
        let c = (surrogate(h) - 2.0 * surrogate(0.0) + surrogate(-h)) / (h * h);
        let argmin = -g0 / c;
        assert!((argmin - 2.0).abs() < 1e-5, "{argmin}");
    }

    #[test]
    fn block_validation() {
        assert!(DataBlock::complete(array![[0.5]], Distribution::Bernoulli).is_err());
        assert!(DataBlock::complete(array![[-1.0]], Distribution::Poisson).is_err());
        assert!(DataBlock::complete(array![[1.5]], Distribution::Poisson).is_err());
        assert!(DataBlock::new(array![[1.0]], array![[0.5]], G1).is_err());
        assert!(DataBlock::complete(array![[1.0]], Distribution::Gaussian { alpha: 0.0 }).is_err());
        // masked junk is fine and canonicalized
        let b = DataBlock::new(array![[f64::NAN, 1.0]], array![[0.0, 1.0]], Distribution::Bernoulli)
            .unwrap();
        assert_eq!(b.values()[[0, 0]], 0.0);
        assert!(b.nan_coded()[[0, 0]].is_nan());
    }

    #[test]
    fn mean_map_is_derivative_of_log_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let d = FAMILIES[rng.gen_range(0..3)];
            let t: f64 = rng.gen_range(-8.0..8.0);
            let h = 1e-5;
            let fd = (log_partition(d, t + h) - log_partition(d, t - h)) / (2.0 * h);
            let m = mean_map(d, t);
            assert!((fd - m).abs() <= 1e-6 * m.abs().max(1e-3), "{d:?} θ={t}: {fd} vs {m}");
        }
    }

    #[test]
    fn second_difference_below_curvature_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(-8.0..8.0);
            let h = 1e-4;
            for d in [G1, Distribution::Bernoulli] {
                let sd = (log_partition(d, t + h) - 2.0 * log_partition(d, t) + log_partition(d, t - h))
                    / (h * h);
                let rho = curvature_bound(d, array![[t]].view()).unwrap();
                assert!(sd <= rho + 1e-6, "{d:?} θ={t}: {sd} > {rho}");
            }
            // Poisson bound is local: it holds over the anchoring matrix.
            let d = Distribution::Poisson;
            let sd = (log_partition(d, t + h) - 2.0 * log_partition(d, t) + log_partition(d, t - h)) / (h * h);
            let rho = curvature_bound(d, array![[t - h, t + h]].view()).unwrap();
            assert!(sd <= rho * (1.0 + 1e-6) + 1e-8);
        }
    }

    #[test]
    fn bernoulli_log_partition_is_overflow_safe() {
        let mut t = -700.0;
        while t <= 700.0 {
            let v = log_partition(Distribution::Bernoulli, t);
            assert!(v.is_finite(), "θ={t}");
            if t >= 40.0 {
                assert!((v - t).abs() <= 1e-12, "θ={t}");
            }
            t += 0.5;
        }
    }

    proptest! {
        /// Quadratic majorization: b(θ) − xθ never exceeds the surrogate anchored
        /// at θk whenever ρ bounds b'' on the segment.
        #[test]
        fn quadratic_majorizer_dominates(t in -10.0f64..10.0, tk in -10.0f64..10.0, x in 0u8..6, fam in 0usize..3) {
            let d = FAMILIES[fam];
            let x = match d {
                Distribution::Bernoulli => (x % 2) as f64,
                _ => x as f64,
            };
            let seg = array![[t, tk]];
            let rho = curvature_bound(d, seg.view()).unwrap();
            let f = |v: f64| log_partition(d, v) - x * v;
            let g = mean_map(d, tk) - x;
            let surrogate = f(tk) + g * (t - tk) + 0.5 * rho * (t - tk) * (t - tk);
            let slack = 1e-10 * (1.0 + surrogate.abs());
            prop_assert!(f(t) <= surrogate + slack, "f={} s={}", f(t), surrogate);
        }
    }
}
