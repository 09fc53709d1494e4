//! Ground-truth generator for three-block simulations with global, local
//! common and distinct structures.
//!
//! Each present structure owns a group of components. Its scores are columns
//! of a centered orthonormal `U`; its loadings are nonzero only on the rows
//! of the blocks it spans. The structure is scaled so that its squared
//! Frobenius norm is exactly `snr` times that of the noise sampled on the
//! same blocks.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2};
use ndarray_linalg::QR;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{DataBlock, Distribution};
use crate::linalg::{center_columns, frob_sq, hstack, largest_singular_value, thin_svd};
use crate::solver::EscaModel;

/// Structure names for three blocks, in component order.
pub const STRUCTURE_NAMES: [&str; 7] = ["C123", "C12", "C13", "C23", "D1", "D2", "D3"];

/// Zero-based block supports matching [`STRUCTURE_NAMES`].
pub const STRUCTURE_SUPPORTS: [&[usize]; 7] = [&[0, 1, 2], &[0, 1], &[0, 2], &[1, 2], &[0], &[1], &[2]];

/// Structure SNRs of the seven benchmark cases, one row per case.
pub const CASE_SNRS: [[f64; 7]; 7] = [
    [0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    [10.0, 5.0, 5.0, 5.0, 1.0, 1.0, 1.0],
    [5.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0],
    [1.0, 5.0, 5.0, 5.0, 10.0, 10.0, 10.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
];

/// Upper bound on rejection-sampling attempts.
pub const MAX_ATTEMPTS: usize = 1000;

/// Block type combination of a three-block simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeMix {
    Ggg,
    Bbb,
    Gbb,
    Ggb,
}

impl TypeMix {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ggg" => Ok(TypeMix::Ggg),
            "bbb" => Ok(TypeMix::Bbb),
            "gbb" => Ok(TypeMix::Gbb),
            "ggb" => Ok(TypeMix::Ggb),
            other => Err(Error::Parse(format!("unknown type mix '{other}' (expected ggg, bbb, gbb or ggb)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TypeMix::Ggg => "ggg",
            TypeMix::Bbb => "bbb",
            TypeMix::Gbb => "gbb",
            TypeMix::Ggb => "ggb",
        }
    }

    /// Block distributions with unit dispersion for the Gaussian blocks.
    pub fn distributions(&self) -> Vec<Distribution> {
        let g = Distribution::Gaussian { alpha: 1.0 };
        let b = Distribution::Bernoulli;
        match self {
            TypeMix::Ggg => vec![g, g, g],
            TypeMix::Bbb => vec![b, b, b],
            TypeMix::Gbb => vec![g, b, b],
            TypeMix::Ggb => vec![g, g, b],
        }
    }

    /// Row count used in the benchmark: 100 for all-Gaussian, 200 whenever a
    /// binary block is present.
    pub fn benchmark_rows(&self) -> usize {
        match self {
            TypeMix::Ggg => 100,
            _ => 200,
        }
    }
}

fn default_components() -> usize {
    3
}
fn default_marginal_prob() -> f64 {
    0.1
}
fn default_pseudo_count() -> f64 {
    100.0
}
fn default_d_mean() -> f64 {
    1.0
}
fn default_d_std() -> f64 {
    0.5
}
fn default_rejection() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_rows: usize,
    pub block_sizes: Vec<usize>,
    pub block_types: Vec<Distribution>,
    /// SNR per structure in [`STRUCTURE_NAMES`] order; 0 means absent.
    pub structure_snrs: Vec<f64>,
    #[serde(default = "default_components")]
    pub components_per_structure: usize,
    /// Marginal probability of a one in binary blocks.
    #[serde(default = "default_marginal_prob")]
    pub marginal_prob: f64,
    #[serde(default = "default_pseudo_count")]
    pub pseudo_count: f64,
    #[serde(default = "default_d_mean")]
    pub d_mean: f64,
    #[serde(default = "default_d_std")]
    pub d_std: f64,
    /// Each structure's smallest singular value must exceed this multiple of
    /// the largest singular value of its noise. 0 disables rejection.
    #[serde(default = "default_rejection")]
    pub rejection: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationSpec {
    /// One of the seven benchmark cases (1-based) at benchmark sizes.
    pub fn case(mix: TypeMix, case: usize, seed: u64) -> Result<Self> {
        Self::case_with_sizes(mix, case, mix.benchmark_rows(), vec![1000, 500, 100], seed)
    }

    pub fn case_with_sizes(mix: TypeMix, case: usize, n_rows: usize, block_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if !(1..=7).contains(&case) {
            return Err(Error::contract(format!("simulation case must be in 1..=7, got {case}")));
        }
        let spec = SimulationSpec {
            n_rows,
            block_sizes,
            block_types: mix.distributions(),
            structure_snrs: CASE_SNRS[case - 1].to_vec(),
            components_per_structure: default_components(),
            marginal_prob: default_marginal_prob(),
            pseudo_count: default_pseudo_count(),
            d_mean: default_d_mean(),
            d_std: default_d_std(),
            rejection: default_rejection(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The dispersion-estimation scenario: all structures at SNR 1,
    /// `I = 100`, `J = (5000, 500, 50)`, with the given block types.
    pub fn dispersion_scenario(block_types: Vec<Distribution>, seed: u64) -> Result<Self> {
        let spec = SimulationSpec {
            n_rows: 100,
            block_sizes: vec![5000, 500, 50],
            block_types,
            structure_snrs: vec![1.0; 7],
            components_per_structure: default_components(),
            marginal_prob: default_marginal_prob(),
            pseudo_count: default_pseudo_count(),
            d_mean: default_d_mean(),
            d_std: default_d_std(),
            rejection: default_rejection(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses names like `ggg-case3`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (mix, case) = lower
            .split_once("-case")
            .ok_or_else(|| Error::Parse(format!("unknown preset '{name}' (expected e.g. ggg-case3)")))?;
        let case: usize = case
            .parse()
            .map_err(|_| Error::Parse(format!("bad case number in preset '{name}'")))?;
        Self::case(TypeMix::parse(mix)?, case, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.len() != 3 || self.block_types.len() != 3 {
            return Err(Error::contract("the simulator generates exactly three blocks"));
        }
        if self.structure_snrs.len() != STRUCTURE_NAMES.len() {
            return Err(Error::contract(format!(
                "expected {} structure SNRs, got {}",
                STRUCTURE_NAMES.len(),
                self.structure_snrs.len()
            )));
        }
        if self.structure_snrs.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::contract("structure SNRs must be finite and non-negative"));
        }
        if self.n_rows < 2 || self.block_sizes.iter().any(|&j| j == 0) {
            return Err(Error::contract("row count must be at least 2 and block sizes positive"));
        }
        if self.block_types.iter().any(|d| matches!(d, Distribution::Poisson)) {
            return Err(Error::contract("Poisson blocks cannot be simulated"));
        }
        if let Some(Distribution::Gaussian { alpha }) =
            self.block_types.iter().find(|d| matches!(d, Distribution::Gaussian { alpha } if !(*alpha > 0.0 && alpha.is_finite())))
        {
            return Err(Error::contract(format!("Gaussian dispersion must be positive, got {alpha}")));
        }
        if !(self.marginal_prob > 0.0 && self.marginal_prob < 1.0) {
            return Err(Error::contract(format!("marginal probability must be in (0, 1), got {}", self.marginal_prob)));
        }
        if !(self.pseudo_count > 0.0 && self.pseudo_count.is_finite()) {
            return Err(Error::contract("pseudo count must be positive"));
        }
        if !(self.d_std >= 0.0 && self.d_mean.is_finite() && self.d_std.is_finite()) {
            return Err(Error::contract("d_mean and d_std must be finite, d_std non-negative"));
        }
        if !(self.rejection >= 0.0 && self.rejection.is_finite()) {
            return Err(Error::contract("rejection factor must be finite and non-negative"));
        }
        if self.components_per_structure == 0 {
            return Err(Error::contract("components_per_structure must be positive"));
        }
        let r = self.present_structures().len() * self.components_per_structure;
        if r > self.n_rows - 1 {
            return Err(Error::contract(format!("{r} components need more than {} rows", self.n_rows)));
        }
        for &s in &self.present_structures() {
            let rows: usize = STRUCTURE_SUPPORTS[s].iter().map(|&l| self.block_sizes[l]).sum();
            if rows < self.components_per_structure {
                return Err(Error::contract(format!(
                    "structure {} spans {rows} variables, fewer than {} components",
                    STRUCTURE_NAMES[s], self.components_per_structure
                )));
            }
        }
        Ok(())
    }

    /// Indices into [`STRUCTURE_NAMES`] of structures with positive SNR.
    pub fn present_structures(&self) -> Vec<usize> {
        (0..STRUCTURE_NAMES.len()).filter(|&s| self.structure_snrs[s] > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueStructure {
    pub name: String,
    /// Zero-based blocks spanned.
    pub blocks: Vec<usize>,
    /// Columns of `U`/`V` owned by this structure.
    pub components: Range<usize>,
    pub snr_requested: f64,
    pub snr_realized: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationTruth {
    /// `I×R`, centered with orthonormal columns.
    pub scores: Array2<f64>,
    /// Per-component `|N(d_mean, d_std)|` draws.
    pub d: Array1<f64>,
    /// Per-component structure scale `c`.
    pub c: Array1<f64>,
    /// `ΣJ×R` with exact zeros outside each structure's blocks.
    pub loadings: Array2<f64>,
    pub offsets: Vec<Array1<f64>>,
    pub thetas: Vec<Array2<f64>>,
    pub noise: Vec<Array2<f64>>,
    pub structures: Vec<TrueStructure>,
    pub block_sizes: Vec<usize>,
    pub block_types: Vec<Distribution>,
    pub attempts: usize,
    /// Largest absolute inner product between loading columns of different
    /// structures. Overlapping supports make this nonzero.
    pub cross_coherence: f64,
}

impl SimulationTruth {
    pub fn block_range(&self, l: usize) -> Range<usize> {
        let start: usize = self.block_sizes[..l].iter().sum();
        start..start + self.block_sizes[l]
    }

    /// Loadings of block `l` with the scales folded in, `V_l diag(c⊙d)`.
    pub fn block_loadings(&self, l: usize) -> Array2<f64> {
        let cd = &self.c * &self.d;
        let v = self.loadings.slice(s![self.block_range(l), ..]);
        &v * &cd.view().insert_axis(ndarray::Axis(0))
    }

    /// `Θ_l = 1μ_lᵀ + U diag(c⊙d) V_lᵀ`.
    pub fn compute_theta(&self, l: usize) -> Array2<f64> {
        let mut theta = self.scores.dot(&self.block_loadings(l).t());
        theta += &self.offsets[l].view().insert_axis(ndarray::Axis(0));
        theta
    }

    /// `U_s diag(c d_s) V_sᵀ` over all blocks (zero columns outside the
    /// structure's support).
    pub fn structure_matrix(&self, structure: &TrueStructure) -> Array2<f64> {
        let comp = structure.components.clone();
        let cd = &self.c.slice(s![comp.clone()]) * &self.d.slice(s![comp.clone()]);
        let u = self.scores.slice(s![.., comp.clone()]);
        let scaled = &u * &cd.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.loadings.slice(s![.., comp]).t())
    }

    pub fn structure(&self, name: &str) -> Option<&TrueStructure> {
        self.structures.iter().find(|s| s.name == name)
    }

    pub fn theta_concat(&self) -> Array2<f64> {
        let views: Vec<ArrayView2<f64>> = self.thetas.iter().map(|t| t.view()).collect();
        hstack(&views)
    }

    pub fn offsets_concat(&self) -> Array1<f64> {
        Array1::from_iter(self.offsets.iter().flat_map(|m| m.iter().copied()))
    }

    /// The truth as a model: `A = U`, `B_l = V_l diag(c⊙d)`.
    pub fn as_model(&self) -> Result<EscaModel> {
        let loadings = (0..self.block_sizes.len()).map(|l| self.block_loadings(l)).collect();
        EscaModel::new(self.offsets.clone(), self.scores.clone(), loadings)
    }
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Centered scores with orthonormal columns: a standard-normal draw is
/// column-centered and replaced by its left singular vectors.
pub fn simulate_scores<R: Rng + ?Sized>(n_rows: usize, r: usize, rng: &mut R) -> Result<Array2<f64>> {
    if r + 1 > n_rows {
        return Err(Error::contract(format!("{r} centered orthonormal columns need at least {} rows", r + 1)));
    }
    let mut z = normal_matrix(n_rows, r, rng);
    center_columns(&mut z);
    let (u, _, _) = thin_svd(z.view())?;
    Ok(u)
}

/// Loadings with a block-sparse pattern. Group `g` gets `k` columns that are
/// standard-normal on the rows of the blocks in `supports[g]` and exactly
/// zero elsewhere, then orthonormalized by QR within the group only.
pub fn simulate_loadings<R: Rng + ?Sized>(
    block_sizes: &[usize],
    supports: &[Vec<usize>],
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let total: usize = block_sizes.iter().sum();
    let starts: Vec<usize> = block_sizes
        .iter()
        .scan(0, |acc, &j| {
            let s = *acc;
            *acc += j;
            Some(s)
        })
        .collect();
    let mut v = Array2::zeros((total, supports.len() * k));
    for (g, support) in supports.iter().enumerate() {
        if support.is_empty() {
            return Err(Error::contract(format!("loading group {g} has an empty block support")));
        }
        if let Some(&l) = support.iter().find(|&&l| l >= block_sizes.len()) {
            return Err(Error::contract(format!("loading group {g} refers to block {l}")));
        }
        let rows: Vec<usize> = support.iter().flat_map(|&l| starts[l]..starts[l] + block_sizes[l]).collect();
        if rows.len() < k {
            return Err(Error::contract(format!("loading group {g} spans {} rows, fewer than {k}", rows.len())));
        }
        let z = normal_matrix(rows.len(), k, rng);
        let (q, _) = z.qr()?;
        for (i, &row) in rows.iter().enumerate() {
            for c in 0..k {
                v[[row, g * k + c]] = q[[i, c]];
            }
        }
    }
    Ok(v)
}

/// Scale `c` with `‖c U_s D_s V_sᵀ‖² = snr · noise_sq`, using the
/// orthonormality of `U_s` and `V_s`. `None` when the structure is absent.
pub fn calibrate_snr(d: &[f64], noise_sq: f64, snr: f64) -> Option<f64> {
    if snr <= 0.0 {
        return None;
    }
    let d_sq: f64 = d.iter().map(|x| x * x).sum();
    Some((snr * noise_sq / d_sq).sqrt())
}

/// Gaussian blocks get standard-normal offsets. Binary blocks get the logit
/// of `Beta(n p + 1, n (1 − p) + 1)` draws, a posterior for a marginal
/// probability `p` seen in `n` trials.
pub fn simulate_offsets<R: Rng + ?Sized>(
    dist: Distribution,
    j: usize,
    p: f64,
    n: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    match dist {
        Distribution::Gaussian { .. } => Ok(Array1::from_shape_simple_fn(j, || rng.sample(StandardNormal))),
        Distribution::Bernoulli => {
            let beta = Beta::new(n * p + 1.0, n * (1.0 - p) + 1.0)
                .map_err(|e| Error::contract(format!("invalid Beta parameters: {e}")))?;
            Ok(Array1::from_shape_simple_fn(j, || {
                let pi: f64 = rng.sample(beta);
                let pi = pi.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                (pi / (1.0 - pi)).ln()
            }))
        }
        Distribution::Poisson => Err(Error::contract("Poisson offsets are not simulated")),
    }
}

/// Standard logistic noise by inversion.
pub fn logistic_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.sample(Open01);
        (u / (1.0 - u)).ln()
    })
}

fn simulate_noise<R: Rng + ?Sized>(dist: Distribution, rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    match dist {
        Distribution::Gaussian { alpha } => normal_matrix(rows, cols, rng) * alpha.sqrt(),
        _ => logistic_noise(rows, cols, rng),
    }
}

/// Draws blocks and their ground truth. The whole instance is redrawn until
/// every present structure's smallest singular value exceeds
/// `spec.rejection` times the largest singular value of the noise on its
/// blocks.
pub fn simulate_blocks(spec: &SimulationSpec) -> Result<(Vec<DataBlock>, SimulationTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let present = spec.present_structures();
    let k = spec.components_per_structure;
    let r = present.len() * k;
    let n = spec.n_rows;
    let n_blocks = spec.block_sizes.len();
    let supports: Vec<Vec<usize>> = present.iter().map(|&s| STRUCTURE_SUPPORTS[s].to_vec()).collect();
    let d_dist = rand_distr::Normal::new(spec.d_mean, spec.d_std)
        .map_err(|e| Error::contract(format!("invalid singular value distribution: {e}")))?;

    for attempt in 1..=MAX_ATTEMPTS {
        let u = simulate_scores(n, r, &mut rng)?;
        let v = simulate_loadings(&spec.block_sizes, &supports, k, &mut rng)?;
        let d = Array1::from_shape_simple_fn(r, || rng.sample::<f64, _>(d_dist).abs());
        let noise: Vec<Array2<f64>> = (0..n_blocks)
            .map(|l| simulate_noise(spec.block_types[l], n, spec.block_sizes[l], &mut rng))
            .collect();
        let offsets = (0..n_blocks)
            .map(|l| {
                simulate_offsets(spec.block_types[l], spec.block_sizes[l], spec.marginal_prob, spec.pseudo_count, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut c = Array1::zeros(r);
        let mut accepted = true;
        let mut noise_sq = Vec::with_capacity(present.len());
        for (g, &s) in present.iter().enumerate() {
            let comp = g * k..(g + 1) * k;
            let e_sq: f64 = supports[g].iter().map(|&l| frob_sq(noise[l].view())).sum();
            let d_s = d.slice(s![comp.clone()]).to_vec();
            let scale = calibrate_snr(&d_s, e_sq, spec.structure_snrs[s]).expect("present structure has positive SNR");
            c.slice_mut(s![comp]).fill(scale);
            noise_sq.push(e_sq);
            if spec.rejection > 0.0 {
                let views: Vec<ArrayView2<f64>> = supports[g].iter().map(|&l| noise[l].view()).collect();
                let e_top = largest_singular_value(hstack(&views).view())?;
                let smallest = d_s.iter().fold(f64::INFINITY, |m, &x| m.min(x)) * scale;
                if !(smallest > spec.rejection * e_top) {
                    accepted = false;
                    break;
                }
            }
        }
        if !accepted {
            continue;
        }

        let mut truth = SimulationTruth {
            scores: u,
            d,
            c,
            loadings: v,
            offsets,
            thetas: Vec::new(),
            noise,
            structures: Vec::new(),
            block_sizes: spec.block_sizes.clone(),
            block_types: spec.block_types.clone(),
            attempts: attempt,
            cross_coherence: 0.0,
        };
        truth.cross_coherence = cross_coherence(truth.loadings.view(), k);
        for (g, &s) in present.iter().enumerate() {
            let mut st = TrueStructure {
                name: STRUCTURE_NAMES[s].to_string(),
                blocks: supports[g].clone(),
                components: g * k..(g + 1) * k,
                snr_requested: spec.structure_snrs[s],
                snr_realized: 0.0,
                scale: truth.c[g * k],
            };
            st.snr_realized = frob_sq(truth.structure_matrix(&st).view()) / noise_sq[g];
            truth.structures.push(st);
        }
        let blocks = realize(spec, &mut truth)?;
        return Ok((blocks, truth));
    }
    Err(Error::SimulationInfeasible { attempts: MAX_ATTEMPTS })
}

fn realize(spec: &SimulationSpec, truth: &mut SimulationTruth) -> Result<Vec<DataBlock>> {
    let mut blocks = Vec::with_capacity(spec.block_sizes.len());
    for l in 0..spec.block_sizes.len() {
        let theta = truth.compute_theta(l);
        let latent = &theta + &truth.noise[l];
        let values = match spec.block_types[l] {
            Distribution::Gaussian { .. } => latent,
            _ => latent.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        };
        blocks.push(DataBlock::complete(values, spec.block_types[l])?);
        truth.thetas.push(theta);
    }
    Ok(blocks)
}

fn cross_coherence(v: ArrayView2<f64>, k: usize) -> f64 {
    let gram = v.t().dot(&v);
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            if i / k != j / k {
                worst = worst.max(gram[[i, j]].abs());
            }
        }
    }
    worst
}
