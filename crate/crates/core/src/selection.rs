//! Model selection by missing-value cross-validation.
//!
//! A random tenth of the observed cells of every block is hidden, a
//! warm-started chain of fits runs over an ascending λ grid on the remaining
//! cells, and the λ with the smallest held-out negative log-likelihood is
//! refitted on the full data.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{masked_neg_loglik, DataBlock};
use crate::penalty::{PenaltyFamily, PenaltySpec};
use crate::solver::{fit, EscaModel, FitConfig, FitResult, ACTIVE_TOL};

/// Default hold-out fraction.
pub const TEST_FRACTION: f64 = 0.1;

/// Cells hidden for validation and the complementary training cells.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub test: Vec<Array2<f64>>,
    pub train: Vec<Array2<f64>>,
}

impl HoldoutSplit {
    /// The blocks with their test cells re-marked as missing.
    pub fn training_blocks(&self, blocks: &[DataBlock]) -> Result<Vec<DataBlock>> {
        blocks.iter().zip(&self.train).map(|(b, m)| b.with_mask(m.clone())).collect()
    }

    pub fn test_count(&self, block: usize) -> usize {
        self.test[block].iter().filter(|v| **v != 0.0).count()
    }
}

/// `round(fraction · n)` cells drawn uniformly without replacement.
pub(crate) fn draw_test_cells<R: Rng>(cells: &[(usize, usize)], fraction: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let k = ((fraction * cells.len() as f64).round() as usize).min(cells.len());
    let mut picked: Vec<usize> = sample(rng, cells.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cells[i]).collect()
}

/// Hides `fraction` of the observed cells of every block. Binary blocks are
/// stratified: the fraction is taken separately from the ones and the zeros.
pub fn make_holdout(blocks: &[DataBlock], fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("hold-out fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::with_capacity(blocks.len());
    let mut train = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        if b.observed_count() < 10 {
            return Err(Error::contract(format!("block {l} has fewer than 10 observed cells")));
        }
        let observed: Vec<(usize, usize)> =
            b.mask().indexed_iter().filter(|(_, w)| **w != 0.0).map(|(ix, _)| ix).collect();
        let chosen = if b.dist().is_bernoulli() {
            let (ones, zeros): (Vec<_>, Vec<_>) = observed.iter().partition(|&&(i, j)| b.values()[[i, j]] == 1.0);
            if ones.is_empty() {
                return Err(Error::StratificationImpossible { block: l, missing_class: "one" });
            }
            if zeros.is_empty() {
                return Err(Error::StratificationImpossible { block: l, missing_class: "zero" });
            }
            let mut c = draw_test_cells(&ones, fraction, &mut rng);
            c.extend(draw_test_cells(&zeros, fraction, &mut rng));
            c
        } else {
            draw_test_cells(&observed, fraction, &mut rng)
        };
        let mut t = Array2::zeros(b.mask().dim());
        let mut tr = b.mask().to_owned();
        for (i, j) in chosen {
            t[[i, j]] = 1.0;
            tr[[i, j]] = 0.0;
        }
        test.push(t);
        train.push(tr);
    }
    Ok(HoldoutSplit { test, train })
}

/// Per-block negative log-likelihood of the held-out cells under the model.
pub fn cv_error(model: &EscaModel, blocks: &[DataBlock], split: &HoldoutSplit) -> Result<Vec<f64>> {
    if model.n_blocks() != blocks.len() || split.test.len() != blocks.len() {
        return Err(Error::contract("model, blocks and split disagree on the number of blocks"));
    }
    blocks
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let theta = model.theta(l);
            if theta.dim() != b.values().dim() || split.test[l].dim() != b.values().dim() {
                return Err(Error::contract(format!("block {l}: shape mismatch")));
            }
            Ok(masked_neg_loglik(b.dist(), b.values(), split.test[l].view(), theta.view()))
        })
        .collect()
}

/// `n` log-equidistant values from `lo` to `hi`, ascending, with exact endpoints.
pub fn lambda_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) || n < 2 {
        return Err(Error::contract(format!("invalid grid {lo}:{hi}:{n}, need 0 < lo < hi and n >= 2")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|k| (a + step * k as f64).exp()).collect();
    g[0] = lo;
    g[n - 1] = hi;
    Ok(g)
}

/// Default grid for Gaussian blocks: 30 points on `[1, 500]`.
pub fn default_gaussian_grid() -> Vec<f64> {
    lambda_grid(1.0, 500.0, 30).expect("valid constant grid")
}

/// Default grid for binary blocks: 30 points on `[1, 100]`.
pub fn default_binary_grid() -> Vec<f64> {
    lambda_grid(1.0, 100.0, 30).expect("valid constant grid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub family: PenaltyFamily,
    /// Settings of every fit along the chain.
    pub fit: FitConfig,
    /// Tolerance of the final refit on the full data.
    pub refit_epsilon: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            family: PenaltyFamily::default(),
            fit: FitConfig::default(),
            refit_epsilon: 1e-8,
            test_fraction: TEST_FRACTION,
            seed: 0,
        }
    }
}

/// One fit of a λ chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPoint {
    /// Per-block λ used for this fit.
    pub lambdas: Vec<f64>,
    pub cv_errors: Vec<f64>,
    /// CV error summed over the blocks that govern this chain.
    pub score: f64,
    /// Number of `(block, component)` groups with `σ_lr > 1e-12`.
    pub active_groups: usize,
    pub active_components: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// A loading group that was exactly zero at one grid point and non-zero at
/// the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reactivation {
    /// Index of the grid point at which the group came back.
    pub step: usize,
    pub block: usize,
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    /// Which blocks' λ varies along this chain: "all", "binary" or "quantitative".
    pub varied: String,
    pub grid: Vec<f64>,
    pub points: Vec<ChainPoint>,
    pub chosen: usize,
    pub reactivations: Vec<Reactivation>,
}

impl ChainTrace {
    pub fn chosen_lambda(&self) -> f64 {
        self.grid[self.chosen]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// One chain for single-type data, two for mixed data.
    pub chains: Vec<ChainTrace>,
    /// Per-block λ of the refitted model.
    pub selected_lambdas: Vec<f64>,
    pub refit_iterations: usize,
    pub refit_converged: bool,
    pub refit_objective: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub trace: SelectionTrace,
    pub refit: FitResult,
}

impl Selection {
    pub fn model(&self) -> &EscaModel {
        &self.refit.model
    }
}

fn active_groups(model: &EscaModel) -> usize {
    model.sigma_table().iter().filter(|&&s| s > ACTIVE_TOL).count()
}

/// Runs one warm-started chain. `lambdas_at(λ)` gives the per-block vector;
/// `governs[l]` marks the blocks whose CV error enters the score.
#[allow(clippy::too_many_arguments)]
fn run_chain(
    varied: &str,
    blocks: &[DataBlock],
    train: &[DataBlock],
    split: &HoldoutSplit,
    grid: &[f64],
    lambdas_at: impl Fn(f64) -> Vec<f64>,
    governs: &[bool],
    cfg: &SelectionConfig,
    start: Option<EscaModel>,
) -> Result<(ChainTrace, EscaModel)> {
    if grid.is_empty() {
        return Err(Error::contract("λ grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::contract("λ grid must be finite, non-negative and strictly ascending"));
    }
    let mut prev = start;
    let mut points = Vec::with_capacity(grid.len());
    let mut reactivations = Vec::new();
    let mut best: Option<(usize, f64, EscaModel)> = None;
    for (k, &lambda) in grid.iter().enumerate() {
        let lambdas = lambdas_at(lambda);
        let spec = PenaltySpec::new(cfg.family, lambdas.clone())?;
        let res = fit(train, &spec, &cfg.fit, prev.as_ref())
            .map_err(|e| Error::ChainFit { lambdas: lambdas.clone(), source: Box::new(e) })?;
        let cv = cv_error(&res.model, blocks, split)?;
        let score: f64 = cv.iter().zip(governs).filter(|(_, g)| **g).map(|(c, _)| c).sum();
        if let Some(p) = &prev {
            let before = p.sigma_table();
            for ((l, r), s) in res.sigma_table.indexed_iter() {
                if before[[l, r]] <= ACTIVE_TOL && *s > ACTIVE_TOL {
                    reactivations.push(Reactivation { step: k, block: l, component: r });
                }
            }
        }
        log::info!(
            "chain {varied}: λ = {lambda:.4} cv = {score:.6} active groups = {} ({} iterations)",
            active_groups(&res.model),
            res.iterations
        );
        points.push(ChainPoint {
            lambdas,
            cv_errors: cv,
            score,
            active_groups: active_groups(&res.model),
            active_components: res.model.active_components().len(),
            iterations: res.iterations,
            converged: res.converged,
        });
        if best.as_ref().map_or(true, |(_, s, _)| score < *s) {
            best = Some((k, score, res.model.clone()));
        }
        prev = Some(res.model);
    }
    let (chosen, _, model) = best.expect("non-empty grid");
    Ok((
        ChainTrace { varied: varied.to_string(), grid: grid.to_vec(), points, chosen, reactivations },
        model,
    ))
}

fn refit(
    blocks: &[DataBlock],
    lambdas: Vec<f64>,
    cfg: &SelectionConfig,
    start: &EscaModel,
    chains: Vec<ChainTrace>,
) -> Result<Selection> {
    let spec = PenaltySpec::new(cfg.family, lambdas.clone())?;
    let refit_cfg = FitConfig { epsilon_f: cfg.refit_epsilon, ..cfg.fit.clone() };
    let res = fit(blocks, &spec, &refit_cfg, Some(start))
        .map_err(|e| Error::ChainFit { lambdas: lambdas.clone(), source: Box::new(e) })?;
    Ok(Selection {
        trace: SelectionTrace {
            chains,
            selected_lambdas: lambdas,
            refit_iterations: res.iterations,
            refit_converged: res.converged,
            refit_objective: res.final_objective(),
        },
        refit: res,
    })
}

/// Selection for blocks that all share one family: a single λ for every
/// block, chosen by the summed CV error.
pub fn select_single_type(blocks: &[DataBlock], grid: &[f64], cfg: &SelectionConfig) -> Result<Selection> {
    let first = blocks.first().ok_or_else(|| Error::contract("at least one data block is required"))?;
    if blocks.iter().any(|b| b.dist().name() != first.dist().name()) {
        return Err(Error::contract("blocks of different families need select_mixed"));
    }
    let split = make_holdout(blocks, cfg.test_fraction, cfg.seed)?;
    let train = split.training_blocks(blocks)?;
    let n = blocks.len();
    let (chain, winner) =
        run_chain("all", blocks, &train, &split, grid, |l| vec![l; n], &vec![true; n], cfg, None)?;
    let lambdas = vec![chain.chosen_lambda(); n];
    refit(blocks, lambdas, cfg, &winner, vec![chain])
}

/// Two-stage selection for binary blocks mixed with quantitative ones.
///
/// Stage 1 pins the quantitative λ at the floor of `grid_quant` and chains
/// over `grid_binary`, scored on binary test cells. Stage 2 pins the chosen
/// binary λ and chains over `grid_quant`, warm-started from the stage-1
/// winner and scored on quantitative test cells.
pub fn select_mixed(
    blocks: &[DataBlock],
    grid_quant: &[f64],
    grid_binary: &[f64],
    cfg: &SelectionConfig,
) -> Result<Selection> {
    let binary: Vec<bool> = blocks.iter().map(|b| b.dist().is_bernoulli()).collect();
    if !binary.iter().any(|b| *b) {
        return Err(Error::contract("no binary block present, use select_single_type"));
    }
    if binary.iter().all(|b| *b) {
        return Err(Error::contract("no quantitative block present, use select_single_type"));
    }
    let floor = *grid_quant.first().ok_or_else(|| Error::contract("quantitative λ grid is empty"))?;
    let split = make_holdout(blocks, cfg.test_fraction, cfg.seed)?;
    let train = split.training_blocks(blocks)?;
    let quant: Vec<bool> = binary.iter().map(|b| !b).collect();

    let per_block = |lq: f64, lb: f64| -> Vec<f64> { binary.iter().map(|&b| if b { lb } else { lq }).collect() };
    let (stage1, winner1) =
        run_chain("binary", blocks, &train, &split, grid_binary, |lb| per_block(floor, lb), &binary, cfg, None)?;
    let lb = stage1.chosen_lambda();
    let (stage2, winner2) = run_chain(
        "quantitative",
        blocks,
        &train,
        &split,
        grid_quant,
        |lq| per_block(lq, lb),
        &quant,
        cfg,
        Some(winner1),
    )?;
    let lq = stage2.chosen_lambda();
    refit(blocks, per_block(lq, lb), cfg, &winner2, vec![stage1, stage2])
}
