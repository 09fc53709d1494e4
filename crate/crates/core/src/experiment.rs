//! The simulate → estimate dispersion → select → evaluate loop, repeated
//! over seeds and aggregated into recovery tables.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispersion::{estimate_dispersion, DispersionConfig};
use crate::error::{Error, Result};
use crate::evaluate::{recovery_report, summarize, RecoveryReport, RecoverySummary, DEFAULT_ZERO_TOL};
use crate::expfam::{DataBlock, Distribution};
use crate::selection::{
    default_binary_grid, default_gaussian_grid, select_mixed, select_single_type, Selection, SelectionConfig,
    SelectionTrace,
};
use crate::simulate::{simulate_blocks, SimulationSpec, TypeMix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Benchmark sizes and 10 repetitions.
    Paper,
    /// Benchmark sizes, 3 repetitions.
    Desk,
    /// `J = (200, 100, 50)`, 3 repetitions.
    Smoke,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            "smoke" => Ok(Scale::Smoke),
            other => Err(Error::Parse(format!("unknown scale '{other}' (expected paper, desk or smoke)"))),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        match self {
            Scale::Paper | Scale::Desk => vec![1000, 500, 100],
            Scale::Smoke => vec![200, 100, 50],
        }
    }

    /// Rejection factor of the simulator. The rule is calibrated for the
    /// benchmark sizes and is often unattainable at smoke sizes.
    pub fn rejection(&self) -> f64 {
        match self {
            Scale::Paper | Scale::Desk => 2.0,
            Scale::Smoke => 0.0,
        }
    }

    pub fn default_seeds(&self) -> usize {
        match self {
            Scale::Paper => 10,
            Scale::Desk | Scale::Smoke => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mix: TypeMix,
    /// Benchmark case, 1 to 7.
    pub case: usize,
    pub n_rows: usize,
    pub block_sizes: Vec<usize>,
    /// See [`SimulationSpec::rejection`].
    pub rejection: f64,
    pub seeds: Vec<u64>,
    /// Estimate Gaussian dispersions before selection instead of using the
    /// simulated values.
    pub estimate_alpha: bool,
    pub dispersion: DispersionConfig,
    pub selection: SelectionConfig,
    pub grid_quant: Vec<f64>,
    pub grid_binary: Vec<f64>,
}

impl ExperimentConfig {
    pub fn new(mix: TypeMix, case: usize, scale: Scale, n_seeds: Option<usize>) -> Self {
        let n = n_seeds.unwrap_or_else(|| scale.default_seeds());
        ExperimentConfig {
            mix,
            case,
            n_rows: mix.benchmark_rows(),
            block_sizes: scale.block_sizes(),
            rejection: scale.rejection(),
            seeds: (0..n as u64).collect(),
            estimate_alpha: true,
            dispersion: DispersionConfig::default(),
            selection: SelectionConfig::default(),
            grid_quant: default_gaussian_grid(),
            grid_binary: default_binary_grid(),
        }
    }

    pub fn simulation_spec(&self, seed: u64) -> Result<SimulationSpec> {
        let mut spec = SimulationSpec::case_with_sizes(self.mix, self.case, self.n_rows, self.block_sizes.clone(), seed)?;
        spec.rejection = self.rejection;
        Ok(spec)
    }
}

/// Replaces each Gaussian block's dispersion by its estimate. Returns the
/// estimates in block order, `None` for non-Gaussian blocks.
pub fn plug_in_dispersions(
    blocks: &[DataBlock],
    cfg: &DispersionConfig,
    seed: u64,
) -> Result<(Vec<DataBlock>, Vec<Option<f64>>)> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut alphas = Vec::with_capacity(blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        if b.dist().is_gaussian() {
            let est = estimate_dispersion(b.values(), b.mask(), cfg, seed.wrapping_add(l as u64))?;
            if !(est.alpha > 0.0) {
                return Err(Error::Estimation(format!("block {l}: estimated dispersion {} is not positive", est.alpha)));
            }
            out.push(b.with_dist(Distribution::gaussian(est.alpha)?)?);
            alphas.push(Some(est.alpha));
        } else {
            out.push(b.clone());
            alphas.push(None);
        }
    }
    Ok((out, alphas))
}

/// Single-type or two-stage selection depending on the block families.
pub fn select(blocks: &[DataBlock], grid_quant: &[f64], grid_binary: &[f64], cfg: &SelectionConfig) -> Result<Selection> {
    let n_binary = blocks.iter().filter(|b| b.dist().is_bernoulli()).count();
    if n_binary == 0 {
        select_single_type(blocks, grid_quant, cfg)
    } else if n_binary == blocks.len() {
        select_single_type(blocks, grid_binary, cfg)
    } else {
        select_mixed(blocks, grid_quant, grid_binary, cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub simulation_attempts: usize,
    pub alpha_hat: Vec<Option<f64>>,
    pub selection: SelectionTrace,
    pub report: RecoveryReport,
    pub seconds: f64,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let start = Instant::now();
    let spec = cfg.simulation_spec(seed)?;
    let (blocks, truth) = simulate_blocks(&spec)?;
    let (blocks, alpha_hat) = if cfg.estimate_alpha {
        plug_in_dispersions(&blocks, &cfg.dispersion, seed)?
    } else {
        (blocks, vec![None; spec.block_types.len()])
    };
    let sel_cfg = SelectionConfig { seed, ..cfg.selection.clone() };
    let selection = select(&blocks, &cfg.grid_quant, &cfg.grid_binary, &sel_cfg)?;
    let report = recovery_report(selection.model(), &truth, DEFAULT_ZERO_TOL)?;
    log::info!("seed {seed}: rmse(theta) = {:.4} in {:.1}s", report.rmse_theta, start.elapsed().as_secs_f64());
    Ok(SeedOutcome {
        seed,
        simulation_attempts: truth.attempts,
        alpha_hat,
        selection: selection.trace,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct Reproduction {
    pub config: ExperimentConfig,
    pub outcomes: Vec<SeedOutcome>,
    pub failures: Vec<SeedFailure>,
    pub summary: RecoverySummary,
}

/// Runs every seed in parallel. Failed seeds are recorded and excluded from
/// the summary.
pub fn reproduce(cfg: &ExperimentConfig) -> Reproduction {
    let results: Vec<(u64, Result<SeedOutcome>)> =
        cfg.seeds.par_iter().map(|&seed| (seed, run_seed(cfg, seed))).collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(SeedFailure { seed, error: e.to_string() }),
        }
    }
    let reports: Vec<RecoveryReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    Reproduction { config: cfg.clone(), outcomes, failures, summary: summarize(&reports) }
}
