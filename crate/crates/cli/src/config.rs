//! Project configuration: which CSV blocks to load and how to fit them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pesca::dispersion::DispersionConfig;
use pesca::expfam::{DataBlock, Distribution};
use pesca::io::read_block;
use pesca::penalty::PenaltyFamily;
use pesca::selection::{default_binary_grid, default_gaussian_grid, lambda_grid};
use pesca::solver::FitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// A fixed dispersion, or the keyword `"estimate"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DispersionSetting {
    Value(f64),
    Keyword(String),
}

impl Default for DispersionSetting {
    fn default() -> Self {
        DispersionSetting::Keyword("estimate".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    #[serde(rename = "type")]
    pub kind: BlockKind,
    #[serde(default)]
    pub dispersion: DispersionSetting,
}

/// `[lo, hi, n]`: `n` log-spaced points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec(pub f64, pub f64, pub usize);

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("grid must look like lo:hi:n, got '{s}'");
        }
        Ok(GridSpec(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(lambda_grid(self.0, self.1, self.2)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub test_fraction: f64,
    pub seed: u64,
    pub refit_epsilon: f64,
    pub grid_quant: Option<GridSpec>,
    pub grid_binary: Option<GridSpec>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings { test_fraction: 0.1, seed: 0, refit_epsilon: 1e-8, grid_quant: None, grid_binary: None }
    }
}

impl SelectionSettings {
    pub fn grid_quant(&self) -> Result<Vec<f64>> {
        self.grid_quant.map_or_else(|| Ok(default_gaussian_grid()), |g| g.values())
    }

    pub fn grid_binary(&self) -> Result<Vec<f64>> {
        self.grid_binary.map_or_else(|| Ok(default_binary_grid()), |g| g.values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub penalty: PenaltyFamily,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub selection: SelectionSettings,
    #[serde(default)]
    pub dispersion: DispersionConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Directory that relative block paths are resolved against. Set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: ProjectConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn block_path(&self, l: usize) -> PathBuf {
        let p = &self.blocks[l].path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            bail!("config lists no blocks");
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let path = self.block_path(l);
            if !path.is_file() {
                bail!("block {}: file {} does not exist", l + 1, path.display());
            }
            match (&b.dispersion, b.kind) {
                (DispersionSetting::Keyword(k), _) if k != "estimate" => {
                    bail!("block {}: dispersion must be a number or \"estimate\", got \"{k}\"", l + 1)
                }
                (DispersionSetting::Value(a), BlockKind::Gaussian) if !(*a > 0.0 && a.is_finite()) => {
                    bail!("block {}: dispersion must be positive, got {a}", l + 1)
                }
                _ => {}
            }
        }
        self.penalty.validate()?;
        self.fit.validate()?;
        Ok(())
    }

    pub fn needs_estimate(&self, l: usize) -> bool {
        self.blocks[l].kind == BlockKind::Gaussian && matches!(self.blocks[l].dispersion, DispersionSetting::Keyword(_))
    }

    /// Loads every block. Gaussian blocks marked `"estimate"` get a
    /// placeholder dispersion of 1 until [`crate::commands`] replaces it.
    pub fn load_blocks(&self) -> Result<Vec<DataBlock>> {
        (0..self.blocks.len())
            .map(|l| {
                let dist = match (self.blocks[l].kind, &self.blocks[l].dispersion) {
                    (BlockKind::Gaussian, DispersionSetting::Value(a)) => Distribution::gaussian(*a)?,
                    (BlockKind::Gaussian, _) => Distribution::Gaussian { alpha: 1.0 },
                    (BlockKind::Bernoulli, _) => Distribution::Bernoulli,
                    (BlockKind::Poisson, _) => Distribution::Poisson,
                };
                let path = self.block_path(l);
                read_block(&path, dist).with_context(|| format!("loading block {} from {}", l + 1, path.display()))
            })
            .collect()
    }
}
