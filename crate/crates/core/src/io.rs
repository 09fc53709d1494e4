//! File formats: headerless CSV matrices (empty field = missing), model
//! bundles and simulation-truth bundles.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{DataBlock, Distribution};
use crate::penalty::{PenaltyFamily, PenaltySpec};
use crate::simulate::{SimulationSpec, SimulationTruth, TrueStructure};
use crate::solver::EscaModel;

fn parse_cell(field: &str, row: usize, col: usize) -> Result<f64> {
    let t = field.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {}, column {}: '{t}' is not a number", row + 1, col + 1)))
}

/// Reads a headerless CSV matrix. Empty, `NA` and `NaN` fields become NaN.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Parse(format!("{}: row {} has {} fields, expected {c}", path.display(), i + 1, rec.len())))
            }
            _ => {}
        }
        for (j, f) in rec.iter().enumerate() {
            data.push(parse_cell(f, i, j)?);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes NaN as an empty field. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    if m.ncols() == 0 {
        fs::write(path, "")?;
        return Ok(());
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() > 1 && m.nrows() > 1 {
        return Err(Error::Parse(format!("{}: expected a single row or column", path.display())));
    }
    Ok(Array1::from_iter(m.iter().copied()))
}

pub fn write_vector(path: &Path, v: &Array1<f64>) -> Result<()> {
    write_matrix(path, &v.view().insert_axis(ndarray::Axis(1)).to_owned())
}

pub fn read_block(path: &Path, dist: Distribution) -> Result<DataBlock> {
    DataBlock::from_nan_coded(read_matrix(path)?, dist)
}

pub fn write_block(path: &Path, block: &DataBlock) -> Result<()> {
    write_matrix(path, &block.nan_coded())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Everything besides the parameters needed to rebuild the model's
/// objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub block_types: Vec<Distribution>,
    pub family: PenaltyFamily,
    pub lambdas: Vec<f64>,
    pub n_rows: usize,
    pub n_components: usize,
    pub seed: u64,
}

impl BundleMeta {
    pub fn penalty(&self) -> Result<PenaltySpec> {
        PenaltySpec::new(self.family, self.lambdas.clone())
    }
}

/// Writes `mu_l.csv`, `A.csv`, `B_l.csv` (blocks numbered from 1) and
/// `meta.json` into `dir`.
pub fn write_model_bundle(dir: &Path, model: &EscaModel, meta: &BundleMeta) -> Result<()> {
    if meta.block_types.len() != model.n_blocks() {
        return Err(Error::contract("bundle metadata and model disagree on the block count"));
    }
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("A.csv"), &model.scores().to_owned())?;
    for l in 0..model.n_blocks() {
        write_vector(&dir.join(format!("mu_{}.csv", l + 1)), &model.offset(l).to_owned())?;
        write_matrix(&dir.join(format!("B_{}.csv", l + 1)), &model.loading(l).to_owned())?;
    }
    write_json(&dir.join("meta.json"), meta)
}

fn read_columns(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    // A zero-column matrix is stored as an empty file.
    if cols == 0 {
        return Ok(Array2::zeros((rows, 0)));
    }
    let m = read_matrix(path)?;
    if m.dim() != (rows, cols) {
        return Err(Error::Parse(format!("{}: expected {rows}x{cols}, found {:?}", path.display(), m.dim())));
    }
    Ok(m)
}

pub fn read_model_bundle(dir: &Path) -> Result<(EscaModel, BundleMeta)> {
    let meta: BundleMeta = read_json(&dir.join("meta.json"))?;
    let mut offsets = Vec::new();
    for l in 0..meta.block_types.len() {
        offsets.push(read_vector(&dir.join(format!("mu_{}.csv", l + 1)))?);
    }
    let scores = read_columns(&dir.join("A.csv"), meta.n_rows, meta.n_components)?;
    let mut loadings = Vec::new();
    for (l, mu) in offsets.iter().enumerate() {
        loadings.push(read_columns(&dir.join(format!("B_{}.csv", l + 1)), mu.len(), meta.n_components)?);
    }
    Ok((EscaModel::new(offsets, scores, loadings)?, meta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthMeta {
    spec: SimulationSpec,
    structures: Vec<TrueStructure>,
    d: Vec<f64>,
    c: Vec<f64>,
    attempts: usize,
    cross_coherence: f64,
}

/// Writes `truth.json` plus `U.csv`, `V.csv`, `mu_l.csv` and `E_l.csv`.
pub fn write_truth_bundle(dir: &Path, spec: &SimulationSpec, truth: &SimulationTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("U.csv"), &truth.scores)?;
    write_matrix(&dir.join("V.csv"), &truth.loadings)?;
    for l in 0..truth.block_sizes.len() {
        write_vector(&dir.join(format!("mu_{}.csv", l + 1)), &truth.offsets[l])?;
        write_matrix(&dir.join(format!("E_{}.csv", l + 1)), &truth.noise[l])?;
    }
    let meta = TruthMeta {
        spec: spec.clone(),
        structures: truth.structures.clone(),
        d: truth.d.to_vec(),
        c: truth.c.to_vec(),
        attempts: truth.attempts,
        cross_coherence: truth.cross_coherence,
    };
    write_json(&dir.join("truth.json"), &meta)
}

pub fn read_truth_bundle(dir: &Path) -> Result<(SimulationSpec, SimulationTruth)> {
    let meta: TruthMeta = read_json(&dir.join("truth.json"))?;
    let spec = meta.spec;
    let r = meta.d.len();
    let total: usize = spec.block_sizes.iter().sum();
    let scores = read_columns(&dir.join("U.csv"), spec.n_rows, r)?;
    let loadings = read_columns(&dir.join("V.csv"), total, r)?;
    let mut offsets = Vec::new();
    let mut noise = Vec::new();
    for (l, &j) in spec.block_sizes.iter().enumerate() {
        offsets.push(read_vector(&dir.join(format!("mu_{}.csv", l + 1)))?);
        noise.push(read_columns(&dir.join(format!("E_{}.csv", l + 1)), spec.n_rows, j)?);
    }
    let mut truth = SimulationTruth {
        scores,
        d: Array1::from(meta.d),
        c: Array1::from(meta.c),
        loadings,
        offsets,
        thetas: Vec::new(),
        noise,
        structures: meta.structures,
        block_sizes: spec.block_sizes.clone(),
        block_types: spec.block_types.clone(),
        attempts: meta.attempts,
        cross_coherence: meta.cross_coherence,
    };
    truth.thetas = (0..spec.block_sizes.len()).map(|l| truth.compute_theta(l)).collect();
    Ok((spec, truth))
}
