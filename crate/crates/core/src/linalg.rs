//! Dense linear-algebra helpers shared by the solver, the simulator and the
//! dispersion estimator. Decompositions go through LAPACK.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::{Eigh, JobSvd, SVDDC, UPLO};

use crate::error::{Error, Result};

/// Thin SVD `m = U diag(s) Vᵀ` with `k = min(rows, cols)` columns in `U` and `V`.
/// Singular values are in descending order.
pub fn thin_svd(m: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (rows, cols) = m.dim();
    let k = rows.min(cols);
    if k == 0 {
        return Ok((Array2::zeros((rows, 0)), Array1::zeros(0), Array2::zeros((cols, 0))));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite entry passed to SVD".into()));
    }
    let (u, sv, vt) = m.to_owned().svddc(JobSvd::Some)?;
    let u = u.ok_or_else(|| Error::Linalg("SVD returned no left vectors".into()))?;
    let vt = vt.ok_or_else(|| Error::Linalg("SVD returned no right vectors".into()))?;
    Ok((u, sv, vt.t().to_owned()))
}

/// Top `r` eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn top_eigh(sym: ArrayView2<f64>, r: usize) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = sym.nrows();
    let r = r.min(n);
    let (vals, vecs) = sym.to_owned().eigh(UPLO::Upper)?;
    let mut out_vals = Array1::zeros(r);
    let mut out_vecs = Array2::zeros((n, r));
    for k in 0..r {
        let src = n - 1 - k;
        out_vals[k] = vals[src];
        out_vecs.column_mut(k).assign(&vecs.column(src));
    }
    Ok((out_vals, out_vecs))
}

/// Best rank-`r` approximation of `x` through the eigendecomposition of the
/// smaller Gram matrix. Returns `(scores, loadings)` with
/// `scores · loadingsᵀ` the reconstruction.
pub fn truncated_factors(x: ArrayView2<f64>, r: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (rows, cols) = x.dim();
    if r == 0 {
        return Ok((Array2::zeros((rows, 0)), Array2::zeros((cols, 0))));
    }
    if r > rows.min(cols) {
        return Err(Error::contract(format!(
            "rank {r} exceeds min dimension of {rows}x{cols} matrix"
        )));
    }
    if rows <= cols {
        let gram = x.dot(&x.t());
        let (_, u) = top_eigh(gram.view(), r)?;
        let loadings = x.t().dot(&u);
        Ok((u, loadings))
    } else {
        let gram = x.t().dot(&x);
        let (_, v) = top_eigh(gram.view(), r)?;
        let scores = x.dot(&v);
        Ok((scores, v))
    }
}

/// Largest singular value, via the top eigenvalue of the smaller Gram matrix.
pub fn largest_singular_value(x: ArrayView2<f64>) -> Result<f64> {
    let (rows, cols) = x.dim();
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let gram = if rows <= cols { x.dot(&x.t()) } else { x.t().dot(&x) };
    let (vals, _) = top_eigh(gram.view(), 1)?;
    Ok(vals[0].max(0.0).sqrt())
}

pub fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Column means over observed cells only. Columns with no observed cell get
/// mean 0 and are reported in the second return value.
pub fn masked_column_means(x: ArrayView2<f64>, mask: ArrayView2<f64>) -> (Array1<f64>, Vec<usize>) {
    let mut means = Array1::zeros(x.ncols());
    let mut empty = Vec::new();
    for j in 0..x.ncols() {
        let w = mask.column(j);
        let n = w.sum();
        if n > 0.0 {
            means[j] = x.column(j).dot(&w) / n;
        } else {
            empty.push(j);
        }
    }
    (means, empty)
}

pub fn center_columns(x: &mut Array2<f64>) {
    let means = column_means(x.view());
    *x -= &means.insert_axis(Axis(0));
}

pub fn frob_sq(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn frob_sq_masked(x: ArrayView2<f64>, mask: ArrayView2<f64>) -> f64 {
    x.iter().zip(mask.iter()).map(|(v, w)| w * v * v).sum()
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Orthonormal columns spanning `span(seeds)` after removing the constant
/// direction, completed from `fallback` candidates (and then the canonical
/// basis) until `want` columns are found.
///
/// Uses modified Gram-Schmidt with a second reorthogonalization pass.
/// Seeds are kept in order, so nearly-orthonormal centered input comes back
/// essentially unchanged.
pub fn centered_orthonormal_completion(
    seeds: ArrayView2<f64>,
    fallback: Option<ArrayView2<f64>>,
    want: usize,
) -> Result<Array2<f64>> {
    let n = seeds.nrows();
    if want + 1 > n {
        return Err(Error::contract(format!(
            "cannot build {want} centered orthonormal columns in dimension {n}"
        )));
    }
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(want + 1);
    basis.push(Array1::from_elem(n, 1.0 / (n as f64).sqrt()));

    let try_add = |cand: ArrayView1<f64>, basis: &mut Vec<Array1<f64>>| -> bool {
        let start = norm(cand);
        if start == 0.0 || !start.is_finite() {
            return false;
        }
        let mut v = cand.to_owned();
        for _ in 0..2 {
            for b in basis.iter() {
                let c = b.dot(&v);
                v.scaled_add(-c, b);
            }
        }
        let nv = norm(v.view());
        if nv <= 1e-8 * start {
            return false;
        }
        v /= nv;
        basis.push(v);
        true
    };

    for c in seeds.columns() {
        if basis.len() == want + 1 {
            break;
        }
        try_add(c, &mut basis);
    }
    if let Some(fb) = fallback {
        for c in fb.columns() {
            if basis.len() == want + 1 {
                break;
            }
            try_add(c, &mut basis);
        }
    }
    let mut e = Array1::zeros(n);
    for i in 0..n {
        if basis.len() == want + 1 {
            break;
        }
        e.fill(0.0);
        e[i] = 1.0;
        try_add(e.view(), &mut basis);
    }
    if basis.len() != want + 1 {
        return Err(Error::Linalg("orthonormal completion failed".into()));
    }
    let mut out = Array2::zeros((n, want));
    for (k, b) in basis.iter().skip(1).enumerate() {
        out.column_mut(k).assign(b);
    }
    Ok(out)
}

/// `‖QᵀQ − I‖_F` for a matrix with orthonormal columns.
pub fn orthonormality_defect(q: ArrayView2<f64>) -> f64 {
    let g = q.t().dot(&q);
    let mut d = 0.0;
    for ((i, j), v) in g.indexed_iter() {
        let t = if i == j { v - 1.0 } else { *v };
        d += t * t;
    }
    d.sqrt()
}

/// Largest absolute column sum, i.e. `‖1ᵀQ‖_∞`.
pub fn max_abs_column_sum(q: ArrayView2<f64>) -> f64 {
    q.sum_axis(Axis(0)).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Horizontal concatenation of blocks sharing a row count.
pub fn hstack(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    let rows = parts.first().map(|p| p.nrows()).unwrap_or(0);
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut off = 0;
    for p in parts {
        out.slice_mut(s![.., off..off + p.ncols()]).assign(p);
        off += p.ncols();
    }
    out
}

/// Vertical concatenation of blocks sharing a column count.
pub fn vstack(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    let cols = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut off = 0;
    for p in parts {
        out.slice_mut(s![off..off + p.nrows(), ..]).assign(p);
        off += p.nrows();
    }
    out
}
