//! Hessian-weighted SVD and the quantization-aware factor split.
//!
//! For `W` (`n_out x n_in`) and positive row weights `Q`, the SVD
//! `U Σ Vᵀ = diag(Q) W` is split as `A = diag(Q)⁻¹ U`, `B = Σ Vᵀ`. The row
//! scaling `diag(Q)⁻¹` only rescales output channels of `A`, which a
//! per-channel quantizer absorbs into its scales.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `n_out x r_max`
    pub a: DMatrix<f64>,
    /// `r_max x n_in`
    pub b: DMatrix<f64>,
    /// Singular values of `diag(Q) W`, non-increasing.
    pub singular_values: DVector<f64>,
}

impl Decomposition {
    pub fn max_rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `(A^(r), B^(r))`: the leading `r` columns of `A` and rows of `B`.
    pub fn truncate(&self, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if r == 0 || r > self.max_rank() {
            return Err(Error::IndexOutOfRange {
                index: r,
                len: self.max_rank(),
            });
        }
        Ok((
            self.a.columns(0, r).into_owned(),
            self.b.rows(0, r).into_owned(),
        ))
    }

    pub fn reconstruct(&self, r: usize) -> Result<DMatrix<f64>> {
        let (a, b) = self.truncate(r)?;
        Ok(a * b)
    }
}

/// Dense SVD `m = U diag(σ) Vᵀ` with σ sorted non-increasing and a
/// deterministic sign per singular pair: the largest-magnitude entry of each
/// column of `U` is positive (first such entry on ties).
pub fn svd_sorted(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().map_err(|_| Error::SvdNoConvergence)?;
    let k = rows.min(cols);
    let (fu, fs, fv) = (svd.U(), svd.S(), svd.V());
    let mut u = DMatrix::from_fn(rows, k, |i, j| fu[(i, j)]);
    let mut v_t = DMatrix::from_fn(k, cols, |i, j| fv[(j, i)]);
    let sigma = DVector::from_fn(k, |i, _| fs[i]);
    if sigma.iter().chain(u.iter()).chain(v_t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SvdNoConvergence);
    }

    // Enforce descending order with a stable sort.
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    if order.iter().enumerate().any(|(i, &k)| i != k) {
        u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
        v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |k, j| v_t[(order[k], j)]);
    }
    let sigma = DVector::from_iterator(order.len(), order.iter().map(|&k| sigma[k]));

    for k in 0..sigma.len() {
        let mut pivot = 0;
        for i in 1..u.nrows() {
            if u[(i, k)].abs() > u[(pivot, k)].abs() {
                pivot = i;
            }
        }
        if u[(pivot, k)] < 0.0 {
            u.column_mut(k).neg_mut();
            v_t.row_mut(k).neg_mut();
        }
    }
    Ok((u, sigma, v_t))
}

/// Hessian-weighted decomposition of `w` with positive row weights `q`.
pub fn hessian_weighted_decompose(w: &DMatrix<f64>, q: &DVector<f64>) -> Result<Decomposition> {
    if q.len() != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "row weights of length {} for {} rows",
            q.len(),
            w.nrows()
        )));
    }
    if q.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Numerical("row weights must be strictly positive".into()));
    }
    let mut weighted = w.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= q[i];
    }
    let (mut u, sigma, mut v_t) = svd_sorted(&weighted)?;
    for (i, mut row) in u.row_iter_mut().enumerate() {
        row /= q[i];
    }
    for (k, mut row) in v_t.row_iter_mut().enumerate() {
        row *= sigma[k];
    }
    Ok(Decomposition {
        a: u,
        b: v_t,
        singular_values: sigma,
    })
}
