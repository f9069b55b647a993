//! Per-channel uniform affine quantization, the rectified-sigmoid soft
//! quantizer, and percentile-grid parameter searches.
//!
//! Every matrix is quantized row by row: row `i` has its own scale `s_i` and
//! zero point `z_i`, and a value `m` maps to
//! `s_i * (clip(round(m / s_i) + z_i, 0, 2^b - 1) - z_i)`.
//! Rounding is half-away-from-zero.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every scale.
pub const SCALE_EPS: f64 = 1e-12;
/// Stretch parameters of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

pub const DEFAULT_BITS: [u8; 5] = [2, 3, 4, 6, 8];
pub const DEFAULT_PERCENTILES: [f64; 10] = [
    0.97, 0.98, 0.99, 0.995, 0.9995, 0.9997, 0.9999, 0.99995, 0.99999, 1.0,
];

/// Sorted, deduplicated set of candidate bit-widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitSet(Vec<u8>);

impl BitSet {
    pub fn new(mut bits: Vec<u8>) -> Result<Self> {
        bits.sort_unstable();
        bits.dedup();
        if bits.is_empty() {
            return Err(Error::InvalidConfig("bit set is empty".into()));
        }
        if let Some(&b) = bits.iter().find(|&&b| !(2..=16).contains(&b)) {
            return Err(Error::InvalidConfig(format!(
                "bit-width {b} outside the supported range 2..=16"
            )));
        }
        Ok(BitSet(bits))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u8 {
        self.0[0]
    }

    pub fn max(&self) -> u8 {
        *self.0.last().unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }
}

impl Default for BitSet {
    fn default() -> Self {
        BitSet(DEFAULT_BITS.to_vec())
    }
}

impl TryFrom<Vec<u8>> for BitSet {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        BitSet::new(v)
    }
}

impl From<BitSet> for Vec<u8> {
    fn from(b: BitSet) -> Self {
        b.0
    }
}

impl FromStr for BitSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::InvalidConfig(format!("bad bit-width `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        BitSet::new(bits)
    }
}

impl fmt::Display for BitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Clipping percentiles evaluated by the parameter searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PercentileGrid(Vec<f64>);

impl PercentileGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("percentile grid is empty".into()));
        }
        if let Some(p) = points.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidConfig(format!("percentile {p} outside (0, 1]")));
        }
        Ok(PercentileGrid(points))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }
}

impl Default for PercentileGrid {
    fn default() -> Self {
        PercentileGrid(DEFAULT_PERCENTILES.to_vec())
    }
}

impl TryFrom<Vec<f64>> for PercentileGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        PercentileGrid::new(v)
    }
}

impl From<PercentileGrid> for Vec<f64> {
    fn from(g: PercentileGrid) -> Self {
        g.0
    }
}

/// Per-row scales and zero points for one bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(scales: Vec<f64>, zero_points: Vec<i32>, bits: u8) -> Result<Self> {
        if scales.len() != zero_points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        let qmax = max_code(bits);
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("scales must be positive and finite".into()));
        }
        if zero_points.iter().any(|&z| z < 0 || z > qmax) {
            return Err(Error::InvalidConfig(format!("zero point outside [0, {qmax}]")));
        }
        Ok(QuantParams {
            scales,
            zero_points,
            bits,
        })
    }

    /// Same scale and zero point for every one of `rows` rows.
    pub fn uniform(rows: usize, scale: f64, zero_point: i32, bits: u8) -> Result<Self> {
        QuantParams::new(vec![scale; rows], vec![zero_point; rows], bits)
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    pub fn qmax(&self) -> i32 {
        max_code(self.bits)
    }

    /// Parameters of the first `rows` rows.
    pub fn truncated(&self, rows: usize) -> QuantParams {
        QuantParams {
            scales: self.scales[..rows].to_vec(),
            zero_points: self.zero_points[..rows].to_vec(),
            bits: self.bits,
        }
    }
}

pub fn max_code(bits: u8) -> i32 {
    (1i32 << bits) - 1
}

#[inline]
fn quantize_value(x: f64, scale: f64, zero: i32, qmax: i32) -> f64 {
    let code = ((x / scale).round() + zero as f64).clamp(0.0, qmax as f64);
    scale * (code - zero as f64)
}

#[inline]
fn code_of(x: f64, scale: f64, zero: i32, qmax: i32) -> i32 {
    ((x / scale).round() + zero as f64).clamp(0.0, qmax as f64) as i32
}

fn check_rows(m: &DMatrix<f64>, params: &QuantParams) {
    assert_eq!(
        m.nrows(),
        params.rows(),
        "quantization parameters have {} rows, matrix has {}",
        params.rows(),
        m.nrows()
    );
}

/// Fake-quantizes `m` with per-row parameters (nearest rounding).
pub fn quantize_uniform(m: &DMatrix<f64>, params: &QuantParams) -> DMatrix<f64> {
    check_rows(m, params);
    let qmax = params.qmax();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        quantize_value(m[(i, j)], params.scales[i], params.zero_points[i], qmax)
    })
}

/// Integer codes of `m` under nearest rounding.
pub fn quantize_codes(m: &DMatrix<f64>, params: &QuantParams) -> DMatrix<i32> {
    check_rows(m, params);
    let qmax = params.qmax();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        code_of(m[(i, j)], params.scales[i], params.zero_points[i], qmax)
    })
}

/// Integer codes together with the parameters that dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub codes: DMatrix<i32>,
    pub params: QuantParams,
}

impl QuantizedMatrix {
    pub fn nearest(m: &DMatrix<f64>, params: &QuantParams) -> Self {
        QuantizedMatrix {
            codes: quantize_codes(m, params),
            params: params.clone(),
        }
    }

    pub fn dequantize(&self) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_fn(self.codes.nrows(), self.codes.ncols(), |i, j| {
            p.scales[i] * (self.codes[(i, j)] - p.zero_points[i]) as f64
        })
    }

    pub fn memory_bits(&self) -> u64 {
        self.codes.len() as u64 * self.params.bits as u64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rectified sigmoid `h(v) = clip(σ(v)(ζ - γ) + γ, 0, 1)`.
pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of `h`; zero where the clip is active.
pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let inner = s * (ZETA - GAMMA) + GAMMA;
    if inner > 0.0 && inner < 1.0 {
        s * (1.0 - s) * (ZETA - GAMMA)
    } else {
        0.0
    }
}

/// Rounding regularizer `Σ 1 - |2h(v) - 1|^β`.
pub fn rounding_regularizer(v: &DMatrix<f64>, beta: f64) -> f64 {
    v.iter()
        .map(|&x| 1.0 - (2.0 * rectified_sigmoid(x) - 1.0).abs().powf(beta))
        .sum()
}

/// Soft quantizer: rounds down and adds the learnable offset `h(V)`.
/// Returns the soft-quantized matrix and the regularizer value at `beta`.
pub fn soft_quantize(
    m: &DMatrix<f64>,
    v: &DMatrix<f64>,
    params: &QuantParams,
    beta: f64,
) -> (DMatrix<f64>, f64) {
    check_rows(m, params);
    assert_eq!(m.shape(), v.shape(), "rounding variables must match the matrix");
    let qmax = params.qmax() as f64;
    let out = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let s = params.scales[i];
        let z = params.zero_points[i] as f64;
        let u = ((m[(i, j)] / s).floor() + rectified_sigmoid(v[(i, j)]) + z).clamp(0.0, qmax);
        s * (u - z)
    });
    (out, rounding_regularizer(v, beta))
}

/// Sorted finite values of each row.
fn sorted_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| {
            let mut v: Vec<f64> = r.iter().copied().filter(|x| x.is_finite()).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect()
}

/// Clipping range at percentile `p` from already-sorted values: the upper end
/// is the order statistic at `⌈p n⌉ - 1`, the lower end its mirror at
/// `n - ⌈p n⌉`.
fn percentile_range(sorted: &[f64], p: f64) -> (f64, f64) {
    let n = sorted.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    // The small slack keeps e.g. 0.99 * 1000 from rounding up to 991.
    let k = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    (sorted[n - k], sorted[k - 1])
}

fn params_from_range(lo: f64, hi: f64, bits: u8) -> (f64, i32) {
    // The grid always contains zero.
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let qmax = max_code(bits);
    let scale = ((hi - lo) / qmax as f64).max(SCALE_EPS);
    let zero = (-lo / scale).round().clamp(0.0, qmax as f64) as i32;
    (scale, zero)
}

/// Scale and zero point for a single row at percentile `p`.
pub fn percentile_row_params(row: &[f64], p: f64, bits: u8) -> (f64, i32) {
    let mut sorted: Vec<f64> = row.iter().copied().filter(|x| x.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_range(&sorted, p);
    params_from_range(lo, hi, bits)
}

/// Per-row parameters of `m` at percentile `p`.
pub fn percentile_params(m: &DMatrix<f64>, p: f64, bits: u8) -> QuantParams {
    params_from_sorted(&sorted_rows(m), p, bits)
}

fn params_from_sorted(sorted: &[Vec<f64>], p: f64, bits: u8) -> QuantParams {
    let (scales, zero_points) = sorted
        .iter()
        .map(|row| {
            let (lo, hi) = percentile_range(row, p);
            params_from_range(lo, hi, bits)
        })
        .unzip();
    QuantParams {
        scales,
        zero_points,
        bits,
    }
}

/// Outcome of a per-row grid search.
#[derive(Debug, Clone)]
pub struct ParamSearch {
    pub params: QuantParams,
    /// Index into the percentile grid chosen for each row.
    pub grid_index: Vec<usize>,
    /// Objective contribution of each row at its chosen grid point.
    pub row_objective: Vec<f64>,
}

impl ParamSearch {
    pub fn objective(&self) -> f64 {
        self.row_objective.iter().sum()
    }
}

/// Evaluates every grid point on all rows of `m` and keeps the per-row
/// minimizer. `row_errors` maps a fake-quantized matrix to per-row objective
/// values. Ties go to the larger percentile.
pub fn grid_search_rows<F>(
    m: &DMatrix<f64>,
    bits: u8,
    grid: &PercentileGrid,
    row_errors: F,
) -> ParamSearch
where
    F: Fn(&DMatrix<f64>) -> Vec<f64>,
{
    let sorted = sorted_rows(m);
    let rows = m.nrows();
    let mut best_err = vec![f64::INFINITY; rows];
    let mut best_idx = vec![usize::MAX; rows];
    let mut best = QuantParams {
        scales: vec![1.0; rows],
        zero_points: vec![0; rows],
        bits,
    };
    for (k, &p) in grid.points().iter().enumerate() {
        let params = params_from_sorted(&sorted, p, bits);
        let errs = row_errors(&quantize_uniform(m, &params));
        for i in 0..rows {
            let better = errs[i] < best_err[i]
                || (errs[i] == best_err[i]
                    && (best_idx[i] == usize::MAX || p > grid.points()[best_idx[i]]));
            if better {
                best_err[i] = errs[i];
                best_idx[i] = k;
                best.scales[i] = params.scales[i];
                best.zero_points[i] = params.zero_points[i];
            }
        }
    }
    ParamSearch {
        params: best,
        grid_index: best_idx,
        row_objective: best_err,
    }
}

/// Row sums of `weights ⊙ (a - b)²`.
pub fn weighted_row_errors(a: &DMatrix<f64>, b: &DMatrix<f64>, weights: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        for (i, acc) in out.iter_mut().enumerate() {
            let d = a[(i, j)] - b[(i, j)];
            *acc += weights[(i, j)] * d * d;
        }
    }
    out
}

/// Row sums of `(a - b)²`.
pub fn row_errors(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        for (i, acc) in out.iter_mut().enumerate() {
            let d = a[(i, j)] - b[(i, j)];
            *acc += d * d;
        }
    }
    out
}

/// Hessian-MSE search for a dense weight: minimizes `‖C ⊙ (W - Q(W))‖²`.
pub fn search_params_hmse(
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    bits: u8,
    grid: &PercentileGrid,
) -> ParamSearch {
    assert_eq!(w.shape(), c.shape(), "Hessian weights must match W");
    let c_sq = c.map(|v| v * v);
    grid_search_rows(w, bits, grid, |q| weighted_row_errors(w, q, &c_sq))
}

/// Search for the left factor: minimizes `‖C ⊙ (A B - Q(A) B)‖²` at full rank.
pub fn search_params_a(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    bits: u8,
    grid: &PercentileGrid,
) -> ParamSearch {
    assert_eq!(a.ncols(), b.nrows(), "factor inner dimensions differ");
    assert_eq!((a.nrows(), b.ncols()), c.shape(), "Hessian weights must match A B");
    let w = a * b;
    let c_sq = c.map(|v| v * v);
    grid_search_rows(a, bits, grid, |qa| weighted_row_errors(&w, &(qa * b), &c_sq))
}

/// Search for the right factor: plain per-row MSE `‖B - Q(B)‖²`.
pub fn search_params_b(b: &DMatrix<f64>, bits: u8, grid: &PercentileGrid) -> ParamSearch {
    grid_search_rows(b, bits, grid, |qb| row_errors(b, qb))
}
