//! Per-layer candidate enumeration and Pareto filtering.
//!
//! A layer can be stored either as a per-channel quantized dense weight or as
//! a quantized low-rank pair `Ã^(r) B̃^(r)`. Each option is scored by its
//! Hessian-weighted local loss `‖C ⊙ (W - W̃)‖²_F` and its memory footprint in
//! bits; only options on the (loss, memory) Pareto front survive.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::Decomposition;
use crate::netsim::HessianWeights;
use crate::quantizer::{
    quantize_uniform, search_params_a, search_params_b, search_params_hmse, BitSet, PercentileGrid,
    QuantParams, QuantizedMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateKind {
    QuantOnly { bits: u8 },
    LowRank { rank: usize, bits_a: u8, bits_b: u8 },
}

impl CandidateKind {
    pub fn rank(&self) -> Option<usize> {
        match self {
            CandidateKind::QuantOnly { .. } => None,
            CandidateKind::LowRank { rank, .. } => Some(*rank),
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self, CandidateKind::LowRank { .. })
    }

    /// Deterministic tie-break order among candidates with identical loss and
    /// memory: smaller rank, then smaller first bit-width, quant-only first.
    fn tie_key(&self) -> (usize, u8, u8, u8) {
        match *self {
            CandidateKind::QuantOnly { bits } => (0, bits, 0, 0),
            CandidateKind::LowRank {
                rank,
                bits_a,
                bits_b,
            } => (rank, bits_a, 1, bits_b),
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateKind::QuantOnly { bits } => write!(f, "quant(b={bits})"),
            CandidateKind::LowRank {
                rank,
                bits_a,
                bits_b,
            } => write!(f, "lowrank(r={rank}, bA={bits_a}, bB={bits_b})"),
        }
    }
}

/// Memory of a compressed weight in bits.
pub fn memory_footprint(kind: CandidateKind, n_out: usize, n_in: usize) -> u64 {
    match kind {
        CandidateKind::QuantOnly { bits } => (n_out * n_in) as u64 * bits as u64,
        CandidateKind::LowRank {
            rank,
            bits_a,
            bits_b,
        } => rank as u64 * (n_out as u64 * bits_a as u64 + n_in as u64 * bits_b as u64),
    }
}

/// Size of the full joint search space of one layer: `|B| (1 + |B| r_max)`.
pub fn joint_candidate_count(n_bits: usize, max_rank: usize) -> usize {
    n_bits * (1 + n_bits * max_rank)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateParams {
    QuantOnly(Arc<QuantParams>),
    /// Parameters of the full-rank factors; rank `r` uses all rows of `a`
    /// and the first `r` rows of `b`.
    LowRank {
        a: Arc<QuantParams>,
        b: Arc<QuantParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub layer_index: usize,
    pub kind: CandidateKind,
    pub params: CandidateParams,
    pub local_loss: f64,
    pub memory_bits: u64,
}

/// A compressed weight stored as integer codes.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedWeight {
    Dense(QuantizedMatrix),
    Factored {
        a: QuantizedMatrix,
        b: QuantizedMatrix,
    },
}

impl CompressedWeight {
    pub fn dequantize(&self) -> DMatrix<f64> {
        match self {
            CompressedWeight::Dense(w) => w.dequantize(),
            CompressedWeight::Factored { a, b } => a.dequantize() * b.dequantize(),
        }
    }

    pub fn memory_bits(&self) -> u64 {
        match self {
            CompressedWeight::Dense(w) => w.memory_bits(),
            CompressedWeight::Factored { a, b } => a.memory_bits() + b.memory_bits(),
        }
    }

    pub fn kind(&self) -> CandidateKind {
        match self {
            CompressedWeight::Dense(w) => CandidateKind::QuantOnly {
                bits: w.params.bits,
            },
            CompressedWeight::Factored { a, b } => CandidateKind::LowRank {
                rank: a.codes.ncols(),
                bits_a: a.params.bits,
                bits_b: b.params.bits,
            },
        }
    }
}

impl Candidate {
    /// Nearest-rounded integer representation of this candidate.
    pub fn materialize(
        &self,
        weight: &DMatrix<f64>,
        decomposition: Option<&Decomposition>,
    ) -> Result<CompressedWeight> {
        match (&self.params, self.kind) {
            (CandidateParams::QuantOnly(p), _) => {
                Ok(CompressedWeight::Dense(QuantizedMatrix::nearest(weight, p)))
            }
            (CandidateParams::LowRank { a, b }, CandidateKind::LowRank { rank, .. }) => {
                let dec = decomposition.ok_or_else(|| {
                    Error::InvalidConfig("low-rank candidate without a decomposition".into())
                })?;
                let (fa, fb) = dec.truncate(rank)?;
                Ok(CompressedWeight::Factored {
                    a: QuantizedMatrix::nearest(&fa, a),
                    b: QuantizedMatrix::nearest(&fb, &b.truncated(rank)),
                })
            }
            _ => Err(Error::InvalidConfig("candidate kind and params disagree".into())),
        }
    }

    /// Dense fake-quantized weight `W̃`.
    pub fn compressed_weight(
        &self,
        weight: &DMatrix<f64>,
        decomposition: Option<&Decomposition>,
    ) -> Result<DMatrix<f64>> {
        Ok(self.materialize(weight, decomposition)?.dequantize())
    }

    fn dominates(&self, other: &Candidate) -> bool {
        self.local_loss <= other.local_loss
            && self.memory_bits <= other.memory_bits
            && (self.local_loss < other.local_loss || self.memory_bits < other.memory_bits)
    }
}

/// `‖C ⊙ (W - W̃)‖²_F`.
pub fn local_loss(w: &DMatrix<f64>, w_tilde: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    if w.shape() != w_tilde.shape() || w.shape() != c.shape() {
        return Err(Error::ShapeMismatch(format!(
            "local loss over {:?}, {:?}, {:?}",
            w.shape(),
            w_tilde.shape(),
            c.shape()
        )));
    }
    Ok(weighted_sq_error(w, w_tilde, &c.map(|v| v * v)))
}

/// `Σ c_sq ⊙ (a - b)²` for same-shaped matrices.
pub(crate) fn weighted_sq_error(a: &DMatrix<f64>, b: &DMatrix<f64>, c_sq: &DMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .zip(c_sq.as_slice())
        .map(|((x, y), w)| {
            let d = x - y;
            w * d * d
        })
        .sum()
}

/// Ranks enumerated for a layer: `1, 1 + stride, …` plus `r_max`.
pub fn rank_schedule(max_rank: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ranks: Vec<usize> = (1..=max_rank).step_by(stride).collect();
    if ranks.last() != Some(&max_rank) && max_rank > 0 {
        ranks.push(max_rank);
    }
    ranks
}

/// Quantization parameters searched once per bit-width for `W`, `A` and `B`.
#[derive(Debug, Clone)]
pub struct LayerParamTables {
    pub weight: Vec<(u8, Arc<QuantParams>)>,
    pub factor_a: Vec<(u8, Arc<QuantParams>)>,
    pub factor_b: Vec<(u8, Arc<QuantParams>)>,
}

impl LayerParamTables {
    fn lookup(table: &[(u8, Arc<QuantParams>)], bits: u8) -> Result<Arc<QuantParams>> {
        table
            .iter()
            .find(|(b, _)| *b == bits)
            .map(|(_, p)| Arc::clone(p))
            .ok_or_else(|| Error::InvalidConfig(format!("no parameters for {bits} bits")))
    }

    pub fn weight(&self, bits: u8) -> Result<Arc<QuantParams>> {
        Self::lookup(&self.weight, bits)
    }

    pub fn factor_a(&self, bits: u8) -> Result<Arc<QuantParams>> {
        Self::lookup(&self.factor_a, bits)
    }

    pub fn factor_b(&self, bits: u8) -> Result<Arc<QuantParams>> {
        Self::lookup(&self.factor_b, bits)
    }
}

/// Runs the Hessian-MSE search for `W` and, when a decomposition is given,
/// the factor searches for `A` and `B`, for every bit-width.
pub fn prepare_layer_params(
    weight: &DMatrix<f64>,
    hessian: &HessianWeights,
    decomposition: Option<&Decomposition>,
    bitset: &BitSet,
    grid: &PercentileGrid,
) -> LayerParamTables {
    let bits: Vec<u8> = bitset.iter().collect();
    let weight_params = bits
        .par_iter()
        .map(|&b| (b, Arc::new(search_params_hmse(weight, &hessian.c, b, grid).params)))
        .collect();
    let (factor_a, factor_b) = match decomposition {
        Some(dec) => (
            bits.par_iter()
                .map(|&b| {
                    let p = search_params_a(&dec.a, &dec.b, &hessian.c, b, grid).params;
                    (b, Arc::new(p))
                })
                .collect(),
            bits.par_iter()
                .map(|&b| (b, Arc::new(search_params_b(&dec.b, b, grid).params)))
                .collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    LayerParamTables {
        weight: weight_params,
        factor_a,
        factor_b,
    }
}

/// Builds `W̃_r = Σ_{k<r} Ã[:,k] B̃[k,:]` one rank at a time from fully
/// quantized factors. Because `A` is quantized per row with parameters fixed
/// across ranks, `Ã^(r)` is exactly the first `r` columns of `Ã`.
pub struct RankAccumulator<'a> {
    qa: &'a DMatrix<f64>,
    qb: &'a DMatrix<f64>,
    current: DMatrix<f64>,
    rank: usize,
}

impl<'a> RankAccumulator<'a> {
    pub fn new(qa: &'a DMatrix<f64>, qb: &'a DMatrix<f64>) -> Self {
        assert_eq!(qa.ncols(), qb.nrows(), "factor inner dimensions differ");
        RankAccumulator {
            current: DMatrix::zeros(qa.nrows(), qb.ncols()),
            qa,
            qb,
            rank: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn current(&self) -> &DMatrix<f64> {
        &self.current
    }

    /// Adds the next rank-one term; returns `None` once all ranks are used.
    pub fn advance(&mut self) -> Option<&DMatrix<f64>> {
        if self.rank == self.qa.ncols() {
            return None;
        }
        let k = self.rank;
        self.current
            .ger(1.0, &self.qa.column(k), &self.qb.row(k).transpose(), 1.0);
        self.rank += 1;
        Some(&self.current)
    }
}

/// Enumerates the layer's candidate set. Non-compressible layers, or layers
/// without a decomposition, only get quant-only options.
pub fn enumerate_candidates(
    layer_index: usize,
    weight: &DMatrix<f64>,
    decomposition: Option<&Decomposition>,
    hessian: &HessianWeights,
    tables: &LayerParamTables,
    bitset: &BitSet,
    rank_stride: usize,
) -> Result<Vec<Candidate>> {
    let (n_out, n_in) = weight.shape();
    let c_sq = hessian.c_squared();
    let mut out = Vec::new();
    for b in bitset.iter() {
        let params = tables.weight(b)?;
        let kind = CandidateKind::QuantOnly { bits: b };
        out.push(Candidate {
            layer_index,
            kind,
            local_loss: weighted_sq_error(weight, &quantize_uniform(weight, &params), &c_sq),
            memory_bits: memory_footprint(kind, n_out, n_in),
            params: CandidateParams::QuantOnly(params),
        });
    }
    let Some(dec) = decomposition else {
        return Ok(out);
    };

    let ranks = rank_schedule(dec.max_rank(), rank_stride);
    let pairs: Vec<(u8, u8)> = bitset
        .iter()
        .flat_map(|ba| bitset.iter().map(move |bb| (ba, bb)))
        .collect();
    let families = pairs
        .par_iter()
        .map(|&(ba, bb)| -> Result<Vec<Candidate>> {
            let pa = tables.factor_a(ba)?;
            let pb = tables.factor_b(bb)?;
            let qa = quantize_uniform(&dec.a, &pa);
            let qb = quantize_uniform(&dec.b, &pb);
            let mut acc = RankAccumulator::new(&qa, &qb);
            let mut family = Vec::with_capacity(ranks.len());
            for &r in &ranks {
                while acc.rank() < r {
                    acc.advance();
                }
                let kind = CandidateKind::LowRank {
                    rank: r,
                    bits_a: ba,
                    bits_b: bb,
                };
                family.push(Candidate {
                    layer_index,
                    kind,
                    local_loss: weighted_sq_error(weight, acc.current(), &c_sq),
                    memory_bits: memory_footprint(kind, n_out, n_in),
                    params: CandidateParams::LowRank {
                        a: Arc::clone(&pa),
                        b: Arc::clone(&pb),
                    },
                });
            }
            Ok(family)
        })
        .collect::<Result<Vec<_>>>()?;
    out.extend(families.into_iter().flatten());
    Ok(out)
}

/// Non-dominated candidates, sorted by memory ascending (hence by strictly
/// decreasing loss).
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    pub candidates: Vec<Candidate>,
}

impl ParetoFront {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn min_memory(&self) -> u64 {
        self.candidates[0].memory_bits
    }
}

fn front_order(x: &Candidate, y: &Candidate) -> Ordering {
    x.memory_bits
        .cmp(&y.memory_bits)
        .then(x.local_loss.total_cmp(&y.local_loss))
        .then(x.kind.tie_key().cmp(&y.kind.tie_key()))
}

/// Extracts the Pareto front over (local loss, memory). Among candidates that
/// coincide in both coordinates, one survives (see `CandidateKind` tie order).
pub fn pareto_front(mut candidates: Vec<Candidate>) -> Result<ParetoFront> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if candidates.iter().any(|c| c.local_loss.is_nan()) {
        return Err(Error::Numerical("NaN local loss".into()));
    }
    candidates.sort_by(front_order);
    let mut front: Vec<Candidate> = Vec::new();
    for c in candidates {
        match front.last() {
            Some(last) if c.local_loss >= last.local_loss => {}
            _ => front.push(c),
        }
    }
    Ok(ParetoFront { candidates: front })
}

/// O(n²) reference filter used to cross-check `pareto_front`.
pub fn brute_force_front(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = candidates
        .iter()
        .filter(|c| !candidates.iter().any(|d| d.dominates(c)))
        .cloned()
        .collect();
    kept.sort_by(front_order);
    kept.dedup_by(|later, earlier| {
        later.local_loss == earlier.local_loss && later.memory_bits == earlier.memory_bits
    });
    kept
}
