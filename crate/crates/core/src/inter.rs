//! Inter-layer allocation.
//!
//! Every Pareto candidate gets a network-level normalized MSE `Φ` (the
//! inverse SQNR of the network output when only that layer is compressed).
//! Large low-rank families are only partially evaluated and the rest is
//! linearly interpolated in local loss. The global assignment minimizes
//! `Σ Φ` under the weight-memory budget as a multiple-choice knapsack.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intra::{Candidate, CandidateKind, ParetoFront};
use crate::netsim::{output_with_layer_replaced, ForwardTrace};
use crate::quantizer::BitSet;
use crate::store::Model;

/// `‖net(W) - net(W̃)‖² / ‖net(W)‖²` over the calibration batch, with only
/// layer `index` replaced.
pub fn candidate_network_nmse(
    model: &Model,
    float_trace: &ForwardTrace,
    index: usize,
    w_tilde: &DMatrix<f64>,
) -> Result<f64> {
    let signal = float_trace.output.norm_squared();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let out = output_with_layer_replaced(model, float_trace, index, w_tilde)?;
    Ok((out - &float_trace.output).norm_squared() / signal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub phi: f64,
    pub interpolated: bool,
}

/// Metrics of one layer, aligned with its Pareto front.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub entries: Vec<MetricEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub layers: Vec<LayerMetrics>,
}

/// Picks `k` members of a group (sorted by memory) whose memories best match
/// `k` uniformly spaced targets between the group's extremes. Extremes are
/// always chosen; ties on distance go to the lower local loss.
fn choose_anchors(group: &[&Candidate], k: usize) -> Vec<usize> {
    let n = group.len();
    if n <= k {
        return (0..n).collect();
    }
    let lo = group[0].memory_bits as f64;
    let hi = group[n - 1].memory_bits as f64;
    let mut chosen = vec![false; n];
    chosen[0] = true;
    chosen[n - 1] = true;
    for t in 1..k - 1 {
        let target = lo + (hi - lo) * t as f64 / (k - 1) as f64;
        let best = (0..n)
            .filter(|&i| !chosen[i])
            .min_by(|&x, &y| {
                let dx = (group[x].memory_bits as f64 - target).abs();
                let dy = (group[y].memory_bits as f64 - target).abs();
                dx.total_cmp(&dy)
                    .then(group[x].local_loss.total_cmp(&group[y].local_loss))
            })
            .expect("more members than anchors");
        chosen[best] = true;
    }
    (0..n).filter(|&i| chosen[i]).collect()
}

/// Linear interpolation in local loss between two anchors.
/// Returns `Φ(low)` when both anchors share the same local loss.
pub fn interpolate_between(
    loss: f64,
    low: (f64, f64),
    high: (f64, f64),
) -> f64 {
    let (l_low, phi_low) = low;
    let (l_high, phi_high) = high;
    if l_high == l_low {
        return phi_low;
    }
    let beta = (loss - l_low) / (l_high - l_low);
    phi_low * (1.0 - beta) + phi_high * beta
}

/// Builds the metric table of one layer's front. Quant-only members and
/// `(b_A, b_B)` groups with at most `k_inf` members are evaluated exactly;
/// larger groups are evaluated at `k_inf` anchors and interpolated.
pub fn interpolate_metric_table<F>(
    front: &ParetoFront,
    k_inf: usize,
    exact: F,
) -> Result<LayerMetrics>
where
    F: Fn(&Candidate) -> Result<f64> + Sync,
{
    use rayon::prelude::*;

    if k_inf < 2 {
        return Err(Error::InvalidConfig("k_inf must be at least 2".into()));
    }
    let mut groups: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    let mut to_evaluate = Vec::new();
    for (i, c) in front.candidates.iter().enumerate() {
        match c.kind {
            CandidateKind::QuantOnly { .. } => to_evaluate.push(i),
            CandidateKind::LowRank { bits_a, bits_b, .. } => {
                groups.entry((bits_a, bits_b)).or_default().push(i)
            }
        }
    }
    // Front order is memory ascending, so each group is already sorted.
    let mut anchors_of = Vec::new();
    for members in groups.values() {
        let refs: Vec<&Candidate> = members.iter().map(|&i| &front.candidates[i]).collect();
        let anchors: Vec<usize> = choose_anchors(&refs, k_inf)
            .into_iter()
            .map(|a| members[a])
            .collect();
        to_evaluate.extend(&anchors);
        anchors_of.push((members.clone(), anchors));
    }
    to_evaluate.sort_unstable();

    let exact_values = to_evaluate
        .par_iter()
        .map(|&i| exact(&front.candidates[i]))
        .collect::<Result<Vec<f64>>>()?;
    let mut entries: Vec<Option<MetricEntry>> = vec![None; front.len()];
    for (&i, &phi) in to_evaluate.iter().zip(&exact_values) {
        entries[i] = Some(MetricEntry {
            phi,
            interpolated: false,
        });
    }

    for (members, anchors) in anchors_of {
        let mut anchor_pts: Vec<(f64, f64)> = anchors
            .iter()
            .map(|&a| (front.candidates[a].local_loss, entries[a].unwrap().phi))
            .collect();
        anchor_pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        for &m in &members {
            if entries[m].is_some() {
                continue;
            }
            let loss = front.candidates[m].local_loss;
            let upper = anchor_pts.partition_point(|p| p.0 < loss);
            let phi = if upper == 0 {
                anchor_pts[0].1
            } else if upper == anchor_pts.len() {
                anchor_pts[upper - 1].1
            } else {
                interpolate_between(loss, anchor_pts[upper - 1], anchor_pts[upper])
            };
            entries[m] = Some(MetricEntry {
                phi,
                interpolated: true,
            });
        }
    }
    Ok(LayerMetrics {
        entries: entries.into_iter().map(|e| e.expect("every member filled")).collect(),
    })
}

/// Weight (and optionally activation) memory budget in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub weights_bits: u64,
    pub activation_bits: Option<u64>,
}

impl MemoryBudget {
    pub fn new(weights_bits: u64) -> Result<Self> {
        if weights_bits == 0 {
            return Err(Error::InvalidConfig("weight budget must be positive".into()));
        }
        Ok(MemoryBudget {
            weights_bits,
            activation_bits: None,
        })
    }

    /// Budget equal to `avg_bits` per weight over `weight_count` weights.
    pub fn from_avg_bits(avg_bits: f64, weight_count: u64) -> Result<Self> {
        if !(avg_bits > 0.0) {
            return Err(Error::InvalidConfig("average bits must be positive".into()));
        }
        MemoryBudget::new((avg_bits * weight_count as f64).floor() as u64)
    }

    pub fn with_activation_bits(mut self, bits: Option<u64>) -> Self {
        self.activation_bits = bits;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerChoice {
    pub layer_index: usize,
    /// Index into the layer's Pareto front.
    pub front_index: usize,
    pub candidate: Candidate,
    pub metric: MetricEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSolution {
    pub choices: Vec<LayerChoice>,
    pub total_memory_bits: u64,
    pub budget_bits: u64,
    pub objective: f64,
    pub activation_bits: BTreeMap<String, u8>,
}

/// Exact multiple-choice knapsack over memory units of `delta` bits.
///
/// Each candidate costs `⌈M / δ⌉` units against `⌊ψ / δ⌋` available, so a
/// solution feasible in units is feasible in bits. Among optimal solutions
/// the lexicographically smallest vector of front indices is returned.
pub fn solve_allocation(
    fronts: &[ParetoFront],
    table: &MetricTable,
    budget_bits: u64,
    delta: u64,
) -> Result<AllocationSolution> {
    if delta == 0 {
        return Err(Error::InvalidConfig("memory unit must be positive".into()));
    }
    if fronts.len() != table.layers.len() {
        return Err(Error::ShapeMismatch("one metric row per layer required".into()));
    }
    for (f, m) in fronts.iter().zip(&table.layers) {
        if f.is_empty() {
            return Err(Error::EmptyInput);
        }
        if f.len() != m.entries.len() {
            return Err(Error::ShapeMismatch("metric row does not match its front".into()));
        }
    }
    let min_bits: u64 = fronts
        .iter()
        .map(|f| f.candidates.iter().map(|c| c.memory_bits).min().unwrap())
        .sum();
    if min_bits > budget_bits {
        return Err(Error::Infeasible {
            required: min_bits,
            budget: budget_bits,
        });
    }

    let capacity = (budget_bits / delta) as usize;
    let units: Vec<Vec<usize>> = fronts
        .iter()
        .map(|f| {
            f.candidates
                .iter()
                .map(|c| c.memory_bits.div_ceil(delta) as usize)
                .collect()
        })
        .collect();
    let min_units: usize = units.iter().map(|u| *u.iter().min().unwrap()).sum();
    if min_units > capacity {
        return Err(Error::InfeasibleUnits {
            unit: delta,
            required: min_units as u64,
            capacity: capacity as u64,
        });
    }
    // Capacity beyond the maximal total is never needed.
    let max_units: usize = units.iter().map(|u| *u.iter().max().unwrap()).sum();
    let capacity = capacity.min(max_units);

    // best[l][u]: minimal Σ Φ of layers l.. within u units.
    let n = fronts.len();
    let mut best = vec![vec![f64::INFINITY; capacity + 1]; n + 1];
    best[n].fill(0.0);
    for l in (0..n).rev() {
        let (head, tail) = best.split_at_mut(l + 1);
        let (cur, next) = (&mut head[l], &tail[0]);
        for (k, &w) in units[l].iter().enumerate() {
            let phi = table.layers[l].entries[k].phi;
            for u in w..=capacity {
                let v = phi + next[u - w];
                if v < cur[u] {
                    cur[u] = v;
                }
            }
        }
    }
    if !best[0][capacity].is_finite() {
        return Err(Error::Numerical("allocation objective is not finite".into()));
    }

    let mut remaining = capacity;
    let mut choices = Vec::with_capacity(n);
    for l in 0..n {
        let target = best[l][remaining];
        let k = (0..units[l].len())
            .find(|&k| {
                let w = units[l][k];
                w <= remaining && table.layers[l].entries[k].phi + best[l + 1][remaining - w] == target
            })
            .ok_or_else(|| Error::Numerical("knapsack reconstruction failed".into()))?;
        remaining -= units[l][k];
        choices.push(LayerChoice {
            layer_index: fronts[l].candidates[k].layer_index,
            front_index: k,
            candidate: fronts[l].candidates[k].clone(),
            metric: table.layers[l].entries[k],
        });
    }
    let total_memory_bits = choices.iter().map(|c| c.candidate.memory_bits).sum();
    let objective = choices.iter().map(|c| c.metric.phi).sum();
    Ok(AllocationSolution {
        choices,
        total_memory_bits,
        budget_bits,
        objective,
        activation_bits: BTreeMap::new(),
    })
}

/// Largest `b ∈ B` with `b ≤ ⌊ψ_AWS / Size(x)⌋` for every activation tensor.
pub fn activation_bit_allocation(
    tensor_sizes: &[(String, u64)],
    budget_bits: u64,
    bitset: &BitSet,
) -> Result<BTreeMap<String, u8>> {
    if budget_bits == 0 {
        return Err(Error::InvalidConfig("activation budget must be positive".into()));
    }
    let mut out = BTreeMap::new();
    for (name, size) in tensor_sizes {
        let ratio = if *size == 0 { u64::MAX } else { budget_bits / size };
        let b = bitset
            .iter()
            .filter(|&b| b as u64 <= ratio)
            .max()
            .ok_or_else(|| Error::NoFeasibleBit {
                tensor: name.clone(),
                ratio,
            })?;
        out.insert(name.clone(), b);
    }
    Ok(out)
}
