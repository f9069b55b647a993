//! End-to-end compression: Hessian weights, decomposition, parameter
//! searches, candidate fronts, metric table, allocation, activation bits,
//! optional adaptive rounding and persistence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inter::{
    activation_bit_allocation, candidate_network_nmse, interpolate_metric_table,
    solve_allocation, AllocationSolution, MemoryBudget, MetricTable,
};
use crate::intra::{
    enumerate_candidates, pareto_front, prepare_layer_params, CandidateKind, CompressedWeight,
    ParetoFront,
};
use crate::lorada::{run_sequential_rounding, LayerFactors, LayerRounding, LoRAdaConfig};
use crate::lowrank::{hessian_weighted_decompose, Decomposition};
use crate::netsim::{estimate_hessian_diag, forward_trace, forward_with_weights, HessianWeights};
use crate::quantizer::{
    search_params_a, search_params_b, search_params_hmse, BitSet, PercentileGrid,
};
use crate::report;
use crate::store::{save_solution, Layer, Model, SolutionRecord};

pub const FRONTS_CSV: &str = "fronts.csv";
pub const SOLUTION_CSV: &str = "solution.csv";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Provided Hessians where present, Gauss–Newton estimates elsewhere.
    #[default]
    Auto,
    Provided,
    GaussNewton,
    Identity,
}

impl FromStr for HessianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(HessianMode::Auto),
            "provided" => Ok(HessianMode::Provided),
            "gauss_newton" => Ok(HessianMode::GaussNewton),
            "identity" => Ok(HessianMode::Identity),
            _ => Err(Error::InvalidConfig(format!("unknown hessian mode `{s}`"))),
        }
    }
}

impl fmt::Display for HessianMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HessianMode::Auto => "auto",
            HessianMode::Provided => "provided",
            HessianMode::GaussNewton => "gauss_newton",
            HessianMode::Identity => "identity",
        })
    }
}

/// Options shared by the search stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub bitset: BitSet,
    pub percentiles: PercentileGrid,
    pub rank_stride: usize,
    pub hessian: HessianMode,
    /// Restrict every layer to quant-only options.
    pub quant_only: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            bitset: BitSet::default(),
            percentiles: PercentileGrid::default(),
            rank_stride: 1,
            hessian: HessianMode::Auto,
            quant_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    #[serde(flatten)]
    pub search: SearchConfig,
    pub budget_bits: Option<u64>,
    pub avg_bits: Option<f64>,
    pub act_budget_bits: Option<u64>,
    pub k_inf: usize,
    /// Memory unit of the allocation program, in bits.
    pub delta: u64,
    /// Adaptive rounding settings; `None` keeps nearest rounding.
    pub lorada: Option<LoRAdaConfig>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            search: SearchConfig::default(),
            budget_bits: None,
            avg_bits: None,
            act_budget_bits: None,
            k_inf: 16,
            delta: 1024,
            lorada: None,
        }
    }
}

impl CompressConfig {
    pub fn budget(&self, model: &Model) -> Result<MemoryBudget> {
        let budget = match (self.budget_bits, self.avg_bits) {
            (Some(bits), None) => MemoryBudget::new(bits)?,
            (None, Some(avg)) => MemoryBudget::from_avg_bits(avg, model.weight_count())?,
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "give either a bit budget or an average bit-width, not both".into(),
                ))
            }
            (None, None) => return Err(Error::InvalidConfig("a weight budget is required".into())),
        };
        Ok(budget.with_activation_bits(self.act_budget_bits))
    }

    pub fn validate(&self) -> Result<()> {
        if self.search.rank_stride == 0 {
            return Err(Error::InvalidConfig("rank stride must be positive".into()));
        }
        if self.k_inf < 2 {
            return Err(Error::InvalidConfig("k_inf must be at least 2".into()));
        }
        if self.delta == 0 {
            return Err(Error::InvalidConfig("delta must be positive".into()));
        }
        if let Some(l) = &self.lorada {
            l.validate()?;
        }
        Ok(())
    }
}

/// Hessian weights of every layer under `mode`.
pub fn layer_hessians(model: &Model, mode: HessianMode) -> Result<Vec<HessianWeights>> {
    let needs_estimate = match mode {
        HessianMode::GaussNewton => true,
        HessianMode::Auto => model.hessians.iter().any(Option::is_none),
        HessianMode::Provided | HessianMode::Identity => false,
    };
    let estimated = if needs_estimate {
        Some(estimate_hessian_diag(model, &model.calibration)?)
    } else {
        None
    };
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match (mode, &model.hessians[i]) {
            (HessianMode::Identity, _) => Ok(HessianWeights::identity(layer.n_out(), layer.n_in())),
            (HessianMode::GaussNewton, _) | (HessianMode::Auto, None) => {
                Ok(estimated.as_ref().expect("estimated above")[i].clone())
            }
            (HessianMode::Auto | HessianMode::Provided, Some(h)) => HessianWeights::from_diagonal(h),
            (HessianMode::Provided, None) => Err(Error::MissingTensor(format!(
                "hessian for layer `{}`",
                layer.spec.name
            ))),
        })
        .collect()
}

fn allows_low_rank(layer: &Layer, search: &SearchConfig) -> bool {
    layer.spec.compressible && !search.quant_only
}

/// Per-layer search state kept for later stages.
#[derive(Debug, Clone)]
pub struct LayerAnalysis {
    pub hessian: HessianWeights,
    pub decomposition: Option<Decomposition>,
    pub candidate_count: usize,
    pub front: ParetoFront,
}

pub fn analyze_layer(
    model: &Model,
    index: usize,
    hessian: HessianWeights,
    search: &SearchConfig,
) -> Result<LayerAnalysis> {
    let layer = &model.layers[index];
    let decomposition = if allows_low_rank(layer, search) {
        Some(hessian_weighted_decompose(&layer.weight, &hessian.q)?)
    } else {
        None
    };
    let tables = prepare_layer_params(
        &layer.weight,
        &hessian,
        decomposition.as_ref(),
        &search.bitset,
        &search.percentiles,
    );
    let candidates = enumerate_candidates(
        index,
        &layer.weight,
        decomposition.as_ref(),
        &hessian,
        &tables,
        &search.bitset,
        search.rank_stride,
    )?;
    let candidate_count = candidates.len();
    let front = pareto_front(candidates)?;
    Ok(LayerAnalysis {
        hessian,
        decomposition,
        candidate_count,
        front,
    })
}

pub fn analyze_layers(model: &Model, search: &SearchConfig) -> Result<Vec<LayerAnalysis>> {
    let hessians = layer_hessians(model, search.hessian)?;
    hessians
        .into_iter()
        .enumerate()
        .map(|(i, h)| analyze_layer(model, i, h, search))
        .collect()
}

/// Network NMSE of every front member, exact or interpolated.
pub fn build_metric_table(
    model: &Model,
    analyses: &[LayerAnalysis],
    k_inf: usize,
) -> Result<MetricTable> {
    let trace = forward_trace(model, &model.calibration)?;
    let layers = analyses
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let weight = &model.layers[i].weight;
            interpolate_metric_table(&a.front, k_inf, |c| {
                let w_tilde = c.compressed_weight(weight, a.decomposition.as_ref())?;
                candidate_network_nmse(model, &trace, i, &w_tilde)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricTable { layers })
}

/// Float factors and parameters of the chosen representation of each layer,
/// recomputed with the same searches that produced the candidates.
pub fn rounding_plan(
    model: &Model,
    hessians: &[HessianWeights],
    kinds: &[CandidateKind],
    grid: &PercentileGrid,
) -> Result<Vec<LayerFactors>> {
    model
        .layers
        .iter()
        .zip(hessians)
        .zip(kinds)
        .map(|((layer, h), kind)| match *kind {
            CandidateKind::QuantOnly { bits } => Ok(LayerFactors::Dense {
                weight: layer.weight.clone(),
                params: search_params_hmse(&layer.weight, &h.c, bits, grid).params,
            }),
            CandidateKind::LowRank {
                rank,
                bits_a,
                bits_b,
            } => {
                let dec = hessian_weighted_decompose(&layer.weight, &h.q)?;
                let params_a = search_params_a(&dec.a, &dec.b, &h.c, bits_a, grid).params;
                let params_b = search_params_b(&dec.b, bits_b, grid).params.truncated(rank);
                let (a, b) = dec.truncate(rank)?;
                Ok(LayerFactors::Factored {
                    a,
                    params_a,
                    b,
                    params_b,
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CompressionResult {
    pub record: SolutionRecord,
    pub solution: AllocationSolution,
    pub weights: Vec<CompressedWeight>,
    pub analyses: Vec<LayerAnalysis>,
    pub table: MetricTable,
    pub rounding: Option<Vec<LayerRounding>>,
}

impl CompressionResult {
    pub fn layer_names(&self) -> Vec<String> {
        self.record.layers.iter().map(|l| l.name.clone()).collect()
    }
}

pub fn layer_names(model: &Model) -> Vec<String> {
    model.layers.iter().map(|l| l.spec.name.clone()).collect()
}

/// Runs the full search and returns the chosen, integer-coded weights.
pub fn compress(model: &Model, config: &CompressConfig) -> Result<CompressionResult> {
    config.validate()?;
    let budget = config.budget(model)?;
    let analyses = analyze_layers(model, &config.search)?;
    let table = build_metric_table(model, &analyses, config.k_inf)?;
    let fronts: Vec<ParetoFront> = analyses.iter().map(|a| a.front.clone()).collect();
    let mut solution = solve_allocation(&fronts, &table, budget.weights_bits, config.delta)?;
    if let Some(act_budget) = budget.activation_bits {
        let sizes: Vec<(String, u64)> = model
            .layers
            .iter()
            .map(|l| (l.spec.name.clone(), l.n_in() as u64))
            .collect();
        solution.activation_bits = activation_bit_allocation(&sizes, act_budget, &config.search.bitset)?;
    }

    let names = layer_names(model);
    let mut record = SolutionRecord::from_allocation(&model.name, &names, &solution)?;
    let mut weights = solution
        .choices
        .iter()
        .zip(&analyses)
        .map(|(c, a)| {
            c.candidate
                .materialize(&model.layers[c.layer_index].weight, a.decomposition.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;

    let rounding = match &config.lorada {
        Some(lorada) => {
            let hessians: Vec<HessianWeights> = analyses.iter().map(|a| a.hessian.clone()).collect();
            let kinds: Vec<CandidateKind> = solution.choices.iter().map(|c| c.candidate.kind).collect();
            let plan = rounding_plan(model, &hessians, &kinds, &config.search.percentiles)?;
            let rounded = run_sequential_rounding(model, plan, lorada)?;
            weights = rounded.iter().map(|r| r.weight.clone()).collect();
            record.refined = true;
            Some(rounded)
        }
        None => None,
    };

    Ok(CompressionResult {
        record,
        solution,
        weights,
        analyses,
        table,
        rounding,
    })
}

/// Writes the report, record, compressed container and both CSV files.
pub fn write_artifacts(result: &CompressionResult, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    save_solution(&result.record, &result.weights, out_dir)?;
    let names = result.layer_names();
    let fronts: Vec<&ParetoFront> = result.analyses.iter().map(|a| &a.front).collect();
    fs::write(
        out_dir.join(FRONTS_CSV),
        report::fronts_csv(&names, &fronts, Some(&result.table))?,
    )?;
    fs::write(out_dir.join(SOLUTION_CSV), report::solution_csv(&result.record)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEval {
    pub name: String,
    pub kind: CandidateKind,
    pub memory_bits: u64,
    pub float_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean squared error per output element.
    pub mse: f64,
    /// `‖y - ỹ‖² / ‖y‖²` over the calibration batch.
    pub nmse: f64,
    pub layers: Vec<LayerEval>,
    pub total_memory_bits: u64,
    pub avg_bits: f64,
}

/// Compares the network with all compressed weights against the float one
/// on the calibration batch.
pub fn evaluate(model: &Model, weights: &[CompressedWeight]) -> Result<EvalReport> {
    if weights.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} compressed weights for {} layers",
            weights.len(),
            model.layers.len()
        )));
    }
    let float = forward_trace(model, &model.calibration)?.output;
    let dense: Vec<DMatrix<f64>> = weights.iter().map(CompressedWeight::dequantize).collect();
    let out = forward_with_weights(model, &model.calibration, &dense)?;
    let err = (&out - &float).norm_squared();
    let signal = float.norm_squared();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let layers: Vec<LayerEval> = model
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| LayerEval {
            name: l.spec.name.clone(),
            kind: w.kind(),
            memory_bits: w.memory_bits(),
            float_bits: 32 * (l.n_out() * l.n_in()) as u64,
        })
        .collect();
    let total_memory_bits = layers.iter().map(|l| l.memory_bits).sum();
    Ok(EvalReport {
        mse: err / float.len().max(1) as f64,
        nmse: err / signal,
        avg_bits: total_memory_bits as f64 / model.weight_count() as f64,
        layers,
        total_memory_bits,
    })
}
