//! Low-rank-aware adaptive rounding.
//!
//! Each factor of a compressed layer (`Ã`, `B̃` for low-rank layers, a single
//! `W̃` otherwise) gets a continuous rounding variable `V`. The soft quantizer
//! rounds down and adds `h(V) ∈ [0, 1]`; Adam minimizes
//!
//! ```text
//! (1/N) Σ_n ‖W x_n - Ã B̃ x̃_n‖² + λ (f_reg(V_A) + f_reg(V_B))
//! ```
//!
//! over mini-batches, with `f_reg` switched off during warmup and its
//! exponent β annealed linearly afterwards. Layers are processed in order so
//! each sees the input produced by the already-rounded layers before it.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intra::CompressedWeight;
use crate::netsim::linear_forward;
use crate::quantizer::{
    rectified_sigmoid, rectified_sigmoid_grad, QuantParams, QuantizedMatrix, GAMMA, ZETA,
};
use crate::store::Model;
use crate::synth;

/// Keeps the initial `h(V)` strictly inside (0, 1) so `V` stays finite.
const INIT_CLIP: f64 = 1e-4;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingTarget {
    /// Target `W x` with the float-propagated input.
    FloatInput,
    /// Target `W x̃` with the compressed-propagated input.
    #[default]
    CompressedInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoRAdaConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of iterations run without the regularizer.
    pub warmup: f64,
    pub seed: u64,
    pub target: RoundingTarget,
}

impl Default for LoRAdaConfig {
    fn default() -> Self {
        LoRAdaConfig {
            iterations: 20_000,
            learning_rate: 0.3,
            lambda: 0.3,
            batch_size: 32,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
            seed: 0,
            target: RoundingTarget::CompressedInput,
        }
    }
}

impl LoRAdaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("LoRAda: {what}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.beta_start > 0.0 && self.beta_end > 0.0) {
            return bad("beta schedule must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1)");
        }
        Ok(())
    }

    /// `(λ, β)` in effect at `iteration`.
    pub fn schedule(&self, iteration: usize) -> (f64, f64) {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        if t < self.warmup {
            return (0.0, self.beta_start);
        }
        let progress = ((t - self.warmup) / (1.0 - self.warmup)).clamp(0.0, 1.0);
        (
            self.lambda,
            self.beta_start + (self.beta_end - self.beta_start) * progress,
        )
    }
}

/// `V` such that `h(V)` equals the fractional part of `M / s`, clipped to
/// `[ε, 1 - ε]`.
pub fn init_rounding_vars(m: &DMatrix<f64>, params: &QuantParams) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let x = m[(i, j)] / params.scales[i];
        let frac = x - x.floor();
        let sig = ((frac - GAMMA) / (ZETA - GAMMA)).clamp(INIT_CLIP, 1.0 - INIT_CLIP);
        (sig / (1.0 - sig)).ln()
    })
}

/// One matrix being rounded: its float values, frozen parameters and `V`.
#[derive(Debug, Clone)]
pub struct SoftFactor {
    pub base: DMatrix<f64>,
    pub params: QuantParams,
    pub v: DMatrix<f64>,
    floor: DMatrix<f64>,
}

impl SoftFactor {
    pub fn new(base: DMatrix<f64>, params: QuantParams) -> Self {
        assert_eq!(base.nrows(), params.rows(), "one parameter row per matrix row");
        let v = init_rounding_vars(&base, &params);
        let floor = DMatrix::from_fn(base.nrows(), base.ncols(), |i, j| {
            (base[(i, j)] / params.scales[i]).floor()
        });
        SoftFactor {
            base,
            params,
            v,
            floor,
        }
    }

    /// Soft-quantized matrix and `∂M_soft/∂V` (outer clip and `h` clip
    /// both pass gradient only strictly inside their range).
    fn soft_with_grad(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let qmax = self.params.qmax() as f64;
        let (rows, cols) = self.base.shape();
        let mut soft = DMatrix::zeros(rows, cols);
        let mut grad = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                let s = self.params.scales[i];
                let z = self.params.zero_points[i] as f64;
                let v = self.v[(i, j)];
                let raw = self.floor[(i, j)] + rectified_sigmoid(v) + z;
                let u = raw.clamp(0.0, qmax);
                soft[(i, j)] = s * (u - z);
                if raw > 0.0 && raw < qmax {
                    grad[(i, j)] = s * rectified_sigmoid_grad(v);
                }
            }
        }
        (soft, grad)
    }

    pub fn soft(&self) -> DMatrix<f64> {
        self.soft_with_grad().0
    }

    fn codes_with(&self, up: impl Fn(usize, usize) -> bool) -> QuantizedMatrix {
        let qmax = self.params.qmax() as f64;
        let codes = DMatrix::from_fn(self.base.nrows(), self.base.ncols(), |i, j| {
            let offset = if up(i, j) { 1.0 } else { 0.0 };
            let z = self.params.zero_points[i] as f64;
            (self.floor[(i, j)] + offset + z).clamp(0.0, qmax) as i32
        });
        QuantizedMatrix {
            codes,
            params: self.params.clone(),
        }
    }

    /// Commits `h(V)` to {0, 1}.
    pub fn hard(&self) -> QuantizedMatrix {
        self.codes_with(|i, j| rectified_sigmoid(self.v[(i, j)]) >= 0.5)
    }

    /// Nearest rounding of the float values.
    pub fn nearest(&self) -> QuantizedMatrix {
        QuantizedMatrix::nearest(&self.base, &self.params)
    }

    /// Fraction of entries with `h(V)` within `tol` of 0 or 1.
    pub fn saturated_fraction(&self, tol: f64) -> f64 {
        if self.v.is_empty() {
            return 1.0;
        }
        let n = self
            .v
            .iter()
            .map(|&v| rectified_sigmoid(v))
            .filter(|h| *h <= tol || *h >= 1.0 - tol)
            .count();
        n as f64 / self.v.len() as f64
    }
}

/// Rounding variables of one layer plus Adam state.
#[derive(Debug, Clone)]
pub struct RoundingState {
    /// One factor (dense) or two (`A` then `B`).
    pub factors: Vec<SoftFactor>,
    pub beta: f64,
    pub lambda: f64,
    first_moment: Vec<DMatrix<f64>>,
    second_moment: Vec<DMatrix<f64>>,
    step: u64,
}

impl RoundingState {
    pub fn new(factors: Vec<SoftFactor>, lambda: f64, beta: f64) -> Self {
        assert!(matches!(factors.len(), 1 | 2), "one or two factors");
        if factors.len() == 2 {
            assert_eq!(factors[0].base.ncols(), factors[1].base.nrows());
        }
        let zeros: Vec<DMatrix<f64>> = factors
            .iter()
            .map(|f| DMatrix::zeros(f.v.nrows(), f.v.ncols()))
            .collect();
        RoundingState {
            factors,
            beta,
            lambda,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn dense(w: DMatrix<f64>, params: QuantParams) -> Self {
        RoundingState::new(vec![SoftFactor::new(w, params)], 0.0, 2.0)
    }

    pub fn factored(a: DMatrix<f64>, pa: QuantParams, b: DMatrix<f64>, pb: QuantParams) -> Self {
        RoundingState::new(
            vec![SoftFactor::new(a, pa), SoftFactor::new(b, pb)],
            0.0,
            2.0,
        )
    }

    pub fn n_out(&self) -> usize {
        self.factors[0].base.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.factors.last().unwrap().base.ncols()
    }

    fn product(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
        match mats {
            [w] => w.clone(),
            [a, b] => a * b,
            _ => unreachable!(),
        }
    }

    /// Objective value and gradient w.r.t. each `V` at the current `β`, `λ`.
    pub fn objective_and_gradient(
        &self,
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
    ) -> Result<(f64, Vec<DMatrix<f64>>)> {
        self.check_data(inputs, targets)?;
        let (soft, dsoft): (Vec<_>, Vec<_>) =
            self.factors.iter().map(SoftFactor::soft_with_grad).unzip();
        let p = Self::product(&soft);
        let n = inputs.nrows() as f64;
        let residual = inputs * p.transpose() - targets;
        let recon = residual.norm_squared() / n;
        // ∂recon/∂P = (2/N) Rᵀ X
        let g = (residual.transpose() * inputs) * (2.0 / n);
        let dfactor: Vec<DMatrix<f64>> = match soft.as_slice() {
            [_] => vec![g],
            [a, b] => vec![&g * b.transpose(), a.transpose() * &g],
            _ => unreachable!(),
        };

        let mut value = recon;
        let mut grads = Vec::with_capacity(self.factors.len());
        for ((factor, ds), dm) in self.factors.iter().zip(&dsoft).zip(dfactor) {
            let mut grad = dm.component_mul(ds);
            if self.lambda != 0.0 {
                let mut reg = 0.0;
                for (gv, &v) in grad.iter_mut().zip(factor.v.iter()) {
                    let h = rectified_sigmoid(v);
                    let t = 2.0 * h - 1.0;
                    reg += 1.0 - t.abs().powf(self.beta);
                    let dreg_dh = if t == 0.0 {
                        0.0
                    } else {
                        -2.0 * self.beta * t.abs().powf(self.beta - 1.0) * t.signum()
                    };
                    *gv += self.lambda * dreg_dh * rectified_sigmoid_grad(v);
                }
                value += self.lambda * reg;
            }
            grads.push(grad);
        }
        Ok((value, grads))
    }

    fn check_data(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyCalibration);
        }
        if inputs.ncols() != self.n_in()
            || targets.ncols() != self.n_out()
            || targets.nrows() != inputs.nrows()
        {
            return Err(Error::ShapeMismatch(format!(
                "rounding data {:?} -> {:?} for a {}x{} layer",
                inputs.shape(),
                targets.shape(),
                self.n_out(),
                self.n_in()
            )));
        }
        Ok(())
    }

    fn adam_step(&mut self, grads: &[DMatrix<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (k, g) in grads.iter().enumerate() {
            let m = &mut self.first_moment[k];
            let s = &mut self.second_moment[k];
            let v = &mut self.factors[k].v;
            for idx in 0..g.len() {
                let gi = g[idx];
                m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * gi;
                s[idx] = ADAM_BETA2 * s[idx] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[idx] / bc1;
                let s_hat = s[idx] / bc2;
                v[idx] -= lr * m_hat / (s_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    fn compressed(&self, quantized: Vec<QuantizedMatrix>) -> CompressedWeight {
        let mut it = quantized.into_iter();
        let first = it.next().unwrap();
        match it.next() {
            None => CompressedWeight::Dense(first),
            Some(b) => CompressedWeight::Factored { a: first, b },
        }
    }

    pub fn nearest_weight(&self) -> CompressedWeight {
        self.compressed(self.factors.iter().map(SoftFactor::nearest).collect())
    }

    pub fn hard_weight(&self) -> CompressedWeight {
        self.compressed(self.factors.iter().map(SoftFactor::hard).collect())
    }

    pub fn saturated_fraction(&self, tol: f64) -> f64 {
        let total: usize = self.factors.iter().map(|f| f.v.len()).sum();
        self.factors
            .iter()
            .map(|f| f.saturated_fraction(tol) * f.v.len() as f64)
            .sum::<f64>()
            / total.max(1) as f64
    }
}

/// `(1/N) ‖X W̃ᵀ - T‖²` for a committed weight.
pub fn reconstruction_error(
    weight: &CompressedWeight,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> f64 {
    let w = weight.dequantize();
    (inputs * w.transpose() - targets).norm_squared() / inputs.nrows().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct LayerRounding {
    pub weight: CompressedWeight,
    /// Reconstruction error with nearest rounding.
    pub nearest_objective: f64,
    /// Reconstruction error of the returned weight.
    pub final_objective: f64,
    /// True when the optimized rounding was worse and nearest rounding was kept.
    pub fell_back: bool,
    pub saturated_fraction: f64,
}

/// Optimizes one layer's rounding over `inputs`/`targets` (one sample per
/// row), then commits `h(V)` to {0, 1}. The committed weight is never worse
/// than nearest rounding on the full data.
pub fn optimize_layer(
    mut state: RoundingState,
    config: &LoRAdaConfig,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<LayerRounding> {
    config.validate()?;
    state.check_data(inputs, targets)?;
    let nearest = state.nearest_weight();
    let nearest_objective = reconstruction_error(&nearest, inputs, targets);
    if config.iterations == 0 {
        return Ok(LayerRounding {
            weight: nearest,
            nearest_objective,
            final_objective: nearest_objective,
            fell_back: false,
            saturated_fraction: state.saturated_fraction(0.01),
        });
    }

    let n = inputs.nrows();
    let batch = config.batch_size.min(n);
    let mut rng = synth::rng(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for it in 0..config.iterations {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = inputs.select_rows(idx);
        let tb = targets.select_rows(idx);
        let (lambda, beta) = config.schedule(it);
        state.lambda = lambda;
        state.beta = beta;
        let (value, grads) = state.objective_and_gradient(&xb, &tb)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("LoRAda objective diverged at step {it}")));
        }
        state.adam_step(&grads, config.learning_rate);
    }

    let hard = state.hard_weight();
    let hard_objective = reconstruction_error(&hard, inputs, targets);
    let saturated_fraction = state.saturated_fraction(0.01);
    let (weight, final_objective, fell_back) = if hard_objective <= nearest_objective {
        (hard, hard_objective, false)
    } else {
        (nearest, nearest_objective, true)
    };
    Ok(LayerRounding {
        weight,
        nearest_objective,
        final_objective,
        fell_back,
        saturated_fraction,
    })
}

/// Float values and frozen parameters of one layer's chosen representation.
#[derive(Debug, Clone)]
pub enum LayerFactors {
    Dense {
        weight: DMatrix<f64>,
        params: QuantParams,
    },
    Factored {
        a: DMatrix<f64>,
        params_a: QuantParams,
        b: DMatrix<f64>,
        params_b: QuantParams,
    },
}

impl LayerFactors {
    fn into_state(self) -> RoundingState {
        match self {
            LayerFactors::Dense { weight, params } => RoundingState::dense(weight, params),
            LayerFactors::Factored {
                a,
                params_a,
                b,
                params_b,
            } => RoundingState::factored(a, params_a, b, params_b),
        }
    }
}

/// Rounds every layer in order. Layer `ℓ` trains on the calibration input
/// propagated through the already-rounded layers `0..ℓ`.
pub fn run_sequential_rounding(
    model: &Model,
    plan: Vec<LayerFactors>,
    config: &LoRAdaConfig,
) -> Result<Vec<LayerRounding>> {
    config.validate()?;
    if plan.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rounding plans for {} layers",
            plan.len(),
            model.layers.len()
        )));
    }
    let mut x_float = model.calibration.clone();
    let mut x_comp = model.calibration.clone();
    let mut out = Vec::with_capacity(plan.len());
    for (index, (layer, factors)) in model.layers.iter().zip(plan).enumerate() {
        let targets = match config.target {
            RoundingTarget::CompressedInput => &x_comp * layer.weight.transpose(),
            RoundingTarget::FloatInput => &x_float * layer.weight.transpose(),
        };
        let layer_config = LoRAdaConfig {
            seed: config.seed.wrapping_add(index as u64),
            ..config.clone()
        };
        let state = factors.into_state();
        if (state.n_out(), state.n_in()) != layer.weight.shape() {
            return Err(Error::ShapeMismatch(format!(
                "rounding plan for layer `{}` has the wrong shape",
                layer.spec.name
            )));
        }
        let rounded = optimize_layer(state, &layer_config, &x_comp, &targets)?;
        let act = layer.spec.activation_after;
        x_comp = linear_forward(&x_comp, &rounded.weight.dequantize(), &layer.bias, act).1;
        x_float = linear_forward(&x_float, &layer.weight, &layer.bias, act).1;
        out.push(rounded);
    }
    Ok(out)
}
