//! Forward engine for sequential chains of linear layers with elementwise
//! activations, plus a Gauss–Newton estimate of each layer's diagonal
//! weight Hessian.
//!
//! Batches are stored one sample per row, so a layer computes
//! `Y = X Wᵀ + 1 bᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Model;

/// Row sums below this are treated as empty and replaced by this value.
pub const ZERO_ROW_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    /// Tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
    Gelu,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_K * (x + GELU_C * x * x * x);
                let t = u.tanh();
                let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

/// Computes `act(X Wᵀ + 1 bᵀ)` and the pre-activation.
pub fn linear_forward(
    x: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
    act: Activation,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut pre = x * weight.transpose();
    for mut row in pre.row_iter_mut() {
        row += bias.transpose();
    }
    let post = pre.map(|v| act.apply(v));
    (pre, post)
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input batch of each layer, `N x n_in`.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of each layer, `N x n_out`.
    pub pre_activations: Vec<DMatrix<f64>>,
    /// Final post-activation output, `N x d_out`.
    pub output: DMatrix<f64>,
}

pub fn forward_trace(model: &Model, inputs: &DMatrix<f64>) -> Result<ForwardTrace> {
    if inputs.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} columns, model expects {}",
            inputs.ncols(),
            model.input_dim()
        )));
    }
    let mut trace_inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut x = inputs.clone();
    for layer in &model.layers {
        let (pre, post) = linear_forward(&x, &layer.weight, &layer.bias, layer.spec.activation_after);
        trace_inputs.push(x);
        pre_activations.push(pre);
        x = post;
    }
    Ok(ForwardTrace {
        inputs: trace_inputs,
        pre_activations,
        output: x,
    })
}

/// Runs the whole network with every layer's weight replaced.
pub fn forward_with_weights(
    model: &Model,
    inputs: &DMatrix<f64>,
    weights: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    if weights.len() != model.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} layers",
            weights.len(),
            model.layers.len()
        )));
    }
    if inputs.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch("input width".into()));
    }
    let mut x = inputs.clone();
    for (layer, w) in model.layers.iter().zip(weights) {
        check_weight_shape(layer.weight.shape(), w.shape())?;
        x = linear_forward(&x, w, &layer.bias, layer.spec.activation_after).1;
    }
    Ok(x)
}

fn check_weight_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch(format!(
            "replacement weight {found:?}, layer weight {expected:?}"
        )));
    }
    Ok(())
}

/// Network output with layer `index` using `weight`; every other layer stays
/// in floating point. Recomputation starts from the cached float input of
/// that layer.
pub fn output_with_layer_replaced(
    model: &Model,
    float_trace: &ForwardTrace,
    index: usize,
    weight: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let layer = model.layers.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: model.layers.len(),
    })?;
    check_weight_shape(layer.weight.shape(), weight.shape())?;
    let mut x = linear_forward(
        &float_trace.inputs[index],
        weight,
        &layer.bias,
        layer.spec.activation_after,
    )
    .1;
    for later in &model.layers[index + 1..] {
        x = linear_forward(&x, &later.weight, &later.bias, later.spec.activation_after).1;
    }
    Ok(x)
}

/// Elementwise Hessian weights of one layer: `C` (square root of the diagonal
/// Hessian, `n_out x n_in`) and its row sums `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianWeights {
    pub c: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl HessianWeights {
    /// Builds from `C`, replacing rows that sum to zero by `ZERO_ROW_EPS`.
    pub fn from_c(mut c: DMatrix<f64>) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical(
                "Hessian weights must be finite and non-negative".into(),
            ));
        }
        for i in 0..c.nrows() {
            if c.row(i).sum() <= 0.0 {
                c.row_mut(i).fill(ZERO_ROW_EPS);
            }
        }
        let q = DVector::from_iterator(c.nrows(), c.row_iter().map(|r| r.sum()));
        Ok(HessianWeights { c, q })
    }

    /// Builds from a diagonal Hessian (elementwise square root is taken).
    pub fn from_diagonal(h: &DMatrix<f64>) -> Result<Self> {
        if h.iter().any(|v| *v < 0.0) {
            return Err(Error::Numerical("negative Hessian diagonal entry".into()));
        }
        HessianWeights::from_c(h.map(f64::sqrt))
    }

    pub fn identity(n_out: usize, n_in: usize) -> Self {
        HessianWeights::from_c(DMatrix::from_element(n_out, n_in, 1.0)).expect("ones are valid")
    }

    /// `C ⊙ C`, the weight used by squared local losses.
    pub fn c_squared(&self) -> DMatrix<f64> {
        self.c.map(|v| v * v)
    }
}

/// Gauss–Newton diagonal Hessian per layer:
/// `C[i,j] = sqrt(Σ_n a_i(n) x_j(n)²)` with `a_i(n) = Σ_k J(n)[k,i]²`, where `J(n)`
/// is the Jacobian of the network output w.r.t. the layer's pre-activation.
pub fn estimate_hessian_diag(
    model: &Model,
    calibration: &DMatrix<f64>,
) -> Result<Vec<HessianWeights>> {
    if calibration.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let trace = forward_trace(model, calibration)?;
    let n_layers = model.layers.len();
    let n_samples = calibration.nrows();

    // sensitivities[l] is N x n_out(l): a_i(n) per sample and output unit.
    let mut sensitivities: Vec<DMatrix<f64>> = model
        .layers
        .iter()
        .map(|l| DMatrix::zeros(n_samples, l.n_out()))
        .collect();

    for n in 0..n_samples {
        // Jacobian of the output w.r.t. the current layer's pre-activation.
        let last = n_layers - 1;
        let act = model.layers[last].spec.activation_after;
        let d_out = model.layers[last].n_out();
        let mut jac = DMatrix::zeros(d_out, d_out);
        for k in 0..d_out {
            jac[(k, k)] = act.derivative(trace.pre_activations[last][(n, k)]);
        }
        column_energy_into(&jac, &mut sensitivities[last], n);
        for l in (0..last).rev() {
            // d out / d pre_l = J_{l+1} W_{l+1} diag(act_l'(pre_l))
            let mut next = &jac * &model.layers[l + 1].weight;
            let act = model.layers[l].spec.activation_after;
            for (i, mut col) in next.column_iter_mut().enumerate() {
                col *= act.derivative(trace.pre_activations[l][(n, i)]);
            }
            jac = next;
            column_energy_into(&jac, &mut sensitivities[l], n);
        }
    }

    sensitivities
        .iter()
        .zip(&trace.inputs)
        .map(|(a, x)| {
            let x_sq = x.map(|v| v * v);
            let c_sq = a.transpose() * x_sq;
            HessianWeights::from_c(c_sq.map(|v| v.max(0.0).sqrt()))
        })
        .collect()
}

fn column_energy_into(jac: &DMatrix<f64>, out: &mut DMatrix<f64>, sample: usize) {
    for (i, col) in jac.column_iter().enumerate() {
        out[(sample, i)] = col.norm_squared();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::None.apply(-3.5), -3.5);
        // derivative of the tanh-GELU against central differences
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_chain_is_identity() {
        let mut model = synth::chain(&[3, 3, 3], Activation::None, 4, 1);
        for l in &mut model.layers {
            l.weight = DMatrix::identity(3, 3);
            l.bias.fill(0.0);
        }
        let trace = forward_trace(&model, &model.calibration).unwrap();
        for x in &trace.inputs {
            assert_eq!(x, &model.calibration);
        }
        assert_eq!(trace.output, model.calibration);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let model = synth::chain(&[3, 2], Activation::None, 4, 1);
        assert!(matches!(
            forward_trace(&model, &DMatrix::zeros(2, 5)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn replacement_with_original_is_noop() {
        let model = synth::chain(&[5, 4, 3, 2], Activation::Gelu, 6, 2);
        let trace = forward_trace(&model, &model.calibration).unwrap();
        for (i, l) in model.layers.iter().enumerate() {
            let out = output_with_layer_replaced(&model, &trace, i, &l.weight).unwrap();
            assert_eq!(out, trace.output);
        }
        assert!(matches!(
            output_with_layer_replaced(&model, &trace, 3, &model.layers[0].weight),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn annihilated_single_layer() {
        let mut model = synth::chain(&[3, 2], Activation::None, 4, 3);
        model.layers[0].bias.fill(0.0);
        let trace = forward_trace(&model, &model.calibration).unwrap();
        let out = output_with_layer_replaced(&model, &trace, 0, &DMatrix::zeros(2, 3)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replacement_matches_full_reforward() {
        let mut model = synth::chain(&[4, 5, 3], Activation::Relu, 8, 4);
        let trace = forward_trace(&model, &model.calibration).unwrap();
        let perturbed = model.layers[0].weight.map(|v| v * 0.9 + 0.01);
        let out = output_with_layer_replaced(&model, &trace, 0, &perturbed).unwrap();
        model.layers[0].weight = perturbed;
        let oracle = forward_trace(&model, &model.calibration).unwrap().output;
        assert!((out - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = synth::chain(&[6, 5, 4], Activation::Gelu, 10, 5);
        let a = forward_trace(&model, &model.calibration).unwrap().output;
        let b = forward_trace(&model, &model.calibration).unwrap().output;
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn single_layer_hessian_is_input_energy() {
        let model = synth::chain(&[4, 3], Activation::None, 7, 6);
        let h = estimate_hessian_diag(&model, &model.calibration).unwrap();
        for j in 0..4 {
            let expected = model.calibration.column(j).norm_squared().sqrt();
            for i in 0..3 {
                assert!((h[0].c[(i, j)] - expected).abs() < 1e-12 * expected.max(1.0));
            }
        }
    }

    #[test]
    fn zero_calibration_gives_eps_rows() {
        let mut model = synth::chain(&[3, 2], Activation::None, 5, 7);
        model.calibration.fill(0.0);
        let h = estimate_hessian_diag(&model, &model.calibration.clone()).unwrap();
        assert!(h[0].c.iter().all(|&v| v == ZERO_ROW_EPS));
        assert!(h[0].q.iter().all(|&v| (v - 3.0 * ZERO_ROW_EPS).abs() < 1e-20));
    }

    #[test]
    fn empty_calibration_rejected() {
        let model = synth::chain(&[3, 2], Activation::None, 5, 7);
        assert!(matches!(
            estimate_hessian_diag(&model, &DMatrix::zeros(0, 3)),
            Err(Error::EmptyCalibration)
        ));
    }

    /// `½ Σ_n ‖out(W) − out(W0)‖²`, whose curvature at `W0` is the
    /// Gauss–Newton matrix.
    fn half_output_energy(model: &Model, layer: usize, w: &DMatrix<f64>, base: &DMatrix<f64>) -> f64 {
        let trace = forward_trace(model, &model.calibration).unwrap();
        let out = output_with_layer_replaced(model, &trace, layer, w).unwrap();
        0.5 * (out - base).norm_squared()
    }

    #[test]
    fn gauss_newton_matches_finite_differences() {
        let model = synth::chain(&[3, 3, 3], Activation::Gelu, 6, 11);
        let hess = estimate_hessian_diag(&model, &model.calibration).unwrap();
        let base = forward_trace(&model, &model.calibration).unwrap().output;
        let h = 1e-4;
        for (l, hw) in hess.iter().enumerate() {
            let w0 = &model.layers[l].weight;
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = w0.clone();
                    plus[(i, j)] += h;
                    let mut minus = w0.clone();
                    minus[(i, j)] -= h;
                    let second = (half_output_energy(&model, l, &plus, &base)
                        + half_output_energy(&model, l, &minus, &base))
                        / (h * h);
                    let analytic = hw.c[(i, j)].powi(2);
                    let rel = (second - analytic).abs() / analytic.max(1e-12);
                    assert!(rel < 1e-4, "layer {l} ({i},{j}): fd {second} vs {analytic}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn row_sum_bound_holds(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
            let cm = DMatrix::from_fn(r, c, |_, _| rng.random_range(0.0..2.0));
            let e = DMatrix::from_fn(r, c, |_, _| rng.random_range(-3.0..3.0));
            let hw = HessianWeights::from_c(cm).unwrap();
            for i in 0..r {
                prop_assert!((hw.q[i] - hw.c.row(i).sum()).abs() <= 1e-12 * hw.q[i].max(1.0));
            }
            let lhs = hw.c.component_mul(&e).norm_squared();
            let rhs = (DMatrix::from_diagonal(&hw.q) * &e).norm_squared();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }
    }
}
