//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mlorq::inter::{
    activation_bit_allocation, candidate_network_nmse, interpolate_metric_table,
    solve_allocation, LayerMetrics, MetricEntry, MetricTable,
};
use mlorq::intra::{
    enumerate_candidates, local_loss, pareto_front, prepare_layer_params, Candidate,
    CandidateKind, CandidateParams, ParetoFront, RankAccumulator,
};
use mlorq::lorada::{optimize_layer, LoRAdaConfig, RoundingState};
use mlorq::lowrank::hessian_weighted_decompose;
use mlorq::netsim::{forward_trace, Activation, HessianWeights};
use mlorq::pipeline::{self, CompressConfig, LayerAnalysis};
use mlorq::quantizer::{
    percentile_params, quantize_uniform, search_params_a, search_params_b, search_params_hmse,
    BitSet, PercentileGrid, QuantParams,
};
use mlorq::{synth, Error};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

/// Reference fake-quantizer, written independently of the library.
fn ref_quantize(x: f64, s: f64, z: i32, bits: u8) -> f64 {
    let qmax = ((1u32 << bits) - 1) as f64;
    let q = (x / s).round() + z as f64;
    s * (q.max(0.0).min(qmax) - z as f64)
}

fn ref_quantize_matrix(m: &DMatrix<f64>, p: &QuantParams) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        ref_quantize(m[(i, j)], p.scales[i], p.zero_points[i], p.bits)
    })
}

/// Singular values by one-sided Jacobi rotations, non-increasing.
fn jacobi_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut a = if m.nrows() >= m.ncols() {
        m.clone()
    } else {
        m.transpose()
    };
    let n = a.ncols();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..a.nrows() {
                    alpha += a[(i, p)] * a[(i, p)];
                    beta += a[(i, q)] * a[(i, q)];
                    gamma += a[(i, p)] * a[(i, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.nrows() {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|k| a.column(k).norm()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Quadratic-time dominance filter with the documented tie order.
fn brute_front(cands: &[Candidate]) -> Vec<(CandidateKind, u64, f64)> {
    let tie = |k: &CandidateKind| match *k {
        CandidateKind::QuantOnly { bits } => (0usize, bits, 0u8, 0u8),
        CandidateKind::LowRank {
            rank,
            bits_a,
            bits_b,
        } => (rank, bits_a, 1, bits_b),
    };
    let mut keep: Vec<&Candidate> = Vec::new();
    for c in cands {
        let dominated = cands.iter().any(|d| {
            d.local_loss <= c.local_loss
                && d.memory_bits <= c.memory_bits
                && (d.local_loss < c.local_loss || d.memory_bits < c.memory_bits)
        });
        let beaten_twin = cands.iter().any(|d| {
            d.local_loss == c.local_loss && d.memory_bits == c.memory_bits && tie(&d.kind) < tie(&c.kind)
        });
        if !dominated && !beaten_twin {
            keep.push(c);
        }
    }
    let mut out: Vec<_> = keep.iter().map(|c| (c.kind, c.memory_bits, c.local_loss)).collect();
    out.sort_by(|x, y| x.1.cmp(&y.1));
    out
}

fn random_positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.05..2.0))
}

// --------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = synth::rng(1001);
    let bitset = BitSet::default();
    let grid = PercentileGrid::default();
    let mut mismatches = 0;
    let mut total = 0;
    for layer in 0..100 {
        let n_out = rng.random_range(1..=32);
        let n_in = rng.random_range(1..=32);
        let w = synth::gaussian(n_out, n_in, 1.0, &mut rng);
        let hw = HessianWeights::from_c(random_positive(n_out, n_in, &mut rng)).unwrap();
        let dec = hessian_weighted_decompose(&w, &hw.q).unwrap();
        let tables = prepare_layer_params(&w, &hw, Some(&dec), &bitset, &grid);
        let cands = enumerate_candidates(layer, &w, Some(&dec), &hw, &tables, &bitset, 1).unwrap();
        total += cands.len();
        let front = pareto_front(cands.clone()).unwrap();
        let got: Vec<_> = front
            .candidates
            .iter()
            .map(|c| (c.kind, c.memory_bits, c.local_loss))
            .collect();
        if got != brute_front(&cands) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatching fronts over 100 layers ({total} candidates), {secs:.2}s"),
    )
}

fn dummy_candidate(layer: usize, index: usize, memory_bits: u64) -> Candidate {
    Candidate {
        layer_index: layer,
        kind: CandidateKind::QuantOnly { bits: 2 + index as u8 },
        params: CandidateParams::QuantOnly(QuantParams::uniform(1, 1.0, 0, 2).unwrap().into()),
        local_loss: 0.0,
        memory_bits,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = synth::rng(1002);
    let mut bad = 0;
    for _ in 0..50 {
        let n_layers = rng.random_range(1..=4);
        let mut fronts = Vec::new();
        let mut layers = Vec::new();
        for l in 0..n_layers {
            let k = rng.random_range(1..=5);
            fronts.push(ParetoFront {
                candidates: (0..k)
                    .map(|i| dummy_candidate(l, i, rng.random_range(1..200)))
                    .collect(),
            });
            layers.push(LayerMetrics {
                entries: (0..k)
                    .map(|_| MetricEntry {
                        phi: rng.random_range(0.0..1.0),
                        interpolated: false,
                    })
                    .collect(),
            });
        }
        let table = MetricTable { layers };
        let min: u64 = fronts.iter().map(|f| f.candidates.iter().map(|c| c.memory_bits).min().unwrap()).sum();
        let max: u64 = fronts.iter().map(|f| f.candidates.iter().map(|c| c.memory_bits).max().unwrap()).sum();
        let budget = rng.random_range(min..=max);

        // exhaustive enumeration
        let mut best = f64::INFINITY;
        let sizes: Vec<usize> = fronts.iter().map(|f| f.len()).collect();
        let combos: usize = sizes.iter().product();
        for mut code in 0..combos {
            let mut mem = 0;
            let mut obj = 0.0;
            for (l, &s) in sizes.iter().enumerate() {
                let k = code % s;
                code /= s;
                mem += fronts[l].candidates[k].memory_bits;
                obj += table.layers[l].entries[k].phi;
            }
            if mem <= budget && obj < best {
                best = obj;
            }
        }
        match solve_allocation(&fronts, &table, budget, 1) {
            Ok(sol) => {
                let exact_mem: u64 = sol.choices.iter().map(|c| c.candidate.memory_bits).sum();
                if (sol.objective - best).abs() > 1e-12 * best.max(1.0)
                    || exact_mem > budget
                    || exact_mem != sol.total_memory_bits
                {
                    bad += 1;
                }
            }
            Err(_) => bad += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 5.0,
        format!("{bad} non-optimal or over-budget instances out of 50, {secs:.2}s"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = synth::rng(1003);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let w = synth::gaussian(16, 12, 1.0, &mut rng);
        let hw = HessianWeights::identity(16, 12);
        let dec = hessian_weighted_decompose(&w, &hw.q).unwrap();
        let sv = jacobi_singular_values(&w);
        let energy = w.norm_squared();
        for r in 1..=12 {
            let residual = local_loss(&w, &dec.reconstruct(r).unwrap(), &hw.c).unwrap();
            let tail: f64 = sv[r..].iter().map(|s| s * s).sum();
            let denom = if r < 12 { tail } else { energy };
            worst = worst.max((residual - tail).abs() / denom);
        }
    }
    outcome(worst <= 1e-8, format!("worst relative deviation {worst:.3e} over 20 matrices x 12 ranks"))
}

fn criterion_4() -> Outcome {
    let mut rng = synth::rng(1004);
    let mut violations = 0;
    for _ in 0..1000 {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let mut c = random_positive(rows, cols, &mut rng);
        // sparse weights exercise the tight (single non-zero) case
        for v in c.iter_mut() {
            if rng.random_bool(0.3) {
                *v = 0.0;
            }
        }
        let hw = HessianWeights::from_c(c).unwrap();
        let e = synth::gaussian(rows, cols, 1.0, &mut rng);
        let lhs = local_loss(&e, &DMatrix::zeros(rows, cols), &hw.c).unwrap();
        let mut rhs = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                rhs += (hw.q[i] * e[(i, j)]).powi(2);
            }
        }
        // summation order may differ by an ulp when the bound is tight
        if lhs > rhs * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations over 1000 pairs"))
}

fn criterion_5() -> Outcome {
    let mut rng = synth::rng(1005);
    let grid = PercentileGrid::default();
    let bitset = BitSet::default();
    let mut violations = Vec::new();
    for trial in 0..150 {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(2..=40);
        let m = synth::gaussian(rows, cols, rng.random_range(0.01..10.0), &mut rng);
        let bits = bitset.as_slice()[rng.random_range(0..bitset.len())];
        let p = grid.points()[rng.random_range(0..grid.points().len())];
        let params = percentile_params(&m, p, bits);

        let q = quantize_uniform(&m, &params);
        if q != ref_quantize_matrix(&m, &params) {
            violations.push(format!("trial {trial}: quantizer differs from reference"));
        }
        if quantize_uniform(&q, &params) != q {
            violations.push(format!("trial {trial}: not idempotent"));
        }
        let qmax = (1i32 << bits) - 1;
        let on_grid = DMatrix::from_fn(rows, cols, |i, _| {
            let k = rng.random_range(0..=qmax);
            params.scales[i] * (k - params.zero_points[i]) as f64
        });
        if quantize_uniform(&on_grid, &params) != on_grid {
            violations.push(format!("trial {trial}: grid point moved"));
        }
        for (i, row) in q.row_iter().enumerate() {
            let distinct: BTreeSet<u64> = row.iter().map(|v| v.to_bits()).collect();
            if distinct.len() > 1 << bits {
                violations.push(format!("trial {trial}: row {i} has {} levels", distinct.len()));
            }
        }

        // grid-search minimality for the three searches
        let c = random_positive(rows, cols, &mut rng);
        let inner = rng.random_range(1..=4);
        let b = synth::gaussian(inner, cols, 1.0, &mut rng);
        let a = synth::gaussian(rows, inner, 1.0, &mut rng);
        let ab = &a * &b;
        let weighted_rows = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> Vec<f64> {
            (0..x.nrows())
                .map(|i| (0..x.ncols()).map(|j| (c[(i, j)] * (x[(i, j)] - y[(i, j)])).powi(2)).sum())
                .collect()
        };
        let plain_rows = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> Vec<f64> {
            (0..x.nrows())
                .map(|i| (0..x.ncols()).map(|j| (x[(i, j)] - y[(i, j)]).powi(2)).sum())
                .collect()
        };
        let checks: Vec<(&str, QuantParams, Box<dyn Fn(&QuantParams) -> Vec<f64>>)> = vec![
            (
                "hmse",
                search_params_hmse(&m, &c, bits, &grid).params,
                Box::new(|p: &QuantParams| weighted_rows(&m, &ref_quantize_matrix(&m, p))),
            ),
            (
                "factor A",
                search_params_a(&a, &b, &c, bits, &grid).params,
                Box::new(|p: &QuantParams| weighted_rows(&ab, &(ref_quantize_matrix(&a, p) * &b))),
            ),
            (
                "factor B",
                search_params_b(&b, bits, &grid).params,
                Box::new(|p: &QuantParams| plain_rows(&b, &ref_quantize_matrix(&b, p))),
            ),
        ];
        for (name, chosen, eval) in checks {
            let chosen_err = eval(&chosen);
            for &pp in grid.points() {
                let target = if name == "factor A" { &a } else if name == "factor B" { &b } else { &m };
                let alt = eval(&percentile_params(target, pp, bits));
                for (i, (&x, &y)) in chosen_err.iter().zip(&alt).enumerate() {
                    if x > y * (1.0 + 1e-12) + 1e-300 {
                        violations.push(format!("trial {trial}: {name} row {i} beaten at p={pp}"));
                    }
                }
            }
        }
    }
    outcome(
        violations.is_empty(),
        match violations.first() {
            None => "0 violations over 150 randomized suites".to_string(),
            Some(v) => format!("{} violations, first: {v}", violations.len()),
        },
    )
}

fn criterion_6() -> Outcome {
    let mut rng = synth::rng(1006);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let n_out = rng.random_range(2..=5);
        let n_in = rng.random_range(2..=4);
        let rank = rng.random_range(1..=3);
        let x = synth::gaussian(8, n_in, 1.0, &mut rng);
        let w = synth::gaussian(n_out, n_in, 1.0, &mut rng);
        let mut state = if inst % 4 == 3 {
            RoundingState::dense(w.clone(), percentile_params(&w, 1.0, 3))
        } else {
            let a = synth::gaussian(n_out, rank, 1.0, &mut rng);
            let b = synth::gaussian(rank, n_in, 1.0, &mut rng);
            RoundingState::factored(
                a.clone(),
                percentile_params(&a, 1.0, 3),
                b.clone(),
                percentile_params(&b, 1.0, 4),
            )
        };
        for f in &mut state.factors {
            f.v = DMatrix::from_fn(f.v.nrows(), f.v.ncols(), |_, _| rng.random_range(-2.0..2.0));
        }
        state.lambda = rng.random_range(0.0..0.5);
        state.beta = rng.random_range(2.0..20.0);
        let t = &x * w.transpose();
        let (_, grads) = state.objective_and_gradient(&x, &t).unwrap();
        let h = 1e-6;
        for k in 0..state.factors.len() {
            let mut fd = DMatrix::zeros(grads[k].nrows(), grads[k].ncols());
            for idx in 0..fd.len() {
                let orig = state.factors[k].v[idx];
                state.factors[k].v[idx] = orig + h;
                let up = state.objective_and_gradient(&x, &t).unwrap().0;
                state.factors[k].v[idx] = orig - h;
                let down = state.objective_and_gradient(&x, &t).unwrap().0;
                state.factors[k].v[idx] = orig;
                fd[idx] = (up - down) / (2.0 * h);
            }
            let rel = (&grads[k] - &fd).norm() / fd.norm().max(1e-12);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-4, format!("worst relative gradient error {worst:.3e} over 20 instances"))
}

fn criterion_7() -> Outcome {
    let mut rng = synth::rng(1007);
    let cfg = LoRAdaConfig {
        iterations: 2000,
        ..Default::default()
    };
    let mut details = Vec::new();
    let mut pass = true;
    for label in ["dense", "rank-4"] {
        let w = synth::gaussian(8, 8, 0.5, &mut rng);
        let x = synth::gaussian(256, 8, 1.0, &mut rng);
        let t = &x * w.transpose();
        let state = if label == "dense" {
            RoundingState::dense(w.clone(), percentile_params(&w, 1.0, 3))
        } else {
            let dec = hessian_weighted_decompose(&w, &DVector::from_element(8, 1.0)).unwrap();
            let (a, b) = dec.truncate(4).unwrap();
            RoundingState::factored(
                a.clone(),
                percentile_params(&a, 1.0, 3),
                b.clone(),
                percentile_params(&b, 1.0, 3),
            )
        };
        let r = optimize_layer(state, &cfg, &x, &t).unwrap();
        pass &= r.saturated_fraction >= 0.99 && r.final_objective <= r.nearest_objective;
        details.push(format!(
            "{label}: saturated {:.4}, hard {:.4e} vs nearest {:.4e}",
            r.saturated_fraction, r.final_objective, r.nearest_objective
        ));
    }
    outcome(pass, details.join("; "))
}

fn criterion_8() -> Outcome {
    // anchors against direct evaluation on a real model
    let model = synth::chain(&[32, 24, 16], Activation::Gelu, 48, 1008);
    let search = pipeline::SearchConfig::default();
    let analyses: Vec<LayerAnalysis> = pipeline::analyze_layers(&model, &search).unwrap();
    let table = pipeline::build_metric_table(&model, &analyses, 3).unwrap();
    let trace = forward_trace(&model, &model.calibration).unwrap();
    let mut anchors = 0;
    let mut interpolated = 0;
    let mut anchor_mismatch = 0;
    for (l, (a, metrics)) in analyses.iter().zip(&table.layers).enumerate() {
        for (c, e) in a.front.candidates.iter().zip(&metrics.entries) {
            if e.interpolated {
                interpolated += 1;
                continue;
            }
            anchors += 1;
            let w = c
                .compressed_weight(&model.layers[l].weight, a.decomposition.as_ref())
                .unwrap();
            let direct = candidate_network_nmse(&model, &trace, l, &w).unwrap();
            if direct.to_bits() != e.phi.to_bits() {
                anchor_mismatch += 1;
            }
        }
    }

    // affine fixture
    let cands: Vec<Candidate> = (1..=30)
        .map(|r| Candidate {
            layer_index: 0,
            kind: CandidateKind::LowRank {
                rank: r,
                bits_a: 4,
                bits_b: 3,
            },
            params: CandidateParams::QuantOnly(QuantParams::uniform(1, 1.0, 0, 2).unwrap().into()),
            local_loss: 50.0 / (r as f64).powf(1.3),
            memory_bits: 37 * r as u64,
        })
        .collect();
    let front = ParetoFront { candidates: cands };
    let affine = |c: &Candidate| -> mlorq::Result<f64> { Ok(0.125 + 0.7 * c.local_loss) };
    let t = interpolate_metric_table(&front, 6, affine).unwrap();
    let worst = front
        .candidates
        .iter()
        .zip(&t.entries)
        .map(|(c, e)| (e.phi - affine(c).unwrap()).abs())
        .fold(0.0, f64::max);

    outcome(
        anchor_mismatch == 0 && interpolated > 0 && worst <= 1e-9,
        format!(
            "{anchor_mismatch}/{anchors} anchors differ from direct evaluation ({interpolated} interpolated); affine max error {worst:.3e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = synth::rng(1009);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n_out = rng.random_range(2..=24);
        let n_in = rng.random_range(2..=24);
        let w = synth::gaussian(n_out, n_in, 1.0, &mut rng);
        let hw = HessianWeights::from_c(random_positive(n_out, n_in, &mut rng)).unwrap();
        let dec = hessian_weighted_decompose(&w, &hw.q).unwrap();
        let qa = quantize_uniform(&dec.a, &percentile_params(&dec.a, 0.999, 4));
        let qb = quantize_uniform(&dec.b, &percentile_params(&dec.b, 1.0, 3));
        let mut acc = RankAccumulator::new(&qa, &qb);
        while let Some(current) = acc.advance() {
            let current = current.clone();
            let rank = acc.rank();
            let direct = DMatrix::from_fn(n_out, n_in, |i, j| {
                (0..rank).map(|k| qa[(i, k)] * qb[(k, j)]).sum::<f64>()
            });
            worst = worst.max((current - direct).abs().max());
        }
    }
    outcome(worst <= 1e-9, format!("worst elementwise deviation {worst:.3e} over 20 layers, all ranks"))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let model = synth::low_rank_chain(64, 512, 64, 32, 0.1, 256, 1010);
    let mut lines = Vec::new();
    let mut pass = true;
    for avg in [2.0, 3.0, 8.0] {
        let mut nmse = [0.0; 2];
        for (slot, quant_only) in [(0, false), (1, true)] {
            let mut cfg = CompressConfig {
                avg_bits: Some(avg),
                ..Default::default()
            };
            cfg.search.rank_stride = 8;
            cfg.search.quant_only = quant_only;
            let result = match pipeline::compress(&model, &cfg) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("avg {avg}: {e}")),
            };
            nmse[slot] = pipeline::evaluate(&model, &result.weights).unwrap().nmse;
        }
        let [joint, quant] = nmse;
        let ok = if avg < 4.0 {
            joint < quant
        } else {
            (joint - quant).abs() <= 0.1 * joint.max(quant)
        };
        pass &= ok;
        lines.push(format!("avg {avg}: joint {joint:.4e} vs quant-only {quant:.4e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    outcome(pass, format!("{}; {secs:.1}s", lines.join("; ")))
}

fn criterion_11() -> Outcome {
    let bits = BitSet::default();
    let sizes = vec![("x1".to_string(), 1000), ("x2".to_string(), 512)];
    let ok_examples = match activation_bit_allocation(&sizes, 4096, &bits) {
        Ok(m) => m["x1"] == 4 && m["x2"] == 8,
        Err(_) => false,
    };
    let infeasible = matches!(
        activation_bit_allocation(&[("x3".to_string(), 3000)], 4096, &bits),
        Err(Error::NoFeasibleBit { .. })
    );
    outcome(
        ok_examples && infeasible,
        format!("closed-form examples {ok_examples}, NoFeasibleBit raised {infeasible}"),
    )
}

fn criterion_12() -> Outcome {
    let model = synth::chain(&[16, 12, 10, 6], Activation::Gelu, 48, 1012);
    let cfg = CompressConfig {
        avg_bits: Some(3.0),
        delta: 8,
        act_budget_bits: Some(4096),
        lorada: Some(LoRAdaConfig {
            iterations: 300,
            seed: 7,
            ..Default::default()
        }),
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let result = pipeline::compress(&model, &cfg).unwrap();
        pipeline::write_artifacts(&result, d.path()).unwrap();
    }
    let mut differing = Vec::new();
    for name in ["solution.txt", "solution.json", "compressed.mlrq", "fronts.csv", "solution.csv"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        if a != b {
            differing.push(name);
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "reports and containers byte-identical across two seeded runs".to_string()
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("pareto front equals brute-force dominance filter", criterion_1),
        ("allocation matches exhaustive optimum within budget", criterion_2),
        ("weighted low-rank residual equals trailing singular energy", criterion_3),
        ("row-sum bound on weighted error", criterion_4),
        ("quantizer contracts and grid-search minimality", criterion_5),
        ("rounding gradient matches central differences", criterion_6),
        ("rounding converges to hard decisions without losing to nearest", criterion_7),
        ("metric anchors exact, affine interpolation exact", criterion_8),
        ("incremental rank accumulation equals direct product", criterion_9),
        ("joint beats quant-only at low bits, ties at 8 bits", criterion_10),
        ("activation bit allocation closed form", criterion_11),
        ("seeded runs are byte-identical", criterion_12),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        writeln!(
            out,
            "{} criterion {:>2}: {name} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        )
        .unwrap();
        out.flush().unwrap();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", criteria.len() - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
