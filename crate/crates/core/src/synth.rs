//! Seeded synthetic models for tests, benchmarks and demos.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::netsim::Activation;
use crate::store::{Layer, LayerSpec, Model};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal matrix scaled by `scale`, rounded through f32 so a saved
/// and reloaded model is bit-identical to the in-memory one.
pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        f64::from((v * scale) as f32)
    })
}

fn layer(name: String, weight: DMatrix<f64>, bias: DVector<f64>, act: Activation) -> Layer {
    Layer {
        spec: LayerSpec {
            weight_ref: format!("{name}.weight"),
            bias_ref: Some(format!("{name}.bias")),
            name,
            in_features: weight.ncols(),
            out_features: weight.nrows(),
            activation_after: act,
            compressible: true,
        },
        weight,
        bias,
    }
}

/// Random chain with widths `dims` (`dims[0]` is the input width), the given
/// activation after every layer but the last, and `n_samples` calibration rows.
pub fn chain(dims: &[usize], act: Activation, n_samples: usize, seed: u64) -> Model {
    assert!(dims.len() >= 2);
    let mut rng = rng(seed);
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let weight = gaussian(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), &mut rng);
            let bias = DVector::from_iterator(w[1], gaussian(w[1], 1, 0.1, &mut rng).iter().copied());
            let a = if i + 1 == n_layers { Activation::None } else { act };
            layer(format!("fc{i}"), weight, bias, a)
        })
        .collect::<Vec<_>>();
    let calibration = gaussian(n_samples, dims[0], 1.0, &mut rng);
    Model {
        name: format!("synthetic-chain-{seed}"),
        hessians: vec![None; layers.len()],
        layers,
        calibration,
    }
}

/// Three-layer model `d_in -> width -> width -> d_out` whose middle weight is
/// a rank-`rank` product plus Gaussian noise of relative size `noise`.
pub fn low_rank_chain(
    d_in: usize,
    width: usize,
    d_out: usize,
    rank: usize,
    noise: f64,
    n_samples: usize,
    seed: u64,
) -> Model {
    let mut model = chain(&[d_in, width, width, d_out], Activation::Gelu, n_samples, seed);
    let mut rng = rng(seed ^ 0x5eed);
    let left = gaussian(width, rank, 1.0, &mut rng);
    let right = gaussian(rank, width, 1.0, &mut rng);
    // Entries of left*right have variance `rank`; normalise to unit-gain rows.
    let scale = 1.0 / ((rank * width) as f64).sqrt();
    let signal = (left * right) * scale;
    let noise_m = gaussian(width, width, noise / (width as f64).sqrt(), &mut rng);
    model.layers[1].weight = (signal + noise_m).map(|v| f64::from(v as f32));
    model.name = format!("synthetic-low-rank-{seed}");
    model
}
