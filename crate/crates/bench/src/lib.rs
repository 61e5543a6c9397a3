//! Input builders shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedsim_core::cloud::Upload;
use fedsim_core::{Layer, ParamSet};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `clients` uploads of a two-layer model with `width` values per layer.
pub fn uploads(clients: usize, width: usize, seed: u64) -> Vec<Upload> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|k| {
            let layers = (0..2)
                .map(|l| {
                    Layer::new(
                        format!("l{l}"),
                        (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            Upload {
                client_id: k,
                params: ParamSet::new(layers).unwrap(),
                num_samples: rng.random_range(64..=512),
            }
        })
        .collect()
}
