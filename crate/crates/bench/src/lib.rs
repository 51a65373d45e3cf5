//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsmt_core::model::{ModelConfig, ModelState};
use zsmt_core::Tensor;

pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(dims, data).expect("consistent dims")
}

/// The experiment-scale model used by the training benchmarks.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 3,
        dec_layers: 2,
        d_model: 56,
        enc_ffn: 112,
        dec_ffn: 112,
        heads: 4,
        pde_enabled: false,
        pde_layer: 2,
        dropout: 0.1,
        vocab_size: 304,
        max_positions: 64,
        n_target_langs: 1,
    }
}

pub fn bench_model(seed: u64) -> ModelState {
    ModelState::init(&bench_config(), seed, None).expect("valid config")
}
