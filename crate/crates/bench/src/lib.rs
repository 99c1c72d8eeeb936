//! Shared fixtures for the criterion benchmarks in `benches/`.

use moce_core::harness::planted_blobs;
use moce_core::model::{upcycle_init, DenseModel, Example};
use moce_core::rng::substream;
use moce_core::{MoceModel, ModelConfig, RoutingMode, Tensor};
use rand::Rng as _;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, "bench/matrix");
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("matrix shape")
}

/// Upcycled toy model: 2 groups of 4 experts, d_model 32.
pub fn toy_model(mode: RoutingMode, k: usize, variant: bool) -> MoceModel {
    let cfg = ModelConfig {
        vocab_size: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 16,
        rank: 8,
        n_groups: 2,
        n_experts: 4,
        k,
        mode,
        variant,
        seed: 3,
        ..ModelConfig::default()
    };
    upcycle_init(&DenseModel::random(&cfg).expect("dense init"), &cfg).expect("upcycle")
}

pub fn toy_tokens(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, "bench/tokens");
    (0..len).map(|_| rng.gen_range(0..64)).collect()
}

pub fn toy_batch(size: usize, len: usize) -> Vec<Example> {
    (0..size)
        .map(|i| {
            let seq = toy_tokens(len + 1, i as u64);
            Example {
                tokens: seq[..len].to_vec(),
                targets: seq[1..].to_vec(),
                positions: (0..len).collect(),
                group: i % 2,
            }
        })
        .collect()
}

pub fn blob_points(k: usize, n: usize, dim: usize) -> Vec<Vec<f64>> {
    planted_blobs(k, n, dim, 10.0, 7).points
}
