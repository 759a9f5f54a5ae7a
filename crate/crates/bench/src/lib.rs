//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use elastic_dit::{DiTConfig, ElasticDit, FlowSample, SynthConfig, SyntheticData, Tensor};

/// Toy-sized model with full-capacity routers.
pub fn toy_model(seed: u64) -> ElasticDit {
    ElasticDit::new(DiTConfig::default(), seed).expect("default config is valid")
}

pub fn toy_batch(size: usize, seed: u64) -> Vec<FlowSample> {
    let data = SyntheticData::new(SynthConfig::default()).expect("default data config is valid");
    data.gen_batch(size, &mut ChaCha8Rng::seed_from_u64(seed))
        .expect("batch size is positive")
}

/// `count` draws of `[rows, cols]` standard normal samples.
pub fn point_cloud(count: usize, rows: usize, cols: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::randn(&[rows, cols], 1.0, &mut rng)).collect()
}
