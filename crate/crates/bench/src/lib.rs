//! Shared fixtures for the benchmarks.

use moe_core::experiment::{generate_seed_data, ExperimentConfig, SeedData};
use moe_core::training::{init_model, NoiseMatrix};
use moe_core::{MoeModel, RoutingNoise, SeedStreams, Stream};

/// Setting-1 data with `n` training examples and a freshly initialized
/// M = 8, J = 16 cubic model.
pub fn setting1(n: usize) -> (SeedData, MoeModel) {
    let mut config = ExperimentConfig::preset("setting1").expect("preset");
    config.data.n = n;
    config.run.test_n = Some(n);
    config.train.sigma0 = 0.2;
    let data = generate_seed_data(&config, 0).expect("data");
    let model = init_model(&config.arch, config.data.d, config.train.sigma0, &SeedStreams::new(0)).expect("model");
    (data, model)
}

pub fn noise(n: usize, m: usize) -> NoiseMatrix {
    NoiseMatrix::sample(n, m, RoutingNoise::Uniform01, &mut SeedStreams::new(1).rng(Stream::RoutingNoise))
}
