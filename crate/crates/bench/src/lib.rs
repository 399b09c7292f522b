//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcr_core::data::{generate_synthetic, slice_windows};
use vcr_core::diffusion::{DiffusionConfig, DiffusionModel};
use vcr_core::{ParameterStore, StateWindow, SyntheticConfig, WindowConfig};

/// Canonicalized windows from a small seeded synthetic corpus.
pub fn windows(count: usize) -> Vec<StateWindow> {
    let records = generate_synthetic(&SyntheticConfig {
        n_trajectories: count.div_ceil(18).max(1),
        length: 200,
        seed: 7,
        ..Default::default()
    })
    .expect("default synthetic config is valid");
    let mut out: Vec<StateWindow> = records
        .iter()
        .flat_map(|r| slice_windows(r, &WindowConfig::default()).expect("valid record"))
        .collect();
    out.truncate(count);
    out
}

/// The default diffusion model with freshly initialized weights.
pub fn diffusion() -> (DiffusionModel, ParameterStore) {
    let model = DiffusionModel::new(DiffusionConfig::default()).expect("default config is valid");
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
    (model, store)
}
