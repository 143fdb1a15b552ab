//! Shared fixtures for the criterion benchmarks.

use std::collections::BTreeSet;

use fusionlab_core::data::{EstimateState, FeatureMap, InterventionCatalog, LossWeights, ObservationalRound, RctRound};
use fusionlab_core::rng::stream;
use fusionlab_core::simlab::{desk, gen_observational_round, gen_rct_round, SimConfig, SimWorld};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Estimate state over `j` interventions with `p_v` linear attributes, the
/// first `s` randomized.
pub fn fusion_instance(j: usize, p_v: usize, s: usize, seed: u64) -> (EstimateState, InterventionCatalog, LossWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || rng.random_range(-1.0..1.0);
    let attrs: Vec<Vec<f64>> = (0..j).map(|_| (0..p_v).map(|_| unit()).collect()).collect();
    let catalog = InterventionCatalog::new(attrs, FeatureMap::Linear).expect("catalog");
    let tau_obs: Vec<f64> = (0..j).map(|_| unit() - 1.0).collect();
    let tau_rct = (0..j).map(|k| (k < s).then(&mut unit)).collect();
    let ups = (0..j).map(|k| (k < s).then(|| 0.1 + 0.1 * unit().abs())).collect();
    let counts = (0..j).map(|k| if k < s { 200 } else { 0 }).collect();
    let a = DMatrix::from_fn(j, j, |_, _| unit());
    let gamma = (&a * a.transpose()) * (0.01 / j as f64) + DMatrix::identity(j, j) * 0.01;
    let history = vec![(0..s).collect::<BTreeSet<usize>>()];
    let state = EstimateState::new(tau_obs, tau_rct, gamma, ups, counts, history).expect("state");
    (state, catalog, LossWeights::scaled_identity(j))
}

/// Desk-scale configuration with `j` interventions.
pub fn config(j: usize) -> SimConfig {
    let mut cfg = desk();
    cfg.experiment.interventions = j;
    cfg
}

/// One observational round of `n` units and one randomized round of `l` units
/// on the first `s` interventions.
pub fn simulated_rounds(cfg: &SimConfig, n: usize, l: usize, s: usize, seed: u64) -> (ObservationalRound, RctRound) {
    let world = SimWorld::new(cfg, &mut stream(seed, &[0])).expect("world");
    let obs = gen_observational_round(cfg, &world, 1, n, &mut stream(seed, &[1])).expect("observational round");
    let sel: BTreeSet<usize> = (0..s).collect();
    let rct = gen_rct_round(cfg, &world, 1, &sel, l, &mut stream(seed, &[2])).expect("randomized round");
    (obs, rct)
}
