//! Synthetic simulation lab: data generation, multi-round experiments and
//! replication.

mod config;
mod experiment;
mod generate;

pub use config::{desk, paper_full, preset, smoke, ExperimentConfig, GeneratorConfig, SimConfig, PRESETS};
pub use experiment::{
    aggregate, aggregate_csv, replicate, replication_seed, run_experiment, run_replication, AggregateRow,
    Replicated, RoundRecord, RoundTrace,
};
pub use generate::{
    covariate_covariance, gen_confounder, gen_covariates, gen_observational_round, gen_rct_round,
    matern_half_kernel, outcome_features, SimWorld,
};
