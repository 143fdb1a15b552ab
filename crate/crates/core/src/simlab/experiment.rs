//! Multi-round experiments and replication.
//!
//! Within a replication every selector sees the same world, the same
//! observational rounds and the same initial randomized set, so methods are
//! compared on common random numbers. Observational estimates do not depend
//! on the selector and are computed once per round.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::config::SimConfig;
use super::generate::{gen_observational_round, gen_rct_round, SimWorld};
use crate::data::{weighted_loss, LossWeights, RctRound};
use crate::design::{select, DesignContext, Hyperparams, Method, SelectionDecision};
use crate::error::{Error, Result};
use crate::estimators::{combine, observational_estimates, DrEstimates};
use crate::fusion::{fuse, RiskTerms};
use crate::output::format_indices;
use crate::rng::{derive_seed, stream};

const WORLD: u64 = 1;
const INITIAL: u64 = 2;
const RCT: u64 = 3;
const SELECT: u64 = 4;
const OBS: u64 = 5;

/// Outcome of one round for one selector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda_hat: f64,
    pub eure: f64,
    pub oracle_loss: f64,
    pub cum_loss: f64,
    /// Interventions randomized in this round.
    pub chosen: BTreeSet<usize>,
    /// Pooled randomized records per intervention after this round.
    pub r_counts: Vec<usize>,
    pub terms: RiskTerms,
    /// Choice of the next round's set; `None` after the last round.
    pub decision: Option<SelectionDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub method: Method,
    pub replication: usize,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
}

impl RoundTrace {
    pub fn final_cum_loss(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.cum_loss)
    }

    /// `round,lambda_hat,eure,oracle_loss,cum_loss,chosen` with 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,lambda_hat,eure,oracle_loss,cum_loss,chosen\n");
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.round,
                r.lambda_hat,
                r.eure,
                r.oracle_loss,
                r.cum_loss,
                format_indices(&r.chosen)
            );
        }
        s
    }

    /// `round,trace,quad,cross`: the coefficients of each round's risk curve.
    pub fn terms_csv(&self) -> String {
        let mut s = String::from("round,trace,quad,cross\n");
        for r in &self.rounds {
            let _ = writeln!(s, "{},{},{},{}", r.round, r.terms.trace, r.terms.quad, r.terms.cross);
        }
        s
    }

    /// `round,r_1..r_J`.
    pub fn counts_csv(&self) -> String {
        let j = self.rounds.first().map_or(0, |r| r.r_counts.len());
        let mut s = String::from("round");
        for k in 1..=j {
            let _ = write!(s, ",r_{k}");
        }
        s.push('\n');
        for r in &self.rounds {
            s.push_str(&r.round.to_string());
            for c in &r.r_counts {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    /// Selection log; the row for round `m` holds the set chosen for `m + 1`.
    pub fn decisions_csv(&self) -> String {
        let j = self.rounds.first().map_or(0, |r| r.r_counts.len());
        let mut s = SelectionDecision::log_header(j);
        s.push('\n');
        for r in &self.rounds {
            if let Some(d) = &r.decision {
                s.push_str(&d.log_row(r.round));
                s.push('\n');
            }
        }
        s
    }
}

/// Seed of replication `rep` (0-based).
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, &[rep as u64])
}

/// Runs every method in `methods` on replication `rep`.
pub fn run_replication(cfg: &SimConfig, methods: &[Method], rep: usize) -> Result<Vec<RoundTrace>> {
    let seed = replication_seed(cfg.experiment.seed, rep);
    run_seeded(cfg, methods, rep, seed).map_err(|e| Error::Replication {
        replication: rep + 1,
        seed,
        source: Box::new(e),
    })
}

fn run_seeded(cfg: &SimConfig, methods: &[Method], rep: usize, seed: u64) -> Result<Vec<RoundTrace>> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let world = SimWorld::new(cfg, &mut stream(seed, &[WORLD]))?;

    let mut obs = Vec::with_capacity(e.rounds);
    let mut dr: Vec<DrEstimates> = Vec::with_capacity(e.rounds);
    for m in 1..=e.rounds {
        let round = gen_observational_round(cfg, &world, m, e.obs_size, &mut stream(seed, &[OBS, m as u64]))
            .map_err(|err| err.in_round(m))?;
        obs.push(round);
        dr.push(observational_estimates(&obs, &cfg.estimator).map_err(|err| err.in_round(m))?);
    }

    let initial: BTreeSet<usize> = sample(&mut stream(seed, &[INITIAL]), e.interventions, e.initial_rct)
        .into_iter()
        .collect();
    methods
        .iter()
        .map(|&method| {
            let rounds = run_rounds(cfg, &world, &dr, &initial, method, seed)?;
            Ok(RoundTrace {
                method,
                replication: rep,
                seed,
                rounds,
            })
        })
        .collect()
}

fn run_rounds(
    cfg: &SimConfig,
    world: &SimWorld,
    dr: &[DrEstimates],
    initial: &BTreeSet<usize>,
    method: Method,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    let e = &cfg.experiment;
    let weights = LossWeights::scaled_identity(e.interventions);
    let l_next = cfg.per_arm_records(e.batch);
    let mut rct: Vec<RctRound> = Vec::with_capacity(e.rounds);
    let mut records = Vec::with_capacity(e.rounds);
    let mut next = initial.clone();
    let mut hyper: Option<Hyperparams> = None;
    let mut cum = 0.0;
    for m in 1..=e.rounds {
        let chosen = std::mem::take(&mut next);
        let mut step = || -> Result<RoundRecord> {
            let round = gen_rct_round(cfg, world, m, &chosen, e.rct_size, &mut stream(seed, &[RCT, m as u64]))?;
            rct.push(round);
            let state = combine(&dr[m - 1], &rct)?;
            let fusion = fuse(&state, &world.catalog, &weights)?;
            let oracle_loss = weighted_loss(fusion.tau_shrunk.as_slice(), &world.tau_star, &weights)?;
            let decision = if m < e.rounds {
                let h = match hyper {
                    Some(h) => h,
                    None if e.calibrate_prior => cfg.design.calibrated(&state)?,
                    None => cfg.design,
                };
                hyper = Some(h);
                let ctx = DesignContext {
                    state: &state,
                    design: world.catalog.design(),
                    fusion: &fusion,
                    weights: &weights,
                    quadratic: h.quadratic,
                };
                Some(select(
                    method,
                    &ctx,
                    &h,
                    e.batch,
                    l_next,
                    derive_seed(seed, &[SELECT, m as u64]),
                    &state.ever_selected(),
                    e.without_replacement,
                )?)
            } else {
                None
            };
            cum += oracle_loss;
            Ok(RoundRecord {
                round: m,
                lambda_hat: fusion.lambda_hat,
                eure: fusion.eure,
                oracle_loss,
                cum_loss: cum,
                chosen: chosen.clone(),
                r_counts: state.r_counts().to_vec(),
                terms: fusion.terms,
                decision,
            })
        };
        let record = step().map_err(|err| err.in_round(m))?;
        if let Some(d) = &record.decision {
            next = d.chosen.clone();
        }
        records.push(record);
    }
    Ok(records)
}

/// One method on replication `rep` (0-based).
pub fn run_experiment(cfg: &SimConfig, method: Method, rep: usize) -> Result<RoundTrace> {
    Ok(run_replication(cfg, &[method], rep)?.remove(0))
}

/// Mean and standard error of the cumulative loss for one method and round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub round: usize,
    pub method: Method,
    pub mean_cum_loss: f64,
    pub se_cum_loss: f64,
    pub mean_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicated {
    /// Ordered by replication, then by the order of the requested methods.
    pub traces: Vec<RoundTrace>,
    pub aggregate: Vec<AggregateRow>,
}

impl Replicated {
    pub fn traces_for(&self, method: Method) -> impl Iterator<Item = &RoundTrace> {
        self.traces.iter().filter(move |t| t.method == method)
    }
}

/// Runs `cfg.experiment.replications` replications of every method on
/// `jobs` worker threads. Output does not depend on `jobs`.
pub fn replicate(cfg: &SimConfig, methods: &[Method], jobs: usize) -> Result<Replicated> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Validation("no selection method given".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<RoundTrace>> = pool.install(|| {
        (0..cfg.experiment.replications)
            .into_par_iter()
            .map(|rep| run_replication(cfg, methods, rep))
            .collect::<Result<_>>()
    })?;
    let traces: Vec<RoundTrace> = per_rep.into_iter().flatten().collect();
    let aggregate = aggregate(&traces, methods, cfg.experiment.rounds);
    Ok(Replicated { traces, aggregate })
}

/// Per-round, per-method mean and standard error across replications.
pub fn aggregate(traces: &[RoundTrace], methods: &[Method], rounds: usize) -> Vec<AggregateRow> {
    let mut out = Vec::with_capacity(rounds * methods.len());
    for m in 0..rounds {
        for &method in methods {
            let rows: Vec<&RoundRecord> = traces
                .iter()
                .filter(|t| t.method == method)
                .filter_map(|t| t.rounds.get(m))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.cum_loss).sum::<f64>() / n;
            let se = if rows.len() > 1 {
                let var = rows.iter().map(|r| (r.cum_loss - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            out.push(AggregateRow {
                round: m + 1,
                method,
                mean_cum_loss: mean,
                se_cum_loss: se,
                mean_lambda: rows.iter().map(|r| r.lambda_hat).sum::<f64>() / n,
            });
        }
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("round,selector,mean_cum_loss,se_cum_loss,mean_lambda\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.round, r.method, r.mean_cum_loss, r.se_cum_loss, r.mean_lambda
        );
    }
    s
}
