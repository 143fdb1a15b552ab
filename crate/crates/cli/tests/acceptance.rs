//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`cargo test --test acceptance`). Every line reads
//! `[PASS]` or `[FAIL]` with the measured quantities. The process exits
//! non-zero on a failure only when `FUSIONLAB_ACCEPTANCE_STRICT=1`, so the
//! workspace suite still reports the remaining criteria when one is red.
//! `FUSIONLAB_ACCEPTANCE_ONLY=1,4` restricts the run to selected criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fusionlab_core::data::{EstimateState, FeatureMap, InterventionCatalog, LossWeights};
use fusionlab_core::design::Method;
use fusionlab_core::estimators::{observational_estimates, rct_estimate};
use fusionlab_core::fusion::{
    analytic_risk, assemble_sigma, eure_risk, fit_bias, hat_matrix, optimal_lambda, sigma_hat,
    simultaneous_diagonalize,
};
use fusionlab_core::linalg::{quadratic_form, trace_of_product};
use fusionlab_core::rng::stream;
use fusionlab_core::simlab::{
    desk, gen_observational_round, gen_rct_round, replicate, run_experiment, smoke, RoundTrace, SimConfig, SimWorld,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, StudentsT};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(j: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(j, j, |_, _| normal(rng));
    &a * a.transpose() / j as f64 + DMatrix::identity(j, j) * 0.1
}

/// Random fusion instance: `j` interventions with `p_v` attributes, the first
/// `s` randomized, loss weights SPD.
fn instance(j: usize, p_v: usize, s: usize, rng: &mut ChaCha8Rng) -> (EstimateState, InterventionCatalog, LossWeights) {
    let attrs: Vec<Vec<f64>> = (0..j).map(|_| (0..p_v).map(|_| normal(rng)).collect()).collect();
    let catalog = InterventionCatalog::new(attrs, FeatureMap::Identity).unwrap();
    let scale = rng.random_range(0.1..2.0);
    let tau_obs: Vec<f64> = (0..j).map(|_| scale * normal(rng)).collect();
    let tau_rct = (0..j).map(|k| (k < s).then(|| normal(rng))).collect();
    let ups = (0..j).map(|k| (k < s).then(|| rng.random_range(0.05..0.5))).collect();
    let counts = (0..j).map(|k| if k < s { 100 } else { 0 }).collect();
    let gamma = random_spd(j, rng) * rng.random_range(0.01..0.5);
    let d = LossWeights::new(random_spd(j, rng)).unwrap();
    let hist = vec![(0..s).collect::<BTreeSet<usize>>()];
    (EstimateState::new(tau_obs, tau_rct, gamma, ups, counts, hist).unwrap(), catalog, d)
}

fn closed_form_vs_grid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_step, mut worst_identity, mut interior) = (0.0f64, 0.0f64, 0);
    let mut ok = true;
    for _ in 0..100 {
        let s = rng.random_range(3..=10);
        let (state, cat, d) = instance(10, 3, s, &mut rng);
        let fit = fit_bias(&state, &cat).unwrap();
        let sigma = sigma_hat(&state, &fit).unwrap();
        let opt = optimal_lambda(&state, &fit, &sigma, &d).unwrap();
        let mut best = (0.0, f64::INFINITY);
        for i in 0..=10_000 {
            let l = i as f64 * 1e-4;
            let r = eure_risk(&state, &fit, &sigma, l, &d);
            if r < best.1 {
                best = (l, r);
            }
        }
        let gap = (best.0 - opt.lambda_hat).abs();
        worst_step = worst_step.max(gap);
        ok &= gap <= 1e-4 + 1e-12;
        if (0.0..=1.0).contains(&opt.raw) {
            interior += 1;
            let dm = d.matrix();
            let tr = trace_of_product(dm, &sigma);
            let eye = DMatrix::identity(10, 10);
            let num = trace_of_product(dm, &(state.gamma_hat() * (eye - &fit.hat_matrix).transpose())) - tr;
            let den = quadratic_form(dm, &fit.fitted_bias);
            let dev = (eure_risk(&state, &fit, &sigma, opt.raw, &d) - (tr - num * num / den)).abs();
            worst_identity = worst_identity.max(dev);
            ok &= dev < 1e-10;
        }
    }
    outcome(
        ok,
        format!("max |grid - closed form| {worst_step:.1e}; {interior} interior optima, max identity error {worst_identity:.1e}"),
    )
}

fn risk_monte_carlo() -> Outcome {
    const J: usize = 6;
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let psi = DMatrix::from_fn(J, 2, |_, c| if c == 0 { 1.0 } else { normal(&mut rng) });
        let support: Vec<usize> = (0..4).collect();
        let hat = hat_matrix(&psi, &support).unwrap();
        let gamma = random_spd(J, &mut rng) * 0.3;
        let ups: Vec<f64> = (0..J).map(|k| if k < 4 { rng.random_range(0.05..0.5) } else { 0.0 }).collect();
        let sigma = assemble_sigma(&gamma, &hat, &ups);
        let d = LossWeights::new(random_spd(J, &mut rng)).unwrap();
        let bias = &psi * DVector::from_vec(vec![normal(&mut rng), normal(&mut rng)]);
        let lambda = rng.random_range(0.0..1.0);
        let analytic = analytic_risk(&d, &sigma, &gamma, &hat, lambda, &bias).unwrap();

        let lg = gamma.clone().cholesky().unwrap().l();
        let eye = DMatrix::<f64>::identity(J, J);
        let mut total = 0.0;
        for _ in 0..DRAWS {
            let z = DVector::from_fn(J, |_, _| normal(&mut rng));
            // Errors relative to the target effects, which cancel.
            let obs_err = &bias + &lg * z;
            let rct_err = DVector::from_fn(J, |k, _| ups[k].sqrt() * normal(&mut rng));
            let debiased = (&eye - &hat) * &obs_err + &hat * rct_err;
            let err = &obs_err * lambda + debiased * (1.0 - lambda);
            total += quadratic_form(d.matrix(), &err);
        }
        let empirical = total / DRAWS as f64 / J as f64;
        worst = worst.max((empirical - analytic).abs() / analytic);
    }
    outcome(worst < 0.02, format!("max relative error {:.3}% over 10 triples", 100.0 * worst))
}

fn diagonalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut e1, mut e2, mut e3) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let sigma = random_spd(8, &mut rng);
        let d = random_spd(8, &mut rng);
        let p = simultaneous_diagonalize(&sigma, &d).unwrap();
        let w = &p.omega;
        let wi = w.clone().try_inverse().unwrap();
        e1 = e1.max((w * &sigma * w.transpose() - DMatrix::<f64>::identity(8, 8)).amax());
        e2 = e2.max((wi.transpose() * &d * &wi - DMatrix::from_diagonal(&p.lambda_diag)).amax());
        e3 = e3.max((p.lambda_diag.sum() - trace_of_product(&d, &sigma)).abs());
    }
    outcome(
        e1 < 1e-8 && e2 < 1e-8 && e3 < 1e-8,
        format!("whitening {e1:.1e}, weight diagonal {e2:.1e}, trace {e3:.1e}"),
    )
}

fn unconfounded(j: usize) -> SimConfig {
    let mut cfg = smoke();
    cfg.experiment.interventions = j;
    // No unobserved confounding: U reaches neither assignment nor outcome.
    cfg.generator.confounder_loading = 0.0;
    cfg.generator.confounder_coef = 0.0;
    cfg
}

fn estimator_sanity() -> Outcome {
    let j = 6;
    let cfg = unconfounded(j);

    let world = SimWorld::new(&cfg, &mut stream(404, &[0])).unwrap();
    let big = gen_observational_round(&cfg, &world, 1, 20_000, &mut stream(404, &[1])).unwrap();
    let dr = observational_estimates(&[big], &cfg.estimator).unwrap();
    let worst_dr = dr.tau.iter().zip(&world.tau_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let max_se = (0..j).map(|k| dr.gamma[(k, k)].sqrt()).fold(0.0, f64::max);

    let (mut covered, mut total) = (0usize, 0usize);
    for rep in 0..500u64 {
        let obs = gen_observational_round(&cfg, &world, 1, 2_000, &mut stream(405, &[rep])).unwrap();
        let est = observational_estimates(&[obs], &cfg.estimator).unwrap();
        for k in 0..j {
            let half = 1.959_964 * est.gamma[(k, k)].sqrt();
            covered += usize::from((est.tau[k] - world.tau_star[k]).abs() <= half);
            total += 1;
        }
    }
    let coverage = covered as f64 / total as f64;

    let selected: BTreeSet<usize> = (0..j).collect();
    let mut sums = vec![(0.0, 0.0); j];
    for rep in 0..1000u64 {
        let round = gen_rct_round(&cfg, &world, 1, &selected, 1_200, &mut stream(406, &[rep])).unwrap();
        for (k, s) in sums.iter_mut().enumerate() {
            let t = rct_estimate(std::slice::from_ref(&round), k).unwrap().tau;
            s.0 += t;
            s.1 += t * t;
        }
    }
    let worst_z = sums
        .iter()
        .zip(&world.tau_star)
        .map(|(&(s, ss), &t)| {
            let mean = s / 1000.0;
            let se = ((ss / 1000.0 - mean * mean) * 1000.0 / 999.0 / 1000.0).sqrt();
            ((mean - t) / se).abs()
        })
        .fold(0.0, f64::max);

    outcome(
        worst_dr < 0.05 && (0.90..=0.98).contains(&coverage) && worst_z < 3.0,
        format!(
            "max |DR - tau*| {worst_dr:.4} at N=20000 (max SE {max_se:.4}); CI coverage {:.1}% ({covered}/{total}); max RCT |z| {worst_z:.2}",
            100.0 * coverage
        ),
    )
}

fn desk_run() -> Vec<RoundTrace> {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    replicate(&desk(), &[Method::Random, Method::Dopt, Method::Thompson], jobs)
        .expect("desk run")
        .traces
}

fn curve_shape(traces: &[RoundTrace]) -> Outcome {
    let rounds = traces[0].rounds.len();
    let (mut worst_sd, mut worst_min) = (0.0f64, 0.0f64);
    for t in traces {
        for r in &t.rounds {
            let curve: Vec<f64> = (0..=100).map(|i| r.terms.eval(i as f64 / 100.0)).collect();
            let sd0 = curve[2] - 2.0 * curve[1] + curve[0];
            for w in curve.windows(3) {
                worst_sd = worst_sd.max((w[2] - 2.0 * w[1] + w[0] - sd0).abs());
            }
            let grid_min = curve.iter().copied().fold(f64::INFINITY, f64::min);
            worst_min = worst_min.max(r.terms.eval(r.lambda_hat) - grid_min);
        }
    }
    let mean_lambda = |m: usize| traces.iter().map(|t| t.rounds[m].lambda_hat).sum::<f64>() / traces.len() as f64;
    let (first, last) = (mean_lambda(0), mean_lambda(rounds - 1));
    outcome(
        worst_sd < 1e-10 && worst_min <= 1e-12 && last < first,
        format!(
            "second-difference spread {worst_sd:.1e}; lambda-hat excess over grid minimum {worst_min:.1e}; mean lambda-hat {first:.3} -> {last:.3}"
        ),
    )
}

fn final_losses(traces: &[RoundTrace], m: Method) -> Vec<f64> {
    traces.iter().filter(|t| t.method == m).map(RoundTrace::final_cum_loss).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ordering(traces: &[RoundTrace]) -> Outcome {
    let thompson = final_losses(traces, Method::Thompson);
    let random = final_losses(traces, Method::Random);
    let dopt = final_losses(traces, Method::Dopt);
    let diff: Vec<f64> = random.iter().zip(&thompson).map(|(r, t)| r - t).collect();
    let n = diff.len() as f64;
    let md = mean(&diff);
    let sd = (diff.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = md / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    let (mt, mr, md_) = (mean(&thompson), mean(&random), mean(&dopt));
    outcome(
        p < 0.05 && mt <= md_,
        format!(
            "final cumulative risk thompson {mt:.2}, random {mr:.2}, dopt-r {md_:.2}; thompson < random p = {p:.2e}; thompson <= dopt-r {}",
            if mt <= md_ { "holds" } else { "fails" }
        ),
    )
}

fn thompson_coverage() -> Outcome {
    let mut cfg = smoke();
    let e = &mut cfg.experiment;
    e.interventions = 20;
    e.rounds = 200;
    e.batch = 1;
    e.obs_size = 100;
    e.rct_size = 100;
    e.seed = 7;
    let trace = run_experiment(&cfg, Method::Thompson, 0).unwrap();
    let last = trace.rounds.last().unwrap();
    let missing: Vec<usize> = (0..20).filter(|&k| last.r_counts[k] == 0).map(|k| k + 1).collect();
    outcome(missing.is_empty(), format!("{} of 20 interventions randomized; missing {missing:?}", 20 - missing.len()))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let trees: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let status = Command::new(env!("CARGO_BIN_EXE_fusionlab"))
                .args(["simulate", "--preset", "smoke", "--seed", "7", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
            tree_bytes(&out)
        })
        .collect();
    outcome(trees[0] == trees[1], format!("{} files compared", trees[0].len()))
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("FUSIONLAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("FUSIONLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));

    let mut desk_traces: Option<Vec<RoundTrace>> = None;
    let mut desk = || -> Vec<RoundTrace> { desk_traces.get_or_insert_with(desk_run).clone() };

    let mut failed = 0;
    let mut report = |c: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(c) {
            return;
        }
        let t0 = Instant::now();
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {c}. {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    };
    report(1, "closed-form shrinkage factor vs grid", &mut closed_form_vs_grid);
    report(2, "analytic risk vs Monte Carlo", &mut risk_monte_carlo);
    report(3, "simultaneous diagonalization", &mut diagonalization);
    report(4, "estimator sanity", &mut estimator_sanity);
    report(5, "risk curve shape and shrinkage trend (desk)", &mut || curve_shape(&desk()));
    report(6, "selector ordering (desk)", &mut || ordering(&desk()));
    report(7, "thompson reaches every intervention", &mut thompson_coverage);
    if wanted(8) {
        println!("[N/A] 8. field results on proprietary data are not reproducible and have no check");
    }
    report(9, "simulate output is byte-identical across runs", &mut determinism);

    println!("acceptance: {failed} failing");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
