//! Acceptance gate: ten end-to-end criteria with pinned tolerances. Each
//! test prints exactly one `[PASS]`/`[FAIL]` line for its criterion; a
//! failed assertion carries the same detail string.
//!
//! All randomness is seeded, so every number below is reproducible.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use oms::allocation::estimate_oracle_simplex;
use oms::gmm::{two_step_estimate, MomentLog};
use oms::inference::Interval;
use oms::nuisance::{NuisanceConfig, NuisanceKind};
use oms::policies::{run_policy, EpsilonSchedule, Horizon, Policy, RunConfig, Trajectory};
use oms::rng::{derive_rng, source_stream};
use oms::sources::{build_scenario, oracle_nuisance, ScenarioConfig, FAMILIES};
use oms::variance::{build_surface, oracle_surface, variance_at, VarianceSurface};
use oms::{Scenario, SimplexPoint};

fn report(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn build(family: &str) -> Scenario {
    build_scenario(&ScenarioConfig::family(family)).unwrap()
}

/// Runs `runs` seeded replications of one configuration, reducing each
/// trajectory to whatever the criterion needs.
fn replicate<T, F>(scenario: &Scenario, base: &RunConfig, runs: u64, reduce: F) -> Vec<T>
where
    F: Fn(Trajectory) -> T + Sync,
    T: Send,
{
    (0..runs)
        .into_par_iter()
        .map(|run_id| {
            let mut config = base.clone();
            config.run_id = run_id;
            reduce(run_policy(scenario, &config).unwrap())
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mse(betas: &[f64], truth: f64) -> f64 {
    betas.iter().map(|b| (b - truth).powi(2)).sum::<f64>() / betas.len() as f64
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// The plug-in sandwich computed directly from the averaged matrices,
/// bypassing the reweighting machinery.
fn direct_sandwich(surface: &VarianceSurface) -> f64 {
    let chol = surface.omega_hat.clone().cholesky().unwrap();
    let winv_g = chol.solve(&surface.g_hat);
    let bracket = surface.g_hat.transpose() * winv_g;
    let bread = bracket.try_inverse().unwrap();
    let grad = DVector::from_column_slice(&surface.grad_f);
    (grad.transpose() * bread * grad)[(0, 0)]
}

fn fill_log(scenario: &Scenario, per_source: &[usize], seed: u64) -> MomentLog {
    let mut log = MomentLog::new(scenario.num_sources());
    log.push_snapshot(oracle_nuisance(scenario).unwrap());
    let mut rngs: Vec<_> = (0..scenario.num_sources())
        .map(|d| derive_rng(seed, 0, source_stream(d)))
        .collect();
    let mut remaining = per_source.to_vec();
    while remaining.iter().any(|r| *r > 0) {
        for d in 0..remaining.len() {
            if remaining[d] > 0 {
                let sample = scenario.query(d, &mut rngs[d]).unwrap();
                log.record(d, sample);
                remaining[d] -= 1;
            }
        }
    }
    log
}

/// Criterion 1 — the treated/control allocation oracle: with outcome spreads
/// 2 and 1 the optimal split is (2/3, 1/3) with minimal variance 9, and the
/// whole computation is sub-second.
#[test]
fn criterion_01_neyman_oracle() {
    let start = Instant::now();
    let scenario = build("neyman_allocation");
    let surface = oracle_surface(&scenario, 0, 0).unwrap();
    let kappa = estimate_oracle_simplex(&surface, 1e-5).unwrap();
    let v_star = variance_at(&surface, &kappa);
    let elapsed = start.elapsed();

    let kappa_ok = (kappa[0] - 2.0 / 3.0).abs() <= 1e-3 && (kappa[1] - 1.0 / 3.0).abs() <= 1e-3;
    let v_ok = (v_star - 9.0).abs() <= 0.005 * 9.0;
    let fast = elapsed.as_secs_f64() < 1.0;
    report(
        "criterion 1 (allocation oracle)",
        kappa_ok && v_ok && fast,
        &format!(
            "kappa=({:.4}, {:.4}) vs (0.6667, 0.3333), V*={v_star:.4} vs 9 ± 0.5%, {} ms",
            kappa[0],
            kappa[1],
            elapsed.as_millis()
        ),
    );
}

/// Criterion 2 — estimator equivalence: on split-sample linear IV data the
/// two-step GMM solution equals the closed-form two-stage least squares
/// estimate coordinate by coordinate.
#[test]
fn criterion_02_gmm_matches_split_sample_2sls() {
    let start = Instant::now();
    let scenario = build("two_sample_iv");
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let log = fill_log(&scenario, &[500, 500], 9000 + seed);
        let (mut szx, mut szz_x, mut szy, mut szz_y) = (0.0, 0.0, 0.0, 0.0);
        for rec in log.records() {
            let z = rec.sample.get("Z").unwrap();
            if rec.source == 0 {
                szx += z * rec.sample.get("X").unwrap();
                szz_x += z * z;
            } else {
                szy += z * rec.sample.get("Y").unwrap();
                szz_y += z * z;
            }
        }
        let alpha_2sls = szx / szz_x;
        let beta_2sls = (szy / szz_y) / alpha_2sls;

        let fit = two_step_estimate(&log, &scenario.model, None).unwrap();
        worst = worst
            .max((fit.theta[0] - beta_2sls).abs())
            .max((fit.theta[1] - alpha_2sls).abs());
    }
    let elapsed = start.elapsed();
    report(
        "criterion 2 (GMM = split-sample 2SLS)",
        worst <= 1e-8 && elapsed.as_secs_f64() < 10.0,
        &format!(
            "worst coordinate gap {worst:.2e} over 100 seeds (limit 1e-8), {} ms",
            elapsed.as_millis()
        ),
    );
}

/// Criterion 3 — reweighting identity: evaluating the off-policy variance
/// surface at the log's own allocation reproduces the direct plug-in
/// sandwich, for random logs from every built-in family.
#[test]
fn criterion_03_reweighting_identity() {
    let scenarios: Vec<Scenario> = FAMILIES.iter().map(|f| build(f)).collect();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let scenario = &scenarios[(i % 6) as usize];
        let mut rng = derive_rng(77, i, 0);
        let counts: Vec<usize> = (0..scenario.num_sources())
            .map(|_| rng.random_range(25..120))
            .collect();
        let log = fill_log(scenario, &counts, 5000 + i);
        let fit = two_step_estimate(&log, &scenario.model, None).unwrap();
        let surface = build_surface(&log, &scenario.model, &fit.theta).unwrap();
        let kappa_t = SimplexPoint::new(log.kappa()).unwrap();
        let reweighted = variance_at(&surface, &kappa_t);
        let direct = direct_sandwich(&surface);
        let gap = (reweighted - direct).abs() / direct.abs().max(1.0);
        worst = worst.max(gap);
    }
    report(
        "criterion 3 (reweighting identity)",
        worst <= 1e-10,
        &format!("worst relative gap {worst:.2e} over 100 random logs (limit 1e-10)"),
    );
}

/// Shared replications for criteria 4 and 5: fixed (0.5, 0.5) on the linear
/// LATE scenario at T=5000, 1000 runs, sequentially fitted linear nuisances.
fn late_fixed_runs() -> &'static Vec<(f64, f64, Interval)> {
    static RUNS: OnceLock<Vec<(f64, f64, Interval)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let scenario = build("two_sample_late");
        let mut base = RunConfig::new(
            Policy::Fixed {
                target: vec![0.5, 0.5],
            },
            Horizon::Count { total: 5000 },
        );
        base.checkpoint_every = 5000;
        base.nuisance = NuisanceConfig {
            kind: NuisanceKind::Linear,
            refit_every: Some(500),
            ..NuisanceConfig::default()
        };
        base.seed = 4455;
        replicate(&scenario, &base, 1000, |traj| {
            let last = traj.checkpoints.last().unwrap();
            (traj.beta_final, traj.v_final, last.ci)
        })
    })
}

/// Criterion 4 — variance calibration: T times the Monte Carlo variance of
/// β̂_T matches the mean plug-in variance estimate within 10%.
#[test]
fn criterion_04_variance_calibration() {
    let runs = late_fixed_runs();
    let n = runs.len() as f64;
    let mean_beta = runs.iter().map(|r| r.0).sum::<f64>() / n;
    let var_mc = runs.iter().map(|r| (r.0 - mean_beta).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_v_hat = runs.iter().map(|r| r.1).sum::<f64>() / n;
    let ratio = 5000.0 * var_mc / mean_v_hat;
    report(
        "criterion 4 (variance calibration)",
        (ratio - 1.0).abs() <= 0.10,
        &format!(
            "T·Var_MC = {:.4}, mean V̂_T = {mean_v_hat:.4}, ratio {ratio:.3} (limit 1 ± 0.10)",
            5000.0 * var_mc
        ),
    );
}

/// Criterion 5 — pointwise interval coverage: the nominal 95% confidence
/// interval covers the true target in 93–97% of runs.
#[test]
fn criterion_05_ci_coverage() {
    let truth = build("two_sample_late").truth.beta_star.unwrap();
    let runs = late_fixed_runs();
    let covered = runs.iter().filter(|r| r.2.contains(truth)).count();
    let coverage = covered as f64 / runs.len() as f64;
    report(
        "criterion 5 (95% CI coverage)",
        (0.93..=0.97).contains(&coverage),
        &format!("coverage {coverage:.3} over {} runs (limit [0.93, 0.97])", runs.len()),
    );
}

/// Criterion 6 — vanishing regret: on the linear LATE scenario (oracle
/// simplex ≈ (0.66, 0.34)) the adaptive policies land near κ* and the
/// greedy-batched policy pays ≤ 5% excess MSE while the naive even split
/// pays ≥ 8%.
#[test]
fn criterion_06_zero_regret_trend() {
    // A higher-compliance tuning of the LATE family: its oracle simplex
    // stays at ≈ (0.66, 0.34) but the target is estimated precisely enough
    // after the 10% exploration phase for the one-shot replan to land.
    let mut config = ScenarioConfig::family("two_sample_late");
    config.params.insert("c1".into(), 0.6);
    config.params.insert("d1".into(), 0.6);
    config.params.insert("sigma_y".into(), 0.75);
    let scenario = build_scenario(&config).unwrap();
    let kappa_star = scenario.truth.kappa_star.clone().unwrap();
    let beta_star = scenario.truth.beta_star.unwrap();
    assert!((kappa_star[0] - 0.6569).abs() < 1e-3 && beta_star == 1.0);
    let total = 10_000;
    let runs = 200;
    let seed = 600;

    let mut base = RunConfig::new(Policy::Oracle, Horizon::Count { total });
    base.checkpoint_every = total;
    base.seed = seed;

    let mut oracle_cfg = base.clone();
    oracle_cfg.nuisance.kind = NuisanceKind::Oracle;
    // Frequent refits keep the share of samples scored under immature
    // nuisance snapshots small; only the cadence is configured here, the
    // snapshots each sample is scored with remain strictly prequential.
    let fitted = NuisanceConfig {
        kind: NuisanceKind::Linear,
        refit_every: Some(250),
        ..NuisanceConfig::default()
    };

    let summarize = |traj: Trajectory| (traj.beta_final, traj.kappa_final.clone());
    let oracle = replicate(&scenario, &oracle_cfg, runs, summarize);

    let mut etc_cfg = base.clone();
    etc_cfg.policy = Policy::Etc {
        explore_fraction: Some(0.1),
    };
    etc_cfg.nuisance = fitted.clone();
    let etc = replicate(&scenario, &etc_cfg, runs, summarize);

    let mut etg_cfg = base.clone();
    etg_cfg.policy = Policy::Etg {
        explore_fraction: Some(0.1),
        batch_size: None,
    };
    etg_cfg.nuisance = fitted.clone();
    let etg = replicate(&scenario, &etg_cfg, runs, summarize);

    let mut fixed_cfg = base.clone();
    fixed_cfg.policy = Policy::Fixed {
        target: vec![0.5, 0.5],
    };
    fixed_cfg.nuisance = fitted;
    let fixed = replicate(&scenario, &fixed_cfg, runs, summarize);

    let mse_of = |rows: &[(f64, Vec<f64>)]| {
        mse(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), beta_star)
    };
    let mse_oracle = mse_of(&oracle);
    let rr = |m: f64| 100.0 * (m - mse_oracle) / mse_oracle;
    let med_dist = |rows: &[(f64, Vec<f64>)]| {
        median(rows.iter().map(|r| l2(&r.1, &kappa_star)).collect())
    };

    let med_etc = med_dist(&etc);
    let med_etg = med_dist(&etg);
    let rr_etg = rr(mse_of(&etg));
    let rr_fixed = rr(mse_of(&fixed));

    report(
        "criterion 6 (zero-regret trend)",
        med_etc <= 0.05 && med_etg <= 0.05 && rr_etg <= 5.0 && rr_fixed >= 8.0,
        &format!(
            "median ‖κ_T−κ*‖: etc {med_etc:.4}, etg {med_etg:.4} (limit 0.05); \
             regret: etg {rr_etg:.2}% (limit ≤5%), fixed {rr_fixed:.2}% (limit ≥8%)"
        ),
    );
}

/// Criterion 7 — source dominance: when one source is strictly more
/// informative (mediator path beats the confounder path), the greedy-batched
/// policy routes ≥ 90% of its post-exploration queries there in ≥ 90% of
/// runs.
#[test]
fn criterion_07_frontdoor_dominance() {
    let scenario = build("confounder_mediator");
    assert_eq!(scenario.truth.kappa_star.as_deref(), Some(&[0.0, 1.0][..]));
    let total = 10_000usize;
    let runs = 200;

    let mut base = RunConfig::new(
        Policy::Etg {
            explore_fraction: None,
            batch_size: None,
        },
        Horizon::Count { total },
    );
    base.checkpoint_every = total;
    base.seed = 700;

    // Default exploration is T/√T = 100 queries; everything after that is
    // committed.
    let n_explore = 100usize;
    let fractions = replicate(&scenario, &base, runs, |traj| {
        let later = &traj.log.records()[n_explore..];
        later.iter().filter(|r| r.source == 1).count() as f64 / later.len() as f64
    });
    let dominant = fractions.iter().filter(|f| **f >= 0.9).count();
    report(
        "criterion 7 (frontdoor dominance)",
        dominant * 10 >= runs as usize * 9,
        &format!(
            "{dominant}/{runs} runs sent ≥90% of post-exploration queries to source 2 \
             (median fraction {:.3})",
            median(fractions.clone())
        ),
    );
}

/// Criterion 8 — cost-aware convergence: with per-query costs (2, 1) the
/// budgeted policies land near the cost-weighted oracle (0.4, 0.6) and the
/// ledger accounts for every unit of budget.
#[test]
fn criterion_08_cost_structured_convergence() {
    let scenario = build("two_confounders_cost");
    let kappa_star = scenario.truth.kappa_star.clone().unwrap();
    assert_eq!(scenario.cost, vec![2.0, 1.0]);
    let budget = 20_000.0;
    let runs = 200;

    // The commit-once policy gets a larger exploration share than the greedy
    // one: its single re-plan is the only chance to estimate the target, so
    // all of its final allocation error is re-plan error.
    let mut base = RunConfig::new(
        Policy::EtcCs {
            explore_fraction: Some(0.2),
        },
        Horizon::Budget { total: budget },
    );
    base.checkpoint_every = 10_000;
    base.seed = 800;
    // A refit cadence is load-bearing here: under the untrained fallback the
    // full- and reduced-adjustment scores coincide on every rich-source
    // record, so a log scored without refits has a rank-one second-moment
    // block and the interim surface prices no allocation.
    base.nuisance = NuisanceConfig {
        kind: NuisanceKind::Linear,
        refit_every: Some(250),
        ..NuisanceConfig::default()
    };

    let summarize = |traj: Trajectory| {
        let ledger: f64 = traj
            .counts
            .iter()
            .zip(&scenario.cost)
            .map(|(n, c)| *n as f64 * c)
            .sum();
        (traj.kappa_final.clone(), traj.spend, ledger)
    };

    let etc_cs = replicate(&scenario, &base, runs, summarize);
    let mut etg_cfg = base.clone();
    etg_cfg.policy = Policy::EtgCs {
        explore_fraction: Some(0.1),
        batch_budget: None,
    };
    let etg_cs = replicate(&scenario, &etg_cfg, runs, summarize);

    let mut budget_exact = true;
    for (_, spend, ledger) in etc_cs.iter().chain(&etg_cs) {
        // Costs are integers, so both accumulations are exact in floating
        // point: the run's spend equals the per-source ledger, never exceeds
        // the budget, and stops only when nothing is affordable.
        if spend != ledger || *spend > budget || budget - spend >= scenario.cost[1] {
            budget_exact = false;
        }
    }
    let med_etc = median(etc_cs.iter().map(|r| l2(&r.0, &kappa_star)).collect());
    let med_etg = median(etg_cs.iter().map(|r| l2(&r.0, &kappa_star)).collect());
    report(
        "criterion 8 (cost-structured convergence)",
        med_etc <= 0.05 && med_etg <= 0.05 && budget_exact,
        &format!(
            "median ‖κ_T−κ*‖: etc_cs {med_etc:.4}, etg_cs {med_etg:.4} (limit 0.05); \
             budget ledger exact: {budget_exact}"
        ),
    );
}

/// Criterion 9 — anytime validity: under ε-greedy collection the confidence
/// sequence contains the truth at every checkpoint simultaneously in ≥ 94%
/// of runs, and is always wider than the pointwise interval.
#[test]
fn criterion_09_confidence_sequence_validity() {
    let scenario = build("two_sample_iv");
    let beta_star = scenario.truth.beta_star.unwrap();
    let runs = 1000;

    let mut base = RunConfig::new(
        Policy::EpsilonGreedy {
            schedule: EpsilonSchedule::Inverse { c0: 5.0 },
            replan_every: 100,
        },
        Horizon::Count { total: 5000 },
    );
    base.checkpoint_every = 100;
    base.nuisance.kind = NuisanceKind::Oracle;
    base.seed = 900;

    let outcomes = replicate(&scenario, &base, runs, |traj| {
        let uniform_ok = traj
            .checkpoints
            .iter()
            .all(|c| c.confseq.contains(beta_star));
        let wider = traj
            .checkpoints
            .iter()
            .all(|c| c.confseq_radius > c.ci.halfwidth());
        let num_checkpoints = traj.checkpoints.len();
        (uniform_ok, wider, num_checkpoints)
    });

    let uniform = outcomes.iter().filter(|o| o.0).count();
    let always_wider = outcomes.iter().all(|o| o.1);
    let full_schedule = outcomes.iter().all(|o| o.2 == 50);
    let fraction = uniform as f64 / runs as f64;
    report(
        "criterion 9 (confidence sequence validity)",
        fraction >= 0.94 && always_wider && full_schedule,
        &format!(
            "uniform coverage {fraction:.3} over {runs} runs (limit ≥ 0.94); \
             sequence wider than CI at all checkpoints: {always_wider}"
        ),
    );
}

/// Criterion 10 — nonlinear directional check: on the random-feature IV
/// scenario with ridge-on-random-features nuisances, the adaptive
/// greedy-batched policy is no worse than the even split.
#[test]
fn criterion_10_nonlinear_directional() {
    let scenario = build("rff_iv");
    let beta_star = scenario.truth.beta_star.unwrap();
    let total = 10_000;
    let runs = 200;

    let mut base = RunConfig::new(
        Policy::Etg {
            explore_fraction: Some(0.1),
            batch_size: None,
        },
        Horizon::Count { total },
    );
    base.checkpoint_every = total;
    base.nuisance = NuisanceConfig {
        kind: NuisanceKind::RidgeRff,
        ..NuisanceConfig::default()
    };
    base.seed = 1000;

    let etg = replicate(&scenario, &base, runs, |traj| traj.beta_final);

    let mut fixed_cfg = base.clone();
    fixed_cfg.policy = Policy::Fixed {
        target: vec![0.5, 0.5],
    };
    fixed_cfg.nuisance.refit_every = Some(1000);
    let fixed = replicate(&scenario, &fixed_cfg, runs, |traj| traj.beta_final);

    let mse_etg = mse(&etg, beta_star);
    let mse_fixed = mse(&fixed, beta_star);
    report(
        "criterion 10 (nonlinear directional check)",
        mse_etg <= mse_fixed,
        &format!("MSE etg {mse_etg:.6e} ≤ MSE fixed {mse_fixed:.6e} over {runs} runs"),
    );
}
