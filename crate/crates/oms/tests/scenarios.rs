//! Statistical validation of the built-in scenario families: every declared
//! truth (θ*, β*, population matrices, oracle simplex) is re-derived here
//! from Monte Carlo draws or grid search and compared against the scenario's
//! own claims.

use oms::allocation::{estimate_oracle_simplex, estimate_oracle_simplex_with_cost};
use oms::gmm::{two_step_estimate, MomentLog};
use oms::rng::{derive_rng, source_stream};
use oms::sources::{build_scenario, oracle_nuisance, ScenarioConfig, FAMILIES};
use oms::variance::{build_surface, oracle_surface, variance_at};
use oms::{Scenario, SimplexPoint};

fn build(family: &str) -> Scenario {
    build_scenario(&ScenarioConfig::family(family)).unwrap()
}

/// Mean and standard error of an accumulated stream.
struct Running {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn new() -> Self {
        Running {
            n: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn se(&self) -> f64 {
        (self.m2 / (self.n * (self.n - 1.0))).sqrt()
    }
}

/// Every moment a source reveals has Monte Carlo mean zero at (θ*, η*),
/// within four standard errors.
#[test]
fn test_moments_are_valid_at_truth() {
    let n = 150_000usize;
    for family in FAMILIES {
        let s = build(family);
        let theta_star = s.truth.theta_star.clone().unwrap();
        let eta = oracle_nuisance(&s).unwrap();
        for d in 0..s.num_sources() {
            let mut rng = derive_rng(2024, 0, source_stream(d));
            let revealed: Vec<usize> = (0..s.model.num_moments())
                .filter(|i| s.model.mask(d)[*i])
                .collect();
            let mut stats: Vec<Running> = revealed.iter().map(|_| Running::new()).collect();
            for _ in 0..n {
                let sample = s.query(d, &mut rng).unwrap();
                for (slot, &i) in revealed.iter().enumerate() {
                    let value = (s.model.moments()[i].psi)(&sample, &theta_star, &eta).unwrap();
                    stats[slot].push(value);
                }
            }
            for (slot, &i) in revealed.iter().enumerate() {
                let (mean, se) = (stats[slot].mean, stats[slot].se());
                assert!(
                    mean.abs() <= 4.0 * se + 1e-6,
                    "{family} source {d} moment `{}`: mean {mean:.3e} exceeds 4·se {:.3e}",
                    s.model.moments()[i].name,
                    4.0 * se,
                );
            }
        }
    }
}

/// The closed-form population matrices (where declared) match Monte Carlo
/// averages of the jacobian and the second moments at the truth.
#[test]
fn test_population_matrices_match_monte_carlo() {
    let n = 300_000usize;
    for family in FAMILIES {
        let s = build(family);
        let Some(pop) = s.truth.population.clone() else {
            continue;
        };
        let theta_star = s.truth.theta_star.clone().unwrap();
        let eta = oracle_nuisance(&s).unwrap();
        let m = s.model.num_moments();
        let p = s.model.num_params();

        // For each matrix entry, the first source revealing the needed
        // moments supplies the draws; entries no source reveals never enter
        // the masked sandwich and are skipped.
        let owner = |i: usize| (0..s.num_sources()).find(|d| s.model.mask(*d)[i]);
        let pair_owner = |i: usize, j: usize| {
            (0..s.num_sources()).find(|d| s.model.mask(*d)[i] && s.model.mask(*d)[j])
        };

        for d in 0..s.num_sources() {
            let mut rng = derive_rng(2025, 1, source_stream(d));
            let g_rows: Vec<usize> = (0..m).filter(|i| owner(*i) == Some(d)).collect();
            let omega_entries: Vec<(usize, usize)> = (0..m)
                .flat_map(|i| (i..m).map(move |j| (i, j)))
                .filter(|(i, j)| pair_owner(*i, *j) == Some(d))
                .collect();
            if g_rows.is_empty() && omega_entries.is_empty() {
                continue;
            }
            let mut g_stats: Vec<Vec<Running>> = g_rows
                .iter()
                .map(|_| (0..p).map(|_| Running::new()).collect())
                .collect();
            let mut omega_stats: Vec<Running> =
                omega_entries.iter().map(|_| Running::new()).collect();
            for _ in 0..n {
                let sample = s.query(d, &mut rng).unwrap();
                for (slot, &i) in g_rows.iter().enumerate() {
                    let row = s
                        .model
                        .moment_jacobian(i, &sample, &theta_star, &eta)
                        .unwrap();
                    for (c, v) in row.iter().enumerate() {
                        g_stats[slot][c].push(*v);
                    }
                }
                if !omega_entries.is_empty() {
                    let psi: Vec<f64> = (0..m)
                        .map(|i| {
                            if s.model.mask(d)[i] {
                                (s.model.moments()[i].psi)(&sample, &theta_star, &eta).unwrap()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    for (slot, &(i, j)) in omega_entries.iter().enumerate() {
                        omega_stats[slot].push(psi[i] * psi[j]);
                    }
                }
            }
            for (slot, &i) in g_rows.iter().enumerate() {
                for c in 0..p {
                    let (mean, se) = (g_stats[slot][c].mean, g_stats[slot][c].se());
                    assert!(
                        (mean - pop.g_star[(i, c)]).abs() <= 6.0 * se + 1e-9,
                        "{family} G[{i},{c}]: mc {mean:.5} vs declared {:.5}",
                        pop.g_star[(i, c)],
                    );
                }
            }
            for (slot, &(i, j)) in omega_entries.iter().enumerate() {
                let (mean, se) = (omega_stats[slot].mean, omega_stats[slot].se());
                assert!(
                    (mean - pop.omega_star[(i, j)]).abs() <= 6.0 * se + 1e-9,
                    "{family} Omega[{i},{j}]: mc {mean:.5} vs declared {:.5}",
                    pop.omega_star[(i, j)],
                );
            }
        }
    }
}

/// For every family that declares an oracle simplex, minimizing the oracle
/// variance surface (cost-weighted when the scenario prices queries
/// unevenly) recovers the declared κ*.
#[test]
fn test_declared_oracle_simplices_are_argmins() {
    for family in FAMILIES {
        let s = build(family);
        let Some(kappa_star) = s.truth.kappa_star.clone() else {
            continue;
        };
        let surface = oracle_surface(&s, 400_000, 13).unwrap();
        let uneven_cost = s.cost.iter().any(|c| (c - s.cost[0]).abs() > 1e-12);
        let found = if uneven_cost {
            estimate_oracle_simplex_with_cost(&surface, &s.cost, 1e-5).unwrap()
        } else {
            estimate_oracle_simplex(&surface, 1e-5).unwrap()
        };
        for (a, b) in found.as_slice().iter().zip(&kappa_star) {
            assert!(
                (a - b).abs() <= 5e-3,
                "{family}: argmin {:?} vs declared {:?}",
                found.as_slice(),
                kappa_star,
            );
        }
    }
}

/// The oracle surface and a surface built from one long uniformly-allocated
/// log describe the same variance function, point by point.
#[test]
fn test_oracle_surface_matches_long_run_log() {
    let s = build("two_sample_late");
    let theta_star = s.truth.theta_star.clone().unwrap();
    let oracle = oracle_surface(&s, 0, 0).unwrap();

    let mut log = MomentLog::new(2);
    log.push_snapshot(oracle_nuisance(&s).unwrap());
    let mut rngs: Vec<_> = (0..2).map(|d| derive_rng(31, 0, source_stream(d))).collect();
    for _ in 0..300_000 {
        for d in 0..2 {
            let sample = s.query(d, &mut rngs[d]).unwrap();
            log.record(d, sample);
        }
    }
    let empirical = build_surface(&log, &s.model, &theta_star).unwrap();

    for kappa in [[0.3, 0.7], [0.5, 0.5], [0.661845, 0.338155]] {
        let point = SimplexPoint::new(kappa.to_vec()).unwrap();
        let v_oracle = variance_at(&oracle, &point);
        let v_empirical = variance_at(&empirical, &point);
        assert!(
            (v_empirical - v_oracle).abs() <= 0.02 * v_oracle,
            "at {kappa:?}: empirical {v_empirical:.4} vs oracle {v_oracle:.4}",
        );
    }
}

/// Plug-in allocation estimates from finite uniform logs concentrate around
/// the true oracle simplex.
#[test]
fn test_plugin_simplex_estimates_concentrate() {
    let s = build("two_sample_late");
    let kappa_star = s.truth.kappa_star.clone().unwrap();
    let t = 20_000usize;
    let seeds = 30u64;
    let mut hits = 0usize;
    for seed in 0..seeds {
        let mut log = MomentLog::new(2);
        log.push_snapshot(oracle_nuisance(&s).unwrap());
        let mut rngs: Vec<_> = (0..2)
            .map(|d| derive_rng(400 + seed, 0, source_stream(d)))
            .collect();
        for _ in 0..t / 2 {
            for d in 0..2 {
                let sample = s.query(d, &mut rngs[d]).unwrap();
                log.record(d, sample);
            }
        }
        let fit = two_step_estimate(&log, &s.model, None).unwrap();
        let surface = build_surface(&log, &s.model, &fit.theta).unwrap();
        let k_hat = estimate_oracle_simplex(&surface, 1e-4).unwrap();
        if (k_hat[0] - kappa_star[0]).abs() <= 0.02 {
            hits += 1;
        }
    }
    assert!(
        hits * 10 >= seeds as usize * 9,
        "only {hits}/{seeds} plug-in estimates within 0.02 of κ*",
    );
}

/// Slow independent re-derivation of the random-feature scenario's declared
/// target: inverse-propensity weighting on large samples from each source
/// reproduces β* = ITT_Y / ITT_X. Run with --ignored.
#[test]
#[ignore = "five million draws; run explicitly"]
fn test_rff_truth_by_inverse_propensity_weighting() {
    let s = build("rff_iv");
    let beta_star = s.truth.beta_star.unwrap();
    let eta = oracle_nuisance(&s).unwrap();
    let n = 5_000_000usize;

    // Source 0 draws (W, Z, Y), source 1 draws (W, Z, X); the sources are
    // independent, so the ratio's standard error splits cleanly.
    let mut itt = [Running::new(), Running::new()];
    for (d, response) in [(0usize, "Y"), (1usize, "X")] {
        let pi_slot = if d == 0 { "pi_y" } else { "pi_x" };
        let mut rng = derive_rng(777, 0, source_stream(d));
        for _ in 0..n {
            let sample = s.query(d, &mut rng).unwrap();
            let w = sample.get("W").unwrap();
            let z = sample.get("Z").unwrap();
            let r = sample.get(response).unwrap();
            let pi = eta.propensity(pi_slot, &[w]).unwrap();
            let score = z * r / pi - (1.0 - z) * r / (1.0 - pi);
            itt[d].push(score);
        }
    }
    let (itt_y, se_y) = (itt[0].mean, itt[0].se());
    let (itt_x, se_x) = (itt[1].mean, itt[1].se());
    let beta_hat = itt_y / itt_x;
    let se_beta = (se_y / itt_x).hypot(beta_hat * se_x / itt_x);
    assert!(
        (beta_hat - beta_star).abs() <= 4.0 * se_beta,
        "IPW β̂ {beta_hat:.5} ± {se_beta:.5} vs declared {beta_star:.5}",
    );
}
