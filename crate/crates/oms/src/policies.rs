//! Data-collection policies: the sequential loop that decides which source
//! to query next, re-plans from interim fits, and records checkpoints.
//!
//! All policies share one driver. Each step picks a source, queries it,
//! logs the sample, and (on schedule) refits nuisances, re-estimates the
//! oracle allocation, and writes a checkpoint with the current estimate,
//! variance, confidence interval, and confidence-sequence radius. What
//! distinguishes policies is the *steering rule*:
//!
//! - `fixed` / `oracle`: chase a constant target allocation.
//! - `etc`: explore uniformly for ⌈Te⌉ steps, estimate κ̂*, then commit to
//!   the closest reachable terminal allocation.
//! - `etg`: like `etc` but re-plans at batch boundaries, projecting the
//!   running κ̂* onto what the remaining batch can still reach.
//! - `epsilon_greedy`: per-step coin flip between a uniform query and a
//!   deficit step toward the latest κ̂*, re-planned on a fixed cadence.
//! - `etc_cs` / `etg_cs`: budget-horizon versions that minimize variance
//!   per unit spend and stop when no source is affordable.
//!
//! Steering is always the *deficit rule*: given target τ, query the source
//! with the largest `τ_d·(t+1) − counts_d`, ties falling to the lower
//! index. It realizes any fixed target within sup-norm `1/t` and
//! self-corrects after forced deviations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{estimate_oracle_simplex, estimate_oracle_simplex_with_cost, project, FeasibleSet};
use crate::error::{Error, Result};
use crate::gmm::{two_step_estimate, GmmFit, MomentLog};
use crate::inference::{choose_rho, confidence_interval, confseq_radius, Interval};
use crate::model::Sample;
use crate::nuisance::{fit as fit_nuisances, NuisanceConfig, NuisanceKind};
use crate::rng::{derive_rng, nuisance_stream, policy_stream, source_stream};
use crate::sources::{oracle_nuisance, Scenario};
use crate::variance::{build_surface, variance_at, SimplexPoint};

/// Exploration probability as a function of the step index (1-based).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// ε_t ≡ ε.
    Constant { epsilon: f64 },
    /// ε_t = min(1, c0/t).
    Inverse { c0: f64 },
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            EpsilonSchedule::Constant { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(Error::Config(format!(
                        "constant exploration probability {epsilon} outside [0, 1]"
                    )));
                }
            }
            EpsilonSchedule::Inverse { c0 } => {
                if !(*c0 > 0.0 && c0.is_finite()) {
                    return Err(Error::Config(format!(
                        "inverse schedule needs c0 > 0, got {c0}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn epsilon(&self, t: usize) -> f64 {
        match self {
            EpsilonSchedule::Constant { epsilon } => *epsilon,
            EpsilonSchedule::Inverse { c0 } => (c0 / t as f64).min(1.0),
        }
    }
}

fn default_replan_every() -> usize {
    100
}

/// A data-collection policy. Count-horizon policies (`fixed`, `oracle`,
/// `etc`, `etg`, `epsilon_greedy`) run for exactly T queries;
/// cost-structured policies (`etc_cs`, `etg_cs`) run until the budget
/// cannot afford another query. `fixed` and `oracle` accept either horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Policy {
    /// Chase a constant allocation.
    Fixed { target: Vec<f64> },
    /// Chase the scenario's true optimal allocation κ*.
    Oracle,
    /// Explore-then-commit. `explore_fraction` defaults to 1/√T.
    Etc {
        #[serde(default)]
        explore_fraction: Option<f64>,
    },
    /// Explore-then-greedy: re-plan at batch boundaries. `batch_size`
    /// defaults to a tenth of the post-exploration steps.
    Etg {
        #[serde(default)]
        explore_fraction: Option<f64>,
        #[serde(default)]
        batch_size: Option<usize>,
    },
    /// Per-step randomized exploration with deficit steering in between.
    EpsilonGreedy {
        schedule: EpsilonSchedule,
        #[serde(default = "default_replan_every")]
        replan_every: usize,
    },
    /// Explore-then-commit on a spend budget, minimizing V̂(κ)·(κᵀc).
    EtcCs {
        #[serde(default)]
        explore_fraction: Option<f64>,
    },
    /// Explore-then-greedy on a spend budget. `batch_budget` defaults to a
    /// tenth of the post-exploration spend.
    EtgCs {
        #[serde(default)]
        explore_fraction: Option<f64>,
        #[serde(default)]
        batch_budget: Option<f64>,
    },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Fixed { .. } => "fixed",
            Policy::Oracle => "oracle",
            Policy::Etc { .. } => "etc",
            Policy::Etg { .. } => "etg",
            Policy::EpsilonGreedy { .. } => "epsilon_greedy",
            Policy::EtcCs { .. } => "etc_cs",
            Policy::EtgCs { .. } => "etg_cs",
        }
    }

    fn needs_budget(&self) -> bool {
        matches!(self, Policy::EtcCs { .. } | Policy::EtgCs { .. })
    }

    fn needs_count(&self) -> bool {
        matches!(
            self,
            Policy::Etc { .. } | Policy::Etg { .. } | Policy::EpsilonGreedy { .. }
        )
    }
}

/// Stopping rule: a query count or a spend cap.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Horizon {
    Count { total: usize },
    Budget { total: f64 },
}

/// Everything one run needs beyond the scenario.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub policy: Policy,
    pub horizon: Horizon,
    /// Level for both the pointwise interval and the confidence sequence.
    pub alpha: f64,
    /// Checkpoint cadence in queries; a final checkpoint is always taken.
    pub checkpoint_every: usize,
    pub nuisance: NuisanceConfig,
    /// Mixture parameter ρ² for the confidence sequence; `None` tunes it
    /// for the nominal final sample size.
    pub rho2: Option<f64>,
    pub seed: u64,
    pub run_id: u64,
}

impl RunConfig {
    pub fn new(policy: Policy, horizon: Horizon) -> Self {
        RunConfig {
            policy,
            horizon,
            alpha: 0.05,
            checkpoint_every: 100,
            nuisance: NuisanceConfig::default(),
            rho2: None,
            seed: 0,
            run_id: 0,
        }
    }
}

/// Interim state recorded on the checkpoint schedule.
#[derive(Clone, Debug, Serialize)]
pub struct Checkpoint {
    pub t: usize,
    pub spend: f64,
    pub theta_hat: Vec<f64>,
    pub beta_hat: f64,
    /// Plug-in variance at the realized allocation.
    pub v_hat: f64,
    /// Realized allocation counts/t at this checkpoint.
    pub kappa_t: Vec<f64>,
    /// Latest re-planned allocation estimate, when the policy has one.
    pub kappa_hat: Option<Vec<f64>>,
    pub ci: Interval,
    pub confseq: Interval,
    pub confseq_radius: f64,
}

/// Non-fatal numerical events accumulated over a run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RunFlags {
    /// Fits whose weighting matrix needed a ridge.
    pub ridge_applied: usize,
    /// Fits that ended on the parameter-box boundary.
    pub boundary_hit: usize,
    /// Re-planning attempts that failed (under-identified interim log or
    /// degenerate surface) and kept the previous target.
    pub kept_previous_target: usize,
}

/// The complete record of one policy run.
#[derive(Debug)]
pub struct Trajectory {
    pub log: MomentLog,
    pub checkpoints: Vec<Checkpoint>,
    pub final_t: usize,
    pub spend: f64,
    pub counts: Vec<usize>,
    pub kappa_final: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub beta_final: f64,
    pub v_final: f64,
    /// The ρ² the confidence sequence actually used.
    pub rho2: f64,
    pub flags: RunFlags,
}

/// Runs one policy on one scenario. Errors on invalid configuration, on a
/// query failure, or when a *required* fit (checkpoint or final) is
/// under-identified; failed re-planning fits are non-fatal and only flagged.
pub fn run_policy(scenario: &Scenario, config: &RunConfig) -> Result<Trajectory> {
    validate_config(scenario, config)?;
    let driver = Driver::new(scenario, config)?;
    driver.run()
}

/// Checks a run configuration against a scenario without running it:
/// policy/horizon compatibility, simplex and fraction ranges, schedule
/// sanity. [`run_policy`] performs the same checks first.
pub fn validate_config(scenario: &Scenario, config: &RunConfig) -> Result<()> {
    let n = scenario.num_sources();
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("level α = {} outside (0, 1)", config.alpha)));
    }
    if config.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint cadence must be ≥ 1".into()));
    }
    if let Some(rho2) = config.rho2 {
        if !(rho2 > 0.0 && rho2.is_finite()) {
            return Err(Error::Config(format!("mixture parameter ρ² = {rho2} must be positive")));
        }
    }
    match config.horizon {
        Horizon::Count { total } => {
            if total == 0 {
                return Err(Error::Config("count horizon must be ≥ 1".into()));
            }
            if config.policy.needs_budget() {
                return Err(Error::Config(format!(
                    "policy `{}` needs a budget horizon",
                    config.policy.name()
                )));
            }
        }
        Horizon::Budget { total } => {
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::Config(format!("budget {total} must be positive")));
            }
            if config.policy.needs_count() {
                return Err(Error::Config(format!(
                    "policy `{}` needs a count horizon",
                    config.policy.name()
                )));
            }
        }
    }
    let check_fraction = |e: Option<f64>| -> Result<()> {
        if let Some(e) = e {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!(
                    "exploration fraction {e} outside (0, 1)"
                )));
            }
        }
        Ok(())
    };
    match &config.policy {
        Policy::Fixed { target } => {
            if target.len() != n {
                return Err(Error::Config(format!(
                    "fixed target has {} entries for {} sources",
                    target.len(),
                    n
                )));
            }
            SimplexPoint::new(target.clone())?;
        }
        Policy::Oracle => {
            if scenario.truth.kappa_star.is_none() {
                return Err(Error::Config(format!(
                    "scenario `{}` has no known optimal allocation for the oracle policy",
                    scenario.name
                )));
            }
        }
        Policy::Etc { explore_fraction } => check_fraction(*explore_fraction)?,
        Policy::Etg {
            explore_fraction,
            batch_size,
        } => {
            check_fraction(*explore_fraction)?;
            if let (Some(s), Horizon::Count { total }) = (batch_size, config.horizon) {
                let e = explore_fraction.unwrap_or(1.0 / (total as f64).sqrt());
                let commit = total - (total as f64 * e).ceil() as usize;
                if *s == 0 || *s > commit {
                    return Err(Error::Config(format!(
                        "batch size {s} outside 1..={commit} (the post-exploration steps)"
                    )));
                }
            }
        }
        Policy::EpsilonGreedy {
            schedule,
            replan_every,
        } => {
            schedule.validate()?;
            if *replan_every == 0 {
                return Err(Error::Config("re-planning cadence must be ≥ 1".into()));
            }
        }
        Policy::EtcCs { explore_fraction } => check_fraction(*explore_fraction)?,
        Policy::EtgCs {
            explore_fraction,
            batch_budget,
        } => {
            check_fraction(*explore_fraction)?;
            if let Some(h) = batch_budget {
                if !(*h > 0.0) {
                    return Err(Error::Config(format!("batch budget {h} must be positive")));
                }
            }
        }
    }
    Ok(())
}

struct Driver<'a> {
    scenario: &'a Scenario,
    config: &'a RunConfig,
    log: MomentLog,
    counts: Vec<usize>,
    spend: f64,
    per_source: Vec<Vec<Sample>>,
    source_rngs: Vec<ChaCha8Rng>,
    policy_rng: ChaCha8Rng,
    nuisance_rng: ChaCha8Rng,
    oracle_nuisances: bool,
    theta_warm: Option<Vec<f64>>,
    k_hat: Option<Vec<f64>>,
    rho2: f64,
    flags: RunFlags,
    checkpoints: Vec<Checkpoint>,
}

impl<'a> Driver<'a> {
    fn new(scenario: &'a Scenario, config: &'a RunConfig) -> Result<Self> {
        let n = scenario.num_sources();
        let mut log = MomentLog::new(n);
        let oracle_nuisances = matches!(config.nuisance.kind, NuisanceKind::Oracle);
        if oracle_nuisances {
            log.push_snapshot(oracle_nuisance(scenario)?);
        }
        let mean_cost: f64 = scenario.cost.iter().sum::<f64>() / n as f64;
        let t_nominal = match config.horizon {
            Horizon::Count { total } => total,
            Horizon::Budget { total } => ((total / mean_cost).floor() as usize).max(1),
        };
        let rho2 = match config.rho2 {
            Some(r) => r,
            None => choose_rho(t_nominal, 1.0, config.alpha)?,
        };
        Ok(Driver {
            scenario,
            config,
            log,
            counts: vec![0; n],
            spend: 0.0,
            per_source: vec![Vec::new(); n],
            source_rngs: (0..n)
                .map(|d| derive_rng(config.seed, config.run_id, source_stream(d)))
                .collect(),
            policy_rng: derive_rng(config.seed, config.run_id, policy_stream(n)),
            nuisance_rng: derive_rng(config.seed, config.run_id, nuisance_stream(n)),
            oracle_nuisances,
            theta_warm: None,
            k_hat: None,
            rho2,
            flags: RunFlags::default(),
            checkpoints: Vec::new(),
        })
    }

    fn t(&self) -> usize {
        self.log.len()
    }

    /// Queries source `d`, logs the sample, and services the refit and
    /// checkpoint schedules.
    fn query(&mut self, d: usize) -> Result<()> {
        let sample = self.scenario.query(d, &mut self.source_rngs[d])?;
        if !self.oracle_nuisances {
            self.per_source[d].push(sample.clone());
        }
        self.log.record(d, sample);
        self.counts[d] += 1;
        self.spend += self.scenario.cost[d];
        let t = self.t();
        if let Some(every) = self.config.nuisance.refit_every {
            if t % every == 0 {
                self.refit()?;
            }
        }
        if t % self.config.checkpoint_every == 0 {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn refit(&mut self) -> Result<()> {
        if self.oracle_nuisances {
            return Ok(());
        }
        let id = self.log.snapshots().len();
        let snapshot = fit_nuisances(
            &self.per_source,
            &self.scenario.slot_specs,
            &self.config.nuisance,
            self.t(),
            id,
            &mut self.nuisance_rng,
        )?;
        self.log.push_snapshot(snapshot);
        Ok(())
    }

    /// Refit tied to a policy re-planning point. An explicit `refit_every`
    /// cadence overrides these natural points.
    fn refit_at_replan(&mut self) -> Result<()> {
        if self.config.nuisance.refit_every.is_none() {
            self.refit()?;
        }
        Ok(())
    }

    fn fit(&mut self) -> Result<GmmFit> {
        let fit = two_step_estimate(&self.log, &self.scenario.model, self.theta_warm.as_deref())?;
        self.theta_warm = Some(fit.theta.clone());
        if fit.diagnostics.ridge_applied {
            self.flags.ridge_applied += 1;
        }
        if fit.diagnostics.boundary_hit {
            self.flags.boundary_hit += 1;
        }
        Ok(fit)
    }

    fn checkpoint(&mut self) -> Result<()> {
        let t = self.t();
        let fit = self.fit()?;
        let surface = build_surface(&self.log, &self.scenario.model, &fit.theta)?;
        let kappa_t = self.log.kappa();
        let v_hat = variance_at(&surface, &SimplexPoint::new(kappa_t.clone())?);
        if !v_hat.is_finite() {
            return Err(Error::DegenerateSurface);
        }
        let ci = confidence_interval(fit.beta, v_hat, t, self.config.alpha)?;
        let radius = confseq_radius(t, v_hat, self.rho2, self.config.alpha)?;
        self.checkpoints.push(Checkpoint {
            t,
            spend: self.spend,
            theta_hat: fit.theta,
            beta_hat: fit.beta,
            v_hat,
            kappa_t,
            kappa_hat: self.k_hat.clone(),
            ci,
            confseq: Interval {
                lo: fit.beta - radius,
                hi: fit.beta + radius,
            },
            confseq_radius: radius,
        });
        Ok(())
    }

    /// Re-estimates the target allocation from the interim log. A fit that
    /// is under-identified or a surface with no finite point keeps the
    /// previous target (initially uniform) and raises a flag.
    fn replan(&mut self, cost_weighted: bool) -> Result<Vec<f64>> {
        let attempt = (|| -> Result<Vec<f64>> {
            let fit = two_step_estimate(&self.log, &self.scenario.model, self.theta_warm.as_deref())?;
            let surface = build_surface(&self.log, &self.scenario.model, &fit.theta)?;
            let k = if cost_weighted {
                estimate_oracle_simplex_with_cost(&surface, &self.scenario.cost, 1e-4)?
            } else {
                estimate_oracle_simplex(&surface, 1e-4)?
            };
            self.theta_warm = Some(fit.theta.clone());
            if fit.diagnostics.ridge_applied {
                self.flags.ridge_applied += 1;
            }
            if fit.diagnostics.boundary_hit {
                self.flags.boundary_hit += 1;
            }
            Ok(k.as_slice().to_vec())
        })();
        match attempt {
            Ok(k) => {
                self.k_hat = Some(k.clone());
                Ok(k)
            }
            Err(Error::UnderIdentified { .. }) | Err(Error::DegenerateSurface) => {
                self.flags.kept_previous_target += 1;
                Ok(self
                    .k_hat
                    .clone()
                    .unwrap_or_else(|| self.uniform_target()))
            }
            Err(other) => Err(other),
        }
    }

    fn uniform_target(&self) -> Vec<f64> {
        let n = self.scenario.num_sources();
        vec![1.0 / n as f64; n]
    }

    /// Deficit rule: the source with the largest shortfall against `target`
    /// after the next query, ties to the lower index. With `budget_cap`,
    /// only sources whose cost still fits are eligible; `None` means no
    /// source is affordable.
    fn deficit_pick(&self, target: &[f64], budget_cap: Option<f64>) -> Option<usize> {
        let t_next = (self.t() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for d in 0..self.scenario.num_sources() {
            if let Some(cap) = budget_cap {
                if self.spend + self.scenario.cost[d] > cap + 1e-9 {
                    continue;
                }
            }
            let deficit = target[d] * t_next - self.counts[d] as f64;
            if best.is_none_or(|(_, b)| deficit > b) {
                best = Some((d, deficit));
            }
        }
        best.map(|(d, _)| d)
    }

    fn run(mut self) -> Result<Trajectory> {
        match (self.config.policy.clone(), self.config.horizon) {
            (Policy::Fixed { target }, Horizon::Count { total }) => {
                self.chase_fixed(&target, total)?;
            }
            (Policy::Oracle, Horizon::Count { total }) => {
                let target = self.scenario.truth.kappa_star.clone().expect("validated");
                self.chase_fixed(&target, total)?;
            }
            (Policy::Fixed { target }, Horizon::Budget { total }) => {
                self.chase_fixed_budget(&target, total)?;
            }
            (Policy::Oracle, Horizon::Budget { total }) => {
                let target = self.scenario.truth.kappa_star.clone().expect("validated");
                self.chase_fixed_budget(&target, total)?;
            }
            (Policy::Etc { explore_fraction }, Horizon::Count { total }) => {
                self.run_etc(explore_fraction, total)?;
            }
            (
                Policy::Etg {
                    explore_fraction,
                    batch_size,
                },
                Horizon::Count { total },
            ) => {
                self.run_etg(explore_fraction, batch_size, total)?;
            }
            (
                Policy::EpsilonGreedy {
                    schedule,
                    replan_every,
                },
                Horizon::Count { total },
            ) => {
                self.run_epsilon_greedy(&schedule, replan_every, total)?;
            }
            (Policy::EtcCs { explore_fraction }, Horizon::Budget { total }) => {
                self.run_etc_cs(explore_fraction, total)?;
            }
            (
                Policy::EtgCs {
                    explore_fraction,
                    batch_budget,
                },
                Horizon::Budget { total },
            ) => {
                self.run_etg_cs(explore_fraction, batch_budget, total)?;
            }
            _ => unreachable!("validated policy/horizon pairing"),
        }
        self.finish()
    }

    fn chase_fixed(&mut self, target: &[f64], total: usize) -> Result<()> {
        for _ in 0..total {
            let d = self.deficit_pick(target, None).expect("uncapped pick");
            self.query(d)?;
        }
        Ok(())
    }

    fn chase_fixed_budget(&mut self, target: &[f64], budget: f64) -> Result<()> {
        while let Some(d) = self.deficit_pick(target, Some(budget)) {
            self.query(d)?;
        }
        Ok(())
    }

    fn explore_fraction_or_default(e: Option<f64>, t_nominal: usize) -> f64 {
        e.unwrap_or_else(|| 1.0 / (t_nominal as f64).sqrt())
    }

    fn run_etc(&mut self, explore_fraction: Option<f64>, total: usize) -> Result<()> {
        let e = Self::explore_fraction_or_default(explore_fraction, total);
        let n_e = ((total as f64 * e).ceil() as usize).clamp(1, total);
        let uniform = self.uniform_target();
        self.chase_fixed(&uniform, n_e)?;
        if n_e == total {
            return Ok(());
        }
        self.refit_at_replan()?;
        let k_hat = SimplexPoint::new(self.replan(false)?)?;
        let feasible = FeasibleSet::new(self.log.kappa(), n_e as f64 / total as f64)?;
        let terminal = project(&feasible, &k_hat);
        self.chase_fixed(terminal.as_slice().to_vec().as_slice(), total - n_e)
    }

    fn run_etg(
        &mut self,
        explore_fraction: Option<f64>,
        batch_size: Option<usize>,
        total: usize,
    ) -> Result<()> {
        let e = Self::explore_fraction_or_default(explore_fraction, total);
        let n_e = ((total as f64 * e).ceil() as usize).clamp(1, total);
        let uniform = self.uniform_target();
        self.chase_fixed(&uniform, n_e)?;
        let commit = total - n_e;
        if commit == 0 {
            return Ok(());
        }
        let s = batch_size.unwrap_or_else(|| ((commit as f64 * 0.1).round() as usize).max(1));
        let s = s.min(commit);
        let num_batches = commit / s;
        let remainder = commit % s;
        for j in 0..num_batches {
            let size = if j + 1 == num_batches { s + remainder } else { s };
            self.refit_at_replan()?;
            let k_hat = SimplexPoint::new(self.replan(false)?)?;
            let done = self.t();
            let feasible = FeasibleSet::new(self.log.kappa(), done as f64 / (done + size) as f64)?;
            let terminal = project(&feasible, &k_hat);
            self.chase_fixed(terminal.as_slice().to_vec().as_slice(), size)?;
        }
        Ok(())
    }

    fn run_epsilon_greedy(
        &mut self,
        schedule: &EpsilonSchedule,
        replan_every: usize,
        total: usize,
    ) -> Result<()> {
        let n = self.scenario.num_sources();
        let mut target = self.uniform_target();
        for step in 1..=total {
            let eps = schedule.epsilon(step);
            let u: f64 = self.policy_rng.random();
            let d = if u <= eps {
                self.policy_rng.random_range(0..n)
            } else {
                self.deficit_pick(&target, None).expect("uncapped pick")
            };
            self.query(d)?;
            if step % replan_every == 0 && step < total {
                self.refit_at_replan()?;
                target = self.replan(false)?;
            }
        }
        Ok(())
    }

    fn run_etc_cs(&mut self, explore_fraction: Option<f64>, budget: f64) -> Result<()> {
        let uniform = self.uniform_target();
        let mean_cost: f64 = uniform
            .iter()
            .zip(&self.scenario.cost)
            .map(|(k, c)| k * c)
            .sum();
        let t_nominal = ((budget / mean_cost).floor() as usize).max(1);
        let e = Self::explore_fraction_or_default(explore_fraction, t_nominal);
        let n_e = (((budget * e) / mean_cost).floor() as usize).max(1);
        for _ in 0..n_e {
            match self.deficit_pick(&uniform, Some(budget)) {
                Some(d) => self.query(d)?,
                None => return Ok(()),
            }
        }
        self.refit_at_replan()?;
        let target = self.replan(true)?;
        while let Some(d) = self.deficit_pick(&target, Some(budget)) {
            self.query(d)?;
        }
        Ok(())
    }

    fn run_etg_cs(
        &mut self,
        explore_fraction: Option<f64>,
        batch_budget: Option<f64>,
        budget: f64,
    ) -> Result<()> {
        let uniform = self.uniform_target();
        let mean_cost: f64 = uniform
            .iter()
            .zip(&self.scenario.cost)
            .map(|(k, c)| k * c)
            .sum();
        let t_nominal = ((budget / mean_cost).floor() as usize).max(1);
        let e = Self::explore_fraction_or_default(explore_fraction, t_nominal);
        let n_e = (((budget * e) / mean_cost).floor() as usize).max(1);
        for _ in 0..n_e {
            match self.deficit_pick(&uniform, Some(budget)) {
                Some(d) => self.query(d)?,
                None => return Ok(()),
            }
        }
        let h = batch_budget.unwrap_or(budget * (1.0 - e) / 10.0);
        loop {
            self.refit_at_replan()?;
            let target = self.replan(true)?;
            let batch_start = self.spend;
            loop {
                if self.spend - batch_start >= h {
                    break;
                }
                match self.deficit_pick(&target, Some(budget)) {
                    Some(d) => self.query(d)?,
                    None => return Ok(()),
                }
            }
            if self
                .scenario
                .cost
                .iter()
                .all(|c| self.spend + c > budget + 1e-9)
            {
                return Ok(());
            }
        }
    }

    fn finish(mut self) -> Result<Trajectory> {
        let t = self.t();
        if t == 0 {
            return Err(Error::Config(
                "the budget cannot afford a single query".into(),
            ));
        }
        if self.checkpoints.last().map(|c| c.t) != Some(t) {
            self.checkpoint()?;
        }
        let last = self.checkpoints.last().expect("final checkpoint");
        Ok(Trajectory {
            final_t: t,
            spend: self.spend,
            counts: self.counts.clone(),
            kappa_final: self.log.kappa(),
            theta_final: last.theta_hat.clone(),
            beta_final: last.beta_hat,
            v_final: last.v_hat,
            rho2: self.rho2,
            flags: self.flags,
            checkpoints: self.checkpoints,
            log: self.log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::NuisanceKind;
    use crate::sources::{build_scenario, ScenarioConfig};
    use approx::assert_abs_diff_eq;

    fn oracle_nuisance_config() -> NuisanceConfig {
        NuisanceConfig {
            kind: NuisanceKind::Oracle,
            ..NuisanceConfig::default()
        }
    }

    fn base_config(policy: Policy, horizon: Horizon) -> RunConfig {
        let mut config = RunConfig::new(policy, horizon);
        config.nuisance = oracle_nuisance_config();
        config
    }

    fn sources_in_order(trajectory: &Trajectory) -> Vec<usize> {
        trajectory.log.records().iter().map(|r| r.source).collect()
    }

    #[test]
    fn test_fixed_deficit_sequence_frozen() {
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let config = base_config(
            Policy::Fixed {
                target: vec![0.5, 0.5],
            },
            Horizon::Count { total: 4 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_eq!(sources_in_order(&trajectory), vec![0, 1, 0, 1]);
        assert_eq!(trajectory.counts, vec![2, 2]);
        // Uneven target: (0.75, 0.25) over 8 queries.
        let config = base_config(
            Policy::Fixed {
                target: vec![0.75, 0.25],
            },
            Horizon::Count { total: 8 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_eq!(trajectory.counts, vec![6, 2]);
    }

    #[test]
    fn test_etc_frozen_commit_sequence() {
        // With two moments and two disjoint sources, any interim estimate
        // yields *some* κ̂; the point here is the mechanics: explore 0,1,
        // then commit all remaining steps per the projected target.
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let config = base_config(
            Policy::Etc {
                explore_fraction: Some(0.5),
            },
            Horizon::Count { total: 4 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        let order = sources_in_order(&trajectory);
        assert_eq!(&order[..2], &[0, 1], "exploration is uniform round-robin");
        // κ_T must sit in the feasible set: entries ≥ e·κ_ctr = (0.25, 0.25).
        for k in &trajectory.kappa_final {
            assert!(*k >= 0.25 - 1e-12);
        }
        assert_eq!(trajectory.final_t, 4);
    }

    #[test]
    fn test_etc_lands_on_projection() {
        // The committed terminal allocation is reached within 1/T.
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let total = 400;
        let config = base_config(
            Policy::Etc {
                explore_fraction: Some(0.1),
            },
            Horizon::Count { total },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        let k_hat = trajectory.checkpoints.last().unwrap().kappa_hat.clone().unwrap();
        let n_e = 40;
        let feasible = FeasibleSet::new(vec![0.5, 0.5], n_e as f64 / total as f64).unwrap();
        let terminal = project(&feasible, &SimplexPoint::new(k_hat).unwrap());
        for d in 0..2 {
            assert!(
                (trajectory.kappa_final[d] - terminal.as_slice()[d]).abs() <= 1.0 / total as f64 + 1e-9,
                "κ_T[{d}] = {} vs projected {}",
                trajectory.kappa_final[d],
                terminal.as_slice()[d]
            );
        }
    }

    #[test]
    fn test_etc_approaches_neyman_optimum() {
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let config = base_config(
            Policy::Etc {
                explore_fraction: Some(0.1),
            },
            Horizon::Count { total: 4000 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_abs_diff_eq!(trajectory.kappa_final[0], 2.0 / 3.0, epsilon = 0.05);
    }

    #[test]
    fn test_etg_batches_cover_horizon_exactly() {
        let s = build_scenario(&ScenarioConfig::family("two_sample_late")).unwrap();
        let config = base_config(
            Policy::Etg {
                explore_fraction: Some(0.1),
                batch_size: Some(130),
            },
            Horizon::Count { total: 1000 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_eq!(trajectory.final_t, 1000);
        assert_eq!(trajectory.counts.iter().sum::<usize>(), 1000);
        // Batches: explore 100, then 130·6 = 780 with remainder 120 folded
        // into the last batch.
        assert!(trajectory.checkpoints.last().unwrap().kappa_hat.is_some());
    }

    #[test]
    fn test_epsilon_greedy_always_explore_is_uniform() {
        let s = build_scenario(&ScenarioConfig::family("two_sample_iv")).unwrap();
        let config = base_config(
            Policy::EpsilonGreedy {
                schedule: EpsilonSchedule::Constant { epsilon: 1.0 },
                replan_every: 100,
            },
            Horizon::Count { total: 10_000 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_abs_diff_eq!(trajectory.kappa_final[0], 0.5, epsilon = 0.02);
    }

    #[test]
    fn test_epsilon_greedy_decaying_schedule_converges() {
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let config = base_config(
            Policy::EpsilonGreedy {
                schedule: EpsilonSchedule::Inverse { c0: 5.0 },
                replan_every: 100,
            },
            Horizon::Count { total: 4000 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_abs_diff_eq!(trajectory.kappa_final[0], 2.0 / 3.0, epsilon = 0.06);
    }

    #[test]
    fn test_budget_accounting_is_exact() {
        let s = build_scenario(&ScenarioConfig::family("two_confounders_cost")).unwrap();
        assert_eq!(s.cost, vec![2.0, 1.0]);
        for policy in [
            Policy::EtcCs {
                explore_fraction: Some(0.05),
            },
            Policy::EtgCs {
                explore_fraction: Some(0.05),
                batch_budget: None,
            },
            Policy::Fixed {
                target: vec![0.5, 0.5],
            },
        ] {
            let config = base_config(policy, Horizon::Budget { total: 500.0 });
            let trajectory = run_policy(&s, &config).unwrap();
            let ledger: f64 = trajectory
                .counts
                .iter()
                .zip(&s.cost)
                .map(|(n, c)| *n as f64 * c)
                .sum();
            assert_abs_diff_eq!(trajectory.spend, ledger, epsilon = 1e-9);
            assert!(trajectory.spend <= 500.0 + 1e-9);
            // Stopped because nothing is affordable.
            let cheapest = s.cost.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(500.0 - trajectory.spend < cheapest);
        }
    }

    #[test]
    fn test_cost_policies_approach_cost_optimum() {
        let s = build_scenario(&ScenarioConfig::family("two_confounders_cost")).unwrap();
        let config = base_config(
            Policy::EtcCs {
                explore_fraction: Some(0.05),
            },
            Horizon::Budget { total: 8000.0 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        assert_abs_diff_eq!(trajectory.kappa_final[0], 0.4, epsilon = 0.05);
    }

    #[test]
    fn test_checkpoint_schedule_and_kappa_exactness() {
        let s = build_scenario(&ScenarioConfig::family("two_sample_late")).unwrap();
        let config = base_config(
            Policy::Fixed {
                target: vec![0.5, 0.5],
            },
            Horizon::Count { total: 250 },
        );
        let trajectory = run_policy(&s, &config).unwrap();
        let ts: Vec<usize> = trajectory.checkpoints.iter().map(|c| c.t).collect();
        assert_eq!(ts, vec![100, 200, 250]);
        for c in &trajectory.checkpoints {
            // κ_t is exactly counts/t.
            let total: f64 = c.kappa_t.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.kappa_t[0], 0.5, epsilon = 1e-12);
            assert!(c.ci.contains(c.beta_hat));
            assert!(c.confseq_radius > c.ci.halfwidth());
            assert!(c.v_hat.is_finite());
        }
    }

    #[test]
    fn test_runs_are_bit_identical() {
        let s = build_scenario(&ScenarioConfig::family("two_sample_late")).unwrap();
        let config = base_config(
            Policy::Etg {
                explore_fraction: Some(0.2),
                batch_size: None,
            },
            Horizon::Count { total: 600 },
        );
        let a = run_policy(&s, &config).unwrap();
        let b = run_policy(&s, &config).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.beta_final.to_bits(), b.beta_final.to_bits());
        assert_eq!(a.v_final.to_bits(), b.v_final.to_bits());
        for (ca, cb) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(ca.beta_hat.to_bits(), cb.beta_hat.to_bits());
        }
        // A different run id draws different data.
        let mut other = config.clone();
        other.run_id = 1;
        let c = run_policy(&s, &other).unwrap();
        assert_ne!(a.beta_final.to_bits(), c.beta_final.to_bits());
    }

    #[test]
    fn test_oracle_policy_chases_kappa_star() {
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let config = base_config(Policy::Oracle, Horizon::Count { total: 300 });
        let trajectory = run_policy(&s, &config).unwrap();
        assert_abs_diff_eq!(trajectory.kappa_final[0], 2.0 / 3.0, epsilon = 1.0 / 300.0 + 1e-9);
    }

    #[test]
    fn test_under_identified_fixed_run_fails() {
        // Starving the uptake moment makes every checkpoint fit impossible.
        let s = build_scenario(&ScenarioConfig::family("two_sample_late")).unwrap();
        let config = base_config(
            Policy::Fixed {
                target: vec![1.0, 0.0],
            },
            Horizon::Count { total: 200 },
        );
        match run_policy(&s, &config) {
            Err(Error::UnderIdentified { moment }) => {
                assert_eq!(moment, "itt_uptake");
            }
            other => panic!("expected under-identification, got {other:?}"),
        }
    }

    #[test]
    fn test_config_validation_errors() {
        let s = build_scenario(&ScenarioConfig::family("neyman_allocation")).unwrap();
        let bad_simplex = base_config(
            Policy::Fixed {
                target: vec![0.7, 0.7],
            },
            Horizon::Count { total: 10 },
        );
        assert!(run_policy(&s, &bad_simplex).is_err());
        let bad_fraction = base_config(
            Policy::Etc {
                explore_fraction: Some(1.5),
            },
            Horizon::Count { total: 10 },
        );
        assert!(run_policy(&s, &bad_fraction).is_err());
        let wrong_horizon = base_config(
            Policy::EtcCs {
                explore_fraction: None,
            },
            Horizon::Count { total: 10 },
        );
        assert!(run_policy(&s, &wrong_horizon).is_err());
        let budget_for_count = base_config(
            Policy::Etg {
                explore_fraction: None,
                batch_size: None,
            },
            Horizon::Budget { total: 100.0 },
        );
        assert!(run_policy(&s, &budget_for_count).is_err());
        let bad_batch = base_config(
            Policy::Etg {
                explore_fraction: Some(0.5),
                batch_size: Some(60),
            },
            Horizon::Count { total: 100 },
        );
        assert!(run_policy(&s, &bad_batch).is_err());
        let bad_schedule = base_config(
            Policy::EpsilonGreedy {
                schedule: EpsilonSchedule::Constant { epsilon: 1.2 },
                replan_every: 100,
            },
            Horizon::Count { total: 10 },
        );
        assert!(run_policy(&s, &bad_schedule).is_err());
    }

    #[test]
    fn test_policy_serde_round_trip() {
        let policies = vec![
            Policy::Fixed {
                target: vec![0.4, 0.6],
            },
            Policy::Etg {
                explore_fraction: Some(0.1),
                batch_size: None,
            },
            Policy::EpsilonGreedy {
                schedule: EpsilonSchedule::Inverse { c0: 5.0 },
                replan_every: 100,
            },
            Policy::EtgCs {
                explore_fraction: None,
                batch_budget: Some(50.0),
            },
        ];
        for p in policies {
            let json = serde_json::to_string(&p).unwrap();
            let back: Policy = serde_json::from_str(&json).unwrap();
            assert_eq!(p.name(), back.name());
        }
        let toml_src = "type = \"etc\"\nexplore_fraction = 0.2\n";
        let p: Policy = toml::from_str(toml_src).unwrap();
        assert_eq!(p.name(), "etc");
    }

    #[test]
    fn test_fitted_nuisances_run_end_to_end() {
        // Linear nuisances on the LATE design: prequential snapshots are
        // refit at re-planning points and tagged onto later records only.
        let s = build_scenario(&ScenarioConfig::family("two_sample_late")).unwrap();
        let mut config = RunConfig::new(
            Policy::Etg {
                explore_fraction: Some(0.2),
                batch_size: None,
            },
            Horizon::Count { total: 800 },
        );
        config.nuisance = NuisanceConfig {
            kind: NuisanceKind::Linear,
            ..NuisanceConfig::default()
        };
        let trajectory = run_policy(&s, &config).unwrap();
        assert!(trajectory.log.snapshots().len() > 1, "refits happened");
        assert_abs_diff_eq!(trajectory.beta_final, 1.0, epsilon = 0.5);
        // Earlier records keep earlier snapshot tags.
        let first_tag = trajectory.log.records()[0].snapshot;
        let last_tag = trajectory.log.records().last().unwrap().snapshot;
        assert!(first_tag < last_tag);
    }
}
