//! Monte Carlo experiment harness: runs a grid of (policy × horizon) cells
//! over independent replications, aggregates the estimation metrics, and
//! writes a long-form CSV plus optional per-run JSON records.
//!
//! Replications are keyed by `(seed, run_id)` through counter-based streams,
//! so results are independent of execution order (parallel and serial runs
//! agree bit for bit) and of `num_runs` (raising it appends runs without
//! disturbing earlier ones). Every horizon is also run under the oracle
//! baseline — the true optimal allocation with exact nuisances — sharing
//! the same per-run streams, so the relative-regret comparison is paired:
//! both arms see the same draws wherever their queries coincide.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Interval;
use crate::nuisance::{NuisanceConfig, NuisanceKind};
use crate::policies::{run_policy, Horizon, Policy, RunConfig, RunFlags, Trajectory};
use crate::rng::derive_rng;
use crate::sources::{build_scenario, Scenario, ScenarioConfig};

/// Declarative experiment description, usually parsed from TOML.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_runs: usize,
    pub alpha: f64,
    pub checkpoint_every: usize,
    /// Confidence-sequence mixture parameter; `None` tunes per horizon.
    pub rho2: Option<f64>,
    /// Count horizons (total queries).
    pub horizons: Vec<usize>,
    /// Budget horizons (total spend), for cost-structured policies.
    pub budgets: Vec<f64>,
    pub scenario: ScenarioConfig,
    pub policies: Vec<Policy>,
    pub nuisance: NuisanceConfig,
    /// Write one JSON record per run when an output directory is given.
    pub write_runs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            num_runs: 500,
            alpha: 0.05,
            checkpoint_every: 100,
            rho2: None,
            horizons: vec![100, 1_000, 10_000],
            budgets: Vec::new(),
            scenario: ScenarioConfig::family("two_sample_late"),
            policies: vec![Policy::Etg {
                explore_fraction: None,
                batch_size: None,
            }],
            nuisance: NuisanceConfig::default(),
            write_runs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be ≥ 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        if self.horizons.is_empty() && self.budgets.is_empty() {
            return Err(Error::Config(
                "at least one horizon or budget is required".into(),
            ));
        }
        Ok(())
    }
}

/// One aggregated row of the long-form metrics table: a (policy, horizon)
/// cell summarized over its successful replications.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub policy: String,
    pub scenario: String,
    /// `"count"` or `"budget"`.
    pub horizon_kind: String,
    pub horizon: f64,
    /// Successful replications behind the averages.
    pub num_runs: usize,
    pub num_failures: usize,
    /// `"ok"`, or the first failure when no replication succeeded.
    pub status: String,
    pub mse: f64,
    /// 95% percentile-bootstrap band for the MSE (1000 resamples).
    pub mse_boot_lo: f64,
    pub mse_boot_hi: f64,
    /// MSE scaled by the horizon size, comparable to the variance bound.
    pub scaled_mse: f64,
    /// Percent excess MSE over the paired oracle baseline, when defined.
    pub relative_regret_pct: Option<f64>,
    /// Fraction of runs whose final interval covers the true target.
    pub coverage: f64,
    pub mean_ci_size: f64,
    pub mean_confseq_size: f64,
    pub kappa_mean: Vec<f64>,
    pub kappa_sd: Vec<f64>,
    /// Total non-fatal numerical events (ridges, boundary hits, kept
    /// targets) across runs.
    pub flag_events: usize,
}

/// Percent excess MSE of a policy over the oracle baseline. Errors with
/// [`Error::UndefinedMetric`] when the baseline MSE is zero.
pub fn relative_regret(mse_policy: f64, mse_oracle: f64) -> Result<f64> {
    if mse_oracle == 0.0 {
        return Err(Error::UndefinedMetric(
            "relative regret against a zero-MSE oracle baseline".into(),
        ));
    }
    Ok((mse_policy - mse_oracle) / mse_oracle * 100.0)
}

/// Per-run record written as JSON next to the metrics table.
#[derive(Serialize)]
struct RunRecord<'a> {
    policy: &'a str,
    scenario: &'a str,
    horizon_kind: &'a str,
    horizon: f64,
    run_id: u64,
    seed: u64,
    beta_star: Option<f64>,
    final_t: usize,
    spend: f64,
    counts: &'a [usize],
    kappa_final: &'a [f64],
    theta_final: &'a [f64],
    beta_final: f64,
    v_final: f64,
    rho2: f64,
    flags: RunFlags,
    checkpoints: &'a [crate::policies::Checkpoint],
}

/// What the aggregator keeps from one replication.
struct RunStats {
    beta_final: f64,
    final_t: usize,
    ci: Interval,
    confseq: Interval,
    kappa_final: Vec<f64>,
    flag_total: usize,
}

fn summarize(trajectory: &Trajectory) -> RunStats {
    let last = trajectory.checkpoints.last().expect("final checkpoint");
    RunStats {
        beta_final: trajectory.beta_final,
        final_t: trajectory.final_t,
        ci: last.ci,
        confseq: last.confseq,
        kappa_final: trajectory.kappa_final.clone(),
        flag_total: trajectory.flags.ridge_applied
            + trajectory.flags.boundary_hit
            + trajectory.flags.kept_previous_target,
    }
}

/// Runs the whole experiment grid. When `out_dir` is given, writes
/// `metrics.csv` there and (if configured) per-run JSON under `runs/`.
/// `jobs` caps the worker threads; `None` uses the default pool.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    jobs: Option<usize>,
) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| run_experiment_inner(config, out_dir))
        }
        None => run_experiment_inner(config, out_dir),
    }
}

fn run_experiment_inner(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let scenario = build_scenario(&config.scenario)?;
    let runs_dir = match out_dir {
        Some(dir) if config.write_runs => {
            let runs = dir.join("runs");
            fs::create_dir_all(&runs)?;
            Some(runs)
        }
        Some(dir) => {
            fs::create_dir_all(dir)?;
            None
        }
        None => None,
    };

    let horizons: Vec<Horizon> = config
        .horizons
        .iter()
        .map(|&total| Horizon::Count { total })
        .chain(config.budgets.iter().map(|&total| Horizon::Budget { total }))
        .collect();

    // Oracle baselines, one per horizon, paired with the policy runs by
    // shared (seed, run_id) streams.
    let mut baseline_mse: Vec<Option<f64>> = Vec::with_capacity(horizons.len());
    let can_baseline =
        scenario.truth.kappa_star.is_some() && scenario.truth.beta_star.is_some();
    for &horizon in &horizons {
        if !can_baseline {
            baseline_mse.push(None);
            continue;
        }
        let mut run_config = RunConfig::new(Policy::Oracle, horizon);
        run_config.alpha = config.alpha;
        run_config.checkpoint_every = config.checkpoint_every;
        run_config.rho2 = config.rho2;
        run_config.seed = config.seed;
        run_config.nuisance = NuisanceConfig {
            kind: NuisanceKind::Oracle,
            ..config.nuisance.clone()
        };
        let outcomes = run_cell(&scenario, &run_config, config.num_runs, None, "", 0)?;
        let beta_star = scenario.truth.beta_star.expect("checked");
        let errors: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.as_ref().ok())
            .map(|s| (s.beta_final - beta_star).powi(2))
            .collect();
        baseline_mse.push(if errors.is_empty() {
            None
        } else {
            Some(errors.iter().sum::<f64>() / errors.len() as f64)
        });
    }

    let mut rows = Vec::new();
    for (cell_index, policy) in config.policies.iter().enumerate() {
        for (h_index, &horizon) in horizons.iter().enumerate() {
            let mut run_config = RunConfig::new(policy.clone(), horizon);
            run_config.alpha = config.alpha;
            run_config.checkpoint_every = config.checkpoint_every;
            run_config.rho2 = config.rho2;
            run_config.seed = config.seed;
            run_config.nuisance = config.nuisance.clone();
            let cell_id = cell_index * horizons.len() + h_index;
            let outcomes = run_cell(
                &scenario,
                &run_config,
                config.num_runs,
                runs_dir.as_deref(),
                &config.scenario.family,
                cell_id,
            )?;
            rows.push(aggregate(
                &scenario,
                config,
                policy,
                horizon,
                &outcomes,
                baseline_mse[h_index],
                cell_id,
            ));
        }
    }

    if let Some(dir) = out_dir {
        write_metrics_csv(&rows, &dir.join("metrics.csv"))?;
    }
    Ok(rows)
}

/// Runs all replications of one cell in parallel. Per-run failures are
/// carried as strings; only I/O failures abort the experiment.
fn run_cell(
    scenario: &Scenario,
    run_config: &RunConfig,
    num_runs: usize,
    runs_dir: Option<&Path>,
    scenario_label: &str,
    cell_id: usize,
) -> Result<Vec<std::result::Result<RunStats, String>>> {
    let (kind, horizon) = horizon_parts(run_config.horizon);
    (0..num_runs as u64)
        .into_par_iter()
        .map(|run_id| -> Result<std::result::Result<RunStats, String>> {
            let mut per_run = run_config.clone();
            per_run.run_id = run_id;
            match run_policy(scenario, &per_run) {
                Ok(trajectory) => {
                    if let Some(dir) = runs_dir {
                        let record = RunRecord {
                            policy: per_run.policy.name(),
                            scenario: scenario_label,
                            horizon_kind: kind,
                            horizon,
                            run_id,
                            seed: per_run.seed,
                            beta_star: scenario.truth.beta_star,
                            final_t: trajectory.final_t,
                            spend: trajectory.spend,
                            counts: &trajectory.counts,
                            kappa_final: &trajectory.kappa_final,
                            theta_final: &trajectory.theta_final,
                            beta_final: trajectory.beta_final,
                            v_final: trajectory.v_final,
                            rho2: trajectory.rho2,
                            flags: trajectory.flags,
                            checkpoints: &trajectory.checkpoints,
                        };
                        let path = dir.join(format!(
                            "cell{cell_id}_{}_run{run_id}.json",
                            per_run.policy.name()
                        ));
                        let mut file = fs::File::create(path)?;
                        serde_json::to_writer(&mut file, &record)
                            .map_err(|e| Error::Config(format!("run record: {e}")))?;
                        file.write_all(b"\n")?;
                    }
                    Ok(Ok(summarize(&trajectory)))
                }
                Err(e) => Ok(Err(e.to_string())),
            }
        })
        .collect()
}

fn horizon_parts(horizon: Horizon) -> (&'static str, f64) {
    match horizon {
        Horizon::Count { total } => ("count", total as f64),
        Horizon::Budget { total } => ("budget", total),
    }
}

fn aggregate(
    scenario: &Scenario,
    config: &ExperimentConfig,
    policy: &Policy,
    horizon: Horizon,
    outcomes: &[std::result::Result<RunStats, String>],
    baseline_mse: Option<f64>,
    cell_id: usize,
) -> MetricsRow {
    let (horizon_kind, horizon_value) = horizon_parts(horizon);
    let successes: Vec<&RunStats> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let num_failures = outcomes.len() - successes.len();
    let n_src = scenario.num_sources();

    let mut row = MetricsRow {
        policy: policy.name().to_string(),
        scenario: scenario.name.clone(),
        horizon_kind: horizon_kind.to_string(),
        horizon: horizon_value,
        num_runs: successes.len(),
        num_failures,
        status: "ok".to_string(),
        mse: f64::NAN,
        mse_boot_lo: f64::NAN,
        mse_boot_hi: f64::NAN,
        scaled_mse: f64::NAN,
        relative_regret_pct: None,
        coverage: f64::NAN,
        mean_ci_size: f64::NAN,
        mean_confseq_size: f64::NAN,
        kappa_mean: vec![f64::NAN; n_src],
        kappa_sd: vec![f64::NAN; n_src],
        flag_events: successes.iter().map(|s| s.flag_total).sum(),
    };
    if successes.is_empty() {
        let first_error = outcomes
            .iter()
            .find_map(|o| o.as_ref().err())
            .cloned()
            .unwrap_or_else(|| "no runs".to_string());
        row.status = format!("failed: {first_error}");
        return row;
    }

    let n = successes.len() as f64;
    for d in 0..n_src {
        let mean = successes.iter().map(|s| s.kappa_final[d]).sum::<f64>() / n;
        let var = if successes.len() > 1 {
            successes
                .iter()
                .map(|s| (s.kappa_final[d] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        row.kappa_mean[d] = mean;
        row.kappa_sd[d] = var.sqrt();
    }
    row.mean_ci_size = successes.iter().map(|s| s.ci.hi - s.ci.lo).sum::<f64>() / n;
    row.mean_confseq_size = successes
        .iter()
        .map(|s| s.confseq.hi - s.confseq.lo)
        .sum::<f64>()
        / n;

    if let Some(beta_star) = scenario.truth.beta_star {
        let squared_errors: Vec<f64> = successes
            .iter()
            .map(|s| (s.beta_final - beta_star).powi(2))
            .collect();
        let mse = squared_errors.iter().sum::<f64>() / n;
        row.mse = mse;
        // The mean realized size matters for budget runs, where the final
        // count varies; scaling by it makes cells comparable.
        let mean_t = successes.iter().map(|s| s.final_t as f64).sum::<f64>() / n;
        row.scaled_mse = mse * mean_t;
        let (lo, hi) = bootstrap_band(&squared_errors, config.seed, cell_id);
        row.mse_boot_lo = lo;
        row.mse_boot_hi = hi;
        row.coverage = successes
            .iter()
            .filter(|s| s.ci.contains(beta_star))
            .count() as f64
            / n;
        row.relative_regret_pct =
            baseline_mse.and_then(|oracle| relative_regret(mse, oracle).ok());
    }
    row
}

/// 95% percentile bootstrap for the mean of `values`, 1000 resamples.
fn bootstrap_band(values: &[f64], seed: u64, cell_id: usize) -> (f64, f64) {
    const RESAMPLES: usize = 1000;
    let mut rng = derive_rng(seed, 0xB005_EED5 ^ cell_id as u64, u64::MAX);
    let n = values.len();
    let mut means: Vec<f64> = (0..RESAMPLES)
        .map(|_| {
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[rng.random_range(0..n)];
            }
            sum / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    (means[24], means[974])
}

const FIXED_COLUMNS: [&str; 16] = [
    "policy",
    "scenario",
    "horizon_kind",
    "horizon",
    "num_runs",
    "num_failures",
    "status",
    "mse",
    "mse_boot_lo",
    "mse_boot_hi",
    "scaled_mse",
    "relative_regret_pct",
    "coverage",
    "mean_ci_size",
    "mean_confseq_size",
    "flag_events",
];

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

fn parse_metric(field: &str, path: &Path, row: usize, column: &str) -> Result<f64> {
    if field.is_empty() {
        return Ok(f64::NAN);
    }
    field.parse::<f64>().map_err(|_| Error::Csv {
        path: path.display().to_string(),
        row,
        column: column.to_string(),
        message: format!("`{field}` is not a number"),
    })
}

/// Writes the long-form metrics table. Allocation statistics get one
/// `kappa_mean_d`/`kappa_sd_d` column pair per source; undefined metrics
/// are left empty.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let n_src = rows.iter().map(|r| r.kappa_mean.len()).max().unwrap_or(0);
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for d in 0..n_src {
        header.push(format!("kappa_mean_{d}"));
        header.push(format!("kappa_sd_{d}"));
    }
    writer.write_record(&header)?;
    for row in rows {
        let mut record: Vec<String> = vec![
            row.policy.clone(),
            row.scenario.clone(),
            row.horizon_kind.clone(),
            format!("{}", row.horizon),
            format!("{}", row.num_runs),
            format!("{}", row.num_failures),
            row.status.clone(),
            fmt_metric(row.mse),
            fmt_metric(row.mse_boot_lo),
            fmt_metric(row.mse_boot_hi),
            fmt_metric(row.scaled_mse),
            row.relative_regret_pct.map(|x| format!("{x}")).unwrap_or_default(),
            fmt_metric(row.coverage),
            fmt_metric(row.mean_ci_size),
            fmt_metric(row.mean_confseq_size),
            format!("{}", row.flag_events),
        ];
        for d in 0..n_src {
            record.push(row.kappa_mean.get(d).map(|x| fmt_metric(*x)).unwrap_or_default());
            record.push(row.kappa_sd.get(d).map(|x| fmt_metric(*x)).unwrap_or_default());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a metrics table written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(*expected) {
            return Err(Error::Csv {
                path: path.display().to_string(),
                row: 0,
                column: expected.to_string(),
                message: format!(
                    "header mismatch: expected `{expected}`, found `{}`",
                    header.get(i).unwrap_or("<missing>")
                ),
            });
        }
    }
    let n_src = (header.len() - FIXED_COLUMNS.len()) / 2;
    let mut rows = Vec::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let row_number = row_index + 1;
        let metric = |i: usize| parse_metric(field(i), path, row_number, FIXED_COLUMNS[i]);
        let mut kappa_mean = Vec::with_capacity(n_src);
        let mut kappa_sd = Vec::with_capacity(n_src);
        for d in 0..n_src {
            let base = FIXED_COLUMNS.len() + 2 * d;
            kappa_mean.push(parse_metric(field(base), path, row_number, "kappa_mean")?);
            kappa_sd.push(parse_metric(field(base + 1), path, row_number, "kappa_sd")?);
        }
        let rr = field(11);
        rows.push(MetricsRow {
            policy: field(0).to_string(),
            scenario: field(1).to_string(),
            horizon_kind: field(2).to_string(),
            horizon: metric(3)?,
            num_runs: field(4).parse().map_err(|_| Error::Csv {
                path: path.display().to_string(),
                row: row_number,
                column: "num_runs".into(),
                message: format!("`{}` is not an integer", field(4)),
            })?,
            num_failures: field(5).parse().map_err(|_| Error::Csv {
                path: path.display().to_string(),
                row: row_number,
                column: "num_failures".into(),
                message: format!("`{}` is not an integer", field(5)),
            })?,
            status: field(6).to_string(),
            mse: metric(7)?,
            mse_boot_lo: metric(8)?,
            mse_boot_hi: metric(9)?,
            scaled_mse: metric(10)?,
            relative_regret_pct: if rr.is_empty() {
                None
            } else {
                Some(parse_metric(rr, path, row_number, "relative_regret_pct")?)
            },
            coverage: metric(12)?,
            mean_ci_size: metric(13)?,
            mean_confseq_size: metric(14)?,
            flag_events: field(15).parse().map_err(|_| Error::Csv {
                path: path.display().to_string(),
                row: row_number,
                column: "flag_events".into(),
                message: format!("`{}` is not an integer", field(15)),
            })?,
            kappa_mean,
            kappa_sd,
        });
    }
    Ok(rows)
}
