//! `oms`: run Monte Carlo experiments over adaptive data-collection
//! policies, evaluate oracle allocations, replay logged CSV data, and
//! validate experiment configurations.
//!
//! Exit codes: 0 on success, 1 for configuration or estimation errors,
//! 2 for I/O failures and malformed command lines.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oms::allocation::{estimate_oracle_simplex, estimate_oracle_simplex_with_cost};
use oms::harness::{run_experiment, ExperimentConfig, MetricsRow};
use oms::policies::{validate_config, Horizon, RunConfig};
use oms::sources::{build_scenario, ScenarioConfig, FAMILIES};
use oms::variance::{oracle_surface, variance_at};
use oms::{Error, Result, SimplexPoint};

#[derive(Parser)]
#[command(
    name = "oms",
    version,
    about = "Online moment selection: adaptive data-collection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid described by a TOML config.
    Run(RunArgs),
    /// Estimate the oracle allocation κ* and its variance for a scenario.
    Oracle(OracleArgs),
    /// Run an experiment against logged CSV data via bootstrap resampling.
    Replay(ReplayArgs),
    /// Check a config without running it.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics.csv and per-run JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    /// Scenario family (or shorthand: neyman, iv, late, conf_med, two_conf, rff).
    #[arg(long)]
    scenario: String,
    /// Scenario parameter overrides, repeatable: --param key=value.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Shorthand for --param sigma1=…
    #[arg(long)]
    sigma1: Option<f64>,
    /// Shorthand for --param sigma0=…
    #[arg(long)]
    sigma0: Option<f64>,
    /// Also report the variance at this allocation, e.g. --kappa 0.5,0.5.
    #[arg(long, value_delimiter = ',')]
    kappa: Option<Vec<f64>>,
    /// Minimize variance·spend using the scenario's query costs.
    #[arg(long)]
    cost_weighted: bool,
    /// Monte Carlo draws per source when no closed form is available.
    #[arg(long, default_value_t = 1_000_000)]
    mc_samples: usize,
    /// Seed for scenario construction and Monte Carlo draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Experiment TOML file; its scenario supplies the schema and moment
    /// model, while samples are drawn from the CSV files.
    #[arg(long)]
    config: PathBuf,
    /// One CSV file per source, in source order.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Target value to score against, when known.
    #[arg(long)]
    true_beta: Option<f64>,
    /// Output directory for metrics.csv and per-run JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Csv { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let rows = run_experiment(&config, args.out.as_deref(), args.jobs)?;
    print_rows(&rows);
    if let Some(out) = &args.out {
        println!("wrote {}", out.join("metrics.csv").display());
    }
    Ok(())
}

fn print_rows(rows: &[MetricsRow]) {
    for row in rows {
        let kappa = row
            .kappa_mean
            .iter()
            .map(|k| format!("{k:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        if row.status == "ok" {
            let rr = row
                .relative_regret_pct
                .map(|r| format!("{r:.2}%"))
                .unwrap_or_else(|| "-".to_string());
            println!(
                "policy={} horizon={}:{} runs={} mse={:.6e} rr={} coverage={:.3} kappa=({})",
                row.policy,
                row.horizon_kind,
                row.horizon,
                row.num_runs,
                row.mse,
                rr,
                row.coverage,
                kappa
            );
        } else {
            println!(
                "policy={} horizon={}:{} {} ({} failures)",
                row.policy, row.horizon_kind, row.horizon, row.status, row.num_failures
            );
        }
    }
}

/// Maps command-line shorthand to full scenario family names.
fn resolve_family(name: &str) -> String {
    match name {
        "neyman" => "neyman_allocation".to_string(),
        "iv" => "two_sample_iv".to_string(),
        "late" => "two_sample_late".to_string(),
        "conf_med" | "mediator" => "confounder_mediator".to_string(),
        "two_conf" | "cost" => "two_confounders_cost".to_string(),
        "rff" => "rff_iv".to_string(),
        other => other.to_string(),
    }
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let family = resolve_family(&args.scenario);
    if !FAMILIES.contains(&family.as_str()) {
        return Err(Error::Config(format!(
            "unknown scenario `{}`; families: {}",
            args.scenario,
            FAMILIES.join(", ")
        )));
    }
    let mut scenario_config = ScenarioConfig::family(&family);
    scenario_config.seed = args.seed;
    if let Some(sigma1) = args.sigma1 {
        scenario_config.params.insert("sigma1".into(), sigma1);
    }
    if let Some(sigma0) = args.sigma0 {
        scenario_config.params.insert("sigma0".into(), sigma0);
    }
    for pair in &args.params {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--param expects key=value, got `{pair}`"))
        })?;
        let value: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("--param {key}: `{value}` is not a number")))?;
        scenario_config.params.insert(key.to_string(), value);
    }
    let scenario = build_scenario(&scenario_config)?;
    let surface = oracle_surface(&scenario, args.mc_samples, args.seed)?;
    let kappa_star = if args.cost_weighted {
        estimate_oracle_simplex_with_cost(&surface, &scenario.cost, 1e-5)?
    } else {
        estimate_oracle_simplex(&surface, 1e-5)?
    };
    let v_star = variance_at(&surface, &kappa_star);
    let formatted = kappa_star
        .as_slice()
        .iter()
        .map(|k| format!("{k:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!("scenario = {}", scenario.name);
    println!("kappa_star = ({formatted})");
    println!("V_star = {v_star:.4}");
    if args.cost_weighted {
        let spend: f64 = kappa_star
            .as_slice()
            .iter()
            .zip(&scenario.cost)
            .map(|(k, c)| k * c)
            .sum();
        println!("cost_weighted_objective = {:.4}", v_star * spend);
    }
    if let Some(kappa) = args.kappa {
        let point = SimplexPoint::new(kappa)?;
        let v = variance_at(&surface, &point);
        let at = point
            .as_slice()
            .iter()
            .map(|k| format!("{k:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!("V({at}) = {v:.4}");
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.scenario.replay_paths = Some(args.data.clone());
    if args.true_beta.is_some() {
        config.scenario.true_beta = args.true_beta;
    }
    let rows = run_experiment(&config, args.out.as_deref(), args.jobs)?;
    print_rows(&rows);
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let scenario = build_scenario(&config.scenario)?;
    let horizons: Vec<Horizon> = config
        .horizons
        .iter()
        .map(|&total| Horizon::Count { total })
        .chain(config.budgets.iter().map(|&total| Horizon::Budget { total }))
        .collect();
    let mut cells = 0usize;
    for policy in &config.policies {
        let mut compatible = 0usize;
        let mut last_error = None;
        for &horizon in &horizons {
            let mut run_config = RunConfig::new(policy.clone(), horizon);
            run_config.alpha = config.alpha;
            run_config.checkpoint_every = config.checkpoint_every;
            run_config.rho2 = config.rho2;
            run_config.nuisance = config.nuisance.clone();
            match validate_config(&scenario, &run_config) {
                Ok(()) => compatible += 1,
                Err(e) => last_error = Some(e),
            }
        }
        if compatible == 0 {
            return Err(last_error.expect("at least one horizon"));
        }
        cells += compatible;
        if compatible < horizons.len() {
            eprintln!(
                "note: policy `{}` pairs with {compatible} of {} horizons",
                policy.name(),
                horizons.len()
            );
        }
    }
    println!(
        "configuration ok: scenario `{}`, {} policies, {} runnable cells, {} runs each",
        scenario.name,
        config.policies.len(),
        cells,
        config.num_runs
    );
    Ok(())
}
