//! Queryable data sources: the built-in synthetic scenario families plus a
//! bootstrap replay source over user-supplied CSV files.
//!
//! A [`Scenario`] wires a [`MomentModel`] to |D| samplers, a cost vector, and
//! (for synthetic families) the ground truth: θ*, β* = f_tar(θ*), oracle
//! nuisance functions, the analytic oracle simplex κ* where a closed form
//! exists, and population moment matrices (G*, Ω*) for exact oracle variance
//! surfaces.
//!
//! Built-in families (selected by `family` in the scenario config):
//!
//! - `neyman_allocation` — two arms with different outcome noise; the
//!   classic σ-proportional allocation problem.
//! - `two_sample_iv` — linear instrumental variables split across a
//!   (Z, X) source and a (Z, Y) source.
//! - `two_sample_late` — intent-to-treat AIPW moments split across a
//!   (W, Z, Y) source and a (W, Z, X) source; β is the outcome/uptake ratio.
//! - `confounder_mediator` — backdoor AIPW and frontdoor moments for the
//!   same effect from a (W, X, Y) source and an (X, M, Y) source.
//! - `two_confounders_cost` — a full-covariate source (U, W, X, Y) twice as
//!   expensive as a reduced source (W, X, Y); co-observed moments make the
//!   cheap source informative through a control-variate coupling.
//! - `rff_iv` — the `two_sample_late` structure with nonlinear structural
//!   equations drawn from random-Fourier-feature approximations of Gaussian
//!   processes; truth is populated by quadrature at build time.
//!
//! Replay mode swaps the synthetic samplers for with-replacement bootstrap
//! samplers over CSV rows while keeping the family's moment model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    aipw_score, frontdoor_score, FrontdoorTables, Moment, MomentModel, Sample,
};
use crate::nuisance::{
    NuisanceSnapshot, PropensityFn, RegressionFn, SlotFn, SlotKind, SlotSpec,
};

/// A sampler: maps a random stream to one i.i.d. draw.
pub type SamplerFn = Arc<dyn Fn(&mut dyn RngCore) -> Sample + Send + Sync>;

/// Population moment matrices at the truth, unmasked: `g_star` = E[∇_θ ψ̃]
/// and `omega_star[i][j]` = E[ψ̃_i ψ̃_j] under co-observation of i and j.
#[derive(Clone, Debug)]
pub struct Population {
    pub g_star: DMatrix<f64>,
    pub omega_star: DMatrix<f64>,
}

/// Ground truth attached to synthetic scenarios. Replay scenarios populate
/// only the fields the user supplies.
#[derive(Clone, Default)]
pub struct Truth {
    pub theta_star: Option<Vec<f64>>,
    pub beta_star: Option<f64>,
    pub oracle_nuisance: Option<NuisanceSnapshot>,
    /// Analytic oracle simplex, when a closed form exists.
    pub kappa_star: Option<Vec<f64>>,
    /// Analytic population moments for exact oracle variance surfaces.
    pub population: Option<Population>,
}

/// A fully wired scenario: model, samplers, costs, truth.
pub struct Scenario {
    pub name: String,
    pub model: MomentModel,
    samplers: Vec<SamplerFn>,
    /// Per-query cost of each source; all ones unless configured.
    pub cost: Vec<f64>,
    pub truth: Truth,
    /// How fitted nuisances are trained for this scenario's slots.
    pub slot_specs: Vec<SlotSpec>,
}

impl Scenario {
    pub fn num_sources(&self) -> usize {
        self.samplers.len()
    }

    /// Draws one i.i.d. sample from a source using the given stream.
    pub fn query(&self, source: usize, rng: &mut dyn RngCore) -> Result<Sample> {
        let sampler = self.samplers.get(source).ok_or_else(|| {
            Error::Config(format!(
                "source index {source} out of range for scenario `{}` with {} sources",
                self.name,
                self.samplers.len()
            ))
        })?;
        Ok(sampler(rng))
    }
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("num_sources", &self.samplers.len())
            .field("cost", &self.cost)
            .finish()
    }
}

/// Draws one sample from the indexed source (free-function form of
/// [`Scenario::query`]).
pub fn query(scenario: &Scenario, source: usize, rng: &mut dyn RngCore) -> Result<Sample> {
    scenario.query(source, rng)
}

/// Returns the scenario's exact nuisance functions as a snapshot.
///
/// # Errors
/// Configuration error when the scenario has no truth (replay sources).
pub fn oracle_nuisance(scenario: &Scenario) -> Result<NuisanceSnapshot> {
    scenario.truth.oracle_nuisance.clone().ok_or_else(|| {
        Error::Config(format!(
            "scenario `{}` has no oracle nuisances (replay data has no known truth)",
            scenario.name
        ))
    })
}

/// Scenario configuration: a named family plus its numeric parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// One of the built-in family names.
    pub family: String,
    /// Family-specific numeric parameters; unset keys take family defaults.
    pub params: BTreeMap<String, f64>,
    /// Per-source query costs; family default when absent.
    pub cost: Option<Vec<f64>>,
    /// Seed for the random-Fourier-feature structural functions.
    pub seed: u64,
    /// CSV paths replacing the synthetic samplers, one per source.
    pub replay_paths: Option<Vec<PathBuf>>,
    /// User-supplied true target for replay MSE computation.
    pub true_beta: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            family: String::new(),
            params: BTreeMap::new(),
            cost: None,
            seed: 0,
            replay_paths: None,
            true_beta: None,
        }
    }
}

impl ScenarioConfig {
    /// Convenience constructor for a family with default parameters.
    pub fn family(name: &str) -> Self {
        ScenarioConfig {
            family: name.to_string(),
            ..ScenarioConfig::default()
        }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }
}

pub const FAMILIES: [&str; 6] = [
    "neyman_allocation",
    "two_sample_iv",
    "two_sample_late",
    "confounder_mediator",
    "two_confounders_cost",
    "rff_iv",
];

/// Builds a scenario from a config: synthetic samplers and analytic truth
/// for the built-in families, or bootstrap samplers when `replay_paths` is
/// set (truth then reduces to the user-supplied β*, if any).
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    let mut scenario = match config.family.as_str() {
        "neyman_allocation" => neyman_allocation(config)?,
        "two_sample_iv" => two_sample_iv(config)?,
        "two_sample_late" => two_sample_late(config)?,
        "confounder_mediator" => confounder_mediator(config)?,
        "two_confounders_cost" => two_confounders_cost(config)?,
        "rff_iv" => rff_iv(config)?,
        other => {
            return Err(Error::Config(format!(
                "unknown scenario family `{other}`; built-ins are {FAMILIES:?}"
            )))
        }
    };
    if let Some(cost) = &config.cost {
        if cost.len() != scenario.num_sources() {
            return Err(Error::Config(format!(
                "cost vector has {} entries for {} sources",
                cost.len(),
                scenario.num_sources()
            )));
        }
        if cost.iter().any(|c| *c <= 0.0 || !c.is_finite()) {
            return Err(Error::Config("cost entries must be strictly positive".into()));
        }
        scenario.cost = cost.clone();
    }
    if let Some(paths) = &config.replay_paths {
        if paths.len() != scenario.num_sources() {
            return Err(Error::Config(format!(
                "{} replay paths for {} sources",
                paths.len(),
                scenario.num_sources()
            )));
        }
        // Each replay file must carry the variables of its source's moments;
        // binding is by column name, so extra columns and order are free.
        let schemas = source_schemas(&scenario);
        let mut samplers = Vec::with_capacity(paths.len());
        for (path, schema) in paths.iter().zip(&schemas) {
            samplers.push(load_empirical(path, schema, config.seed)?);
        }
        scenario.samplers = samplers;
        scenario.truth = Truth {
            beta_star: config.true_beta,
            ..Truth::default()
        };
        scenario.name = format!("{}_replay", scenario.name);
    }
    Ok(scenario)
}

/// The variable names each source must provide: the union of `requires`
/// over the moments its mask reveals.
pub fn source_schemas(scenario: &Scenario) -> Vec<Vec<String>> {
    (0..scenario.num_sources())
        .map(|d| {
            let mut names: Vec<String> = Vec::new();
            for (i, m) in scenario.model.moments().iter().enumerate() {
                if scenario.model.mask(d)[i] {
                    for r in &m.requires {
                        if !names.contains(r) {
                            names.push(r.clone());
                        }
                    }
                }
            }
            names
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Empirical (replay) sources
// ---------------------------------------------------------------------------

/// Loads a CSV into a with-replacement bootstrap sampler binding the given
/// schema by column name. The seed decorrelates row draws between samplers
/// that happen to consume identical streams.
///
/// # Errors
/// Missing column or non-numeric cell, reported with path, row, and column.
pub fn load_empirical(csv_path: &Path, schema: &[String], rng_seed: u64) -> Result<SamplerFn> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Csv {
        path: csv_path.display().to_string(),
        row: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: csv_path.display().to_string(),
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let mut indices = Vec::with_capacity(schema.len());
    for name in schema {
        let idx = headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Csv {
            path: csv_path.display().to_string(),
            row: 0,
            column: name.clone(),
            message: "column missing from header".into(),
        })?;
        indices.push(idx);
    }
    let shared_schema: Arc<[String]> = schema.iter().cloned().collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_num, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: csv_path.display().to_string(),
            row: row_num + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(indices.len());
        for (&idx, name) in indices.iter().zip(schema) {
            let cell = record.get(idx).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                path: csv_path.display().to_string(),
                row: row_num + 1,
                column: name.clone(),
                message: format!("non-numeric cell `{cell}`"),
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: csv_path.display().to_string(),
            row: 0,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let rows = Arc::new(rows);
    let n = rows.len() as u64;
    // SplitMix64-style avalanche of the seed, folded into each draw so two
    // sources replaying different files from identical stream states still
    // sample independent row sequences.
    let seed_mix = {
        let mut z = rng_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    Ok(Arc::new(move |rng: &mut dyn RngCore| {
        let r = rng.next_u64() ^ seed_mix;
        let idx = ((r as u128 * n as u128) >> 64) as usize;
        Sample::new(shared_schema.clone(), rows[idx].clone())
    }))
}

// ---------------------------------------------------------------------------
// Shared numeric helpers
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(rng: &mut dyn RngCore, p: f64) -> f64 {
    f64::from(rng.random::<f64>() < p)
}

fn check_probability(value: f64, what: &str) -> Result<f64> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(Error::Config(format!(
            "{what} = {value} must lie strictly inside (0, 1)"
        )))
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial. Standard construction; n up to a few hundred is
/// numerically solid in double precision.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-based initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n(x) and P'_n(x) by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Mean of `f` over Uniform[-half_width, half_width] by 64-node quadrature.
fn uniform_mean(half_width: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(64);
    // ∫ f dU / (2h) with U = h·x: the h factors cancel into the 1/2 weight.
    nodes
        .iter()
        .zip(&weights)
        .map(|(x, w)| 0.5 * w * f(half_width * x))
        .sum()
}

/// A smooth function of one variable pre-evaluated on a dense uniform grid,
/// read back by linear interpolation (clamped at the support edges). With
/// 2049 points over the confounder support and the gentle curvature of the
/// scenario links, the interpolation error is below 1e-6 — it exists so the
/// oracle nuisances of the nonlinear family cost a few flops per moment
/// evaluation instead of a quadrature pass.
#[derive(Clone)]
struct Tabulated1d {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl Tabulated1d {
    fn build(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let step = (hi - lo) / (n - 1) as f64;
        let values = (0..n).map(|i| f(lo + step * i as f64)).collect();
        Tabulated1d { lo, step, values }
    }

    fn eval(&self, x: f64) -> f64 {
        let pos = ((x - self.lo) / self.step).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (pos as usize).min(self.values.len() - 2);
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

// ---------------------------------------------------------------------------
// neyman_allocation
// ---------------------------------------------------------------------------

/// Two sources emit the treated / control outcomes directly:
/// Y1 ~ Normal(μ1, σ1²) from source 0, Y0 ~ Normal(μ0, σ0²) from source 1.
/// Moments: ψ̃ = [Y1 − β − α, Y0 − α] with θ = (β, α); β* = μ1 − μ0.
/// The oracle variance is σ1²/κ1 + σ0²/κ2, minimized by the σ-proportional
/// allocation κ* = (σ1, σ0)/(σ1 + σ0).
fn neyman_allocation(config: &ScenarioConfig) -> Result<Scenario> {
    let sigma1 = config.param("sigma1", 2.0);
    let sigma0 = config.param("sigma0", 1.0);
    let mu1 = config.param("mu1", 1.0);
    let mu0 = config.param("mu0", 0.0);
    if sigma1 <= 0.0 || sigma0 <= 0.0 {
        return Err(Error::Config("neyman_allocation needs sigma1, sigma0 > 0".into()));
    }

    let moments = vec![
        Moment {
            name: "treated_mean".into(),
            requires: vec!["Y1".into()],
            slots: vec![],
            psi: Arc::new(|s: &Sample, th: &[f64], _: &NuisanceSnapshot| {
                Ok(s.require("Y1", "treated mean moment")? - th[0] - th[1])
            }),
            jacobian: Some(Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| {
                Ok(vec![-1.0, -1.0])
            })),
        },
        Moment {
            name: "control_mean".into(),
            requires: vec!["Y0".into()],
            slots: vec![],
            psi: Arc::new(|s: &Sample, th: &[f64], _: &NuisanceSnapshot| {
                Ok(s.require("Y0", "control mean moment")? - th[1])
            }),
            jacobian: Some(Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| {
                Ok(vec![0.0, -1.0])
            })),
        },
    ];
    let model = MomentModel::with_first_param_target(
        "neyman_allocation",
        2,
        vec![(-50.0, 50.0); 2],
        vec![vec![true, false], vec![false, true]],
        moments,
        true,
    )?;

    let schema1: Arc<[String]> = ["Y1".to_string()].into_iter().collect();
    let schema0: Arc<[String]> = ["Y0".to_string()].into_iter().collect();
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            Sample::new(schema1.clone(), vec![mu1 + sigma1 * standard_normal(rng)])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            Sample::new(schema0.clone(), vec![mu0 + sigma0 * standard_normal(rng)])
        }),
    ];

    let g_star = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 0.0, -1.0]);
    let omega_star =
        DMatrix::from_row_slice(2, 2, &[sigma1 * sigma1, 0.0, 0.0, sigma0 * sigma0]);
    let truth = Truth {
        theta_star: Some(vec![mu1 - mu0, mu0]),
        beta_star: Some(mu1 - mu0),
        oracle_nuisance: Some(NuisanceSnapshot::exact(BTreeMap::new())),
        kappa_star: Some(vec![
            sigma1 / (sigma1 + sigma0),
            sigma0 / (sigma1 + sigma0),
        ]),
        population: Some(Population { g_star, omega_star }),
    };

    Ok(Scenario {
        name: "neyman_allocation".into(),
        model,
        samplers,
        cost: vec![1.0, 1.0],
        truth,
        slot_specs: vec![],
    })
}

// ---------------------------------------------------------------------------
// two_sample_iv
// ---------------------------------------------------------------------------

/// Linear IV with the first stage and the reduced form in separate sources:
/// source 0 draws (Z, X) with X = αZ + σ_x ε, source 1 draws (Z, Y) with
/// Y = αβZ + σ_y ε, Z ~ Normal(0, 1) in both. Moments
/// ψ̃ = [Z(X − αZ), Z(Y − αβZ)] with θ = (β, α). The αβ product makes the
/// model non-affine in θ (the one built-in exercising the iterative solver).
fn two_sample_iv(config: &ScenarioConfig) -> Result<Scenario> {
    let alpha = config.param("alpha", 1.0);
    let beta = config.param("beta", 1.0);
    let sigma_x = config.param("sigma_x", 1.0);
    let sigma_y = config.param("sigma_y", 1.0);
    if alpha == 0.0 {
        return Err(Error::Config(
            "two_sample_iv needs alpha != 0 (instrument relevance)".into(),
        ));
    }

    let moments = vec![
        Moment {
            name: "first_stage".into(),
            requires: vec!["Z".into(), "X".into()],
            slots: vec![],
            psi: Arc::new(|s: &Sample, th: &[f64], _: &NuisanceSnapshot| {
                let z = s.require("Z", "first-stage moment")?;
                let x = s.require("X", "first-stage moment")?;
                Ok(z * (x - th[1] * z))
            }),
            jacobian: Some(Arc::new(|s: &Sample, _: &[f64], _: &NuisanceSnapshot| {
                let z = s.require("Z", "first-stage moment")?;
                Ok(vec![0.0, -z * z])
            })),
        },
        Moment {
            name: "reduced_form".into(),
            requires: vec!["Z".into(), "Y".into()],
            slots: vec![],
            psi: Arc::new(|s: &Sample, th: &[f64], _: &NuisanceSnapshot| {
                let z = s.require("Z", "reduced-form moment")?;
                let y = s.require("Y", "reduced-form moment")?;
                Ok(z * (y - th[1] * th[0] * z))
            }),
            jacobian: Some(Arc::new(|s: &Sample, th: &[f64], _: &NuisanceSnapshot| {
                let z = s.require("Z", "reduced-form moment")?;
                Ok(vec![-th[1] * z * z, -th[0] * z * z])
            })),
        },
    ];
    let model = MomentModel::with_first_param_target(
        "two_sample_iv",
        2,
        vec![(-50.0, 50.0); 2],
        vec![vec![true, false], vec![false, true]],
        moments,
        false,
    )?;

    let schema_x: Arc<[String]> = ["Z".to_string(), "X".to_string()].into_iter().collect();
    let schema_y: Arc<[String]> = ["Z".to_string(), "Y".to_string()].into_iter().collect();
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            let z = standard_normal(rng);
            let x = alpha * z + sigma_x * standard_normal(rng);
            Sample::new(schema_x.clone(), vec![z, x])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            let z = standard_normal(rng);
            let y = alpha * beta * z + sigma_y * standard_normal(rng);
            Sample::new(schema_y.clone(), vec![z, y])
        }),
    ];

    // E[Z²] = 1, so E[∇ψ̃] has the -Z² factors collapse to constants and
    // E[ψ̃_i²] = Var of the noise each moment isolates.
    let g_star = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -alpha, -beta]);
    let omega_star = DMatrix::from_row_slice(
        2,
        2,
        &[sigma_x * sigma_x, 0.0, 0.0, sigma_y * sigma_y],
    );
    // V(κ) = (β²σ_x²/κ1 + σ_y²/κ2)/α², minimized at κ1 ∝ β·σ_x, κ2 ∝ σ_y.
    let k1 = beta.abs() * sigma_x;
    let k2 = sigma_y;
    let kappa_star = if k1 + k2 > 0.0 {
        Some(vec![k1 / (k1 + k2), k2 / (k1 + k2)])
    } else {
        None
    };
    let truth = Truth {
        theta_star: Some(vec![beta, alpha]),
        beta_star: Some(beta),
        oracle_nuisance: Some(NuisanceSnapshot::exact(BTreeMap::new())),
        kappa_star,
        population: Some(Population { g_star, omega_star }),
    };

    Ok(Scenario {
        name: "two_sample_iv".into(),
        model,
        samplers,
        cost: vec![1.0, 1.0],
        truth,
        slot_specs: vec![],
    })
}

// ---------------------------------------------------------------------------
// two_sample_late (linear) and its shared moment structure
// ---------------------------------------------------------------------------

/// The intent-to-treat AIPW moment: ψ_AIPW(W, Z, R; π, μ) − subtract(θ),
/// where R is the outcome (moment 1) or the treatment uptake (moment 2).
#[allow(clippy::too_many_arguments)]
fn late_moment(
    name: &str,
    response: &str,
    pi_slot: &'static str,
    mu_slot: &'static str,
    subtract: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    subtract_grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
) -> Moment {
    let response = response.to_string();
    let ctx = name.to_string();
    let psi_response = response.clone();
    let psi_ctx = ctx.clone();
    Moment {
        name: name.into(),
        requires: vec!["W".into(), "Z".into(), response.clone()],
        slots: vec![pi_slot.into(), mu_slot.into()],
        psi: Arc::new(move |s: &Sample, th: &[f64], eta: &NuisanceSnapshot| {
            let w = s.require("W", &psi_ctx)?;
            let z = s.require("Z", &psi_ctx)?;
            let r = s.require(&psi_response, &psi_ctx)?;
            let pw = eta.propensity(pi_slot, &[w])?;
            let mu1 = eta.regression(mu_slot, 1.0, &[w])?;
            let mu0 = eta.regression(mu_slot, 0.0, &[w])?;
            let score = aipw_score(
                &[w],
                z,
                r,
                |_| pw,
                |zz, _| if zz == 1.0 { mu1 } else { mu0 },
            )?;
            Ok(score - subtract(th))
        }),
        jacobian: Some(Arc::new(move |_: &Sample, th: &[f64], _: &NuisanceSnapshot| {
            Ok(subtract_grad(th).iter().map(|g| -g).collect())
        })),
    }
}

fn late_model(name: &str) -> Result<MomentModel> {
    let moments = vec![
        // ψ_AIPW(W, Z, Y) − β·α: the intent-to-treat effect on the outcome.
        late_moment(
            "itt_outcome",
            "Y",
            "pi_y",
            "mu_y",
            Arc::new(|th: &[f64]| th[0] * th[1]),
            Arc::new(|th: &[f64]| vec![th[1], th[0]]),
        ),
        // ψ_AIPW(W, Z, X) − α: the intent-to-treat effect on uptake.
        late_moment(
            "itt_uptake",
            "X",
            "pi_x",
            "mu_x",
            Arc::new(|th: &[f64]| th[1]),
            Arc::new(|_: &[f64]| vec![0.0, 1.0]),
        ),
    ];
    MomentModel::with_first_param_target(
        name,
        2,
        vec![(-50.0, 50.0); 2],
        vec![vec![true, false], vec![false, true]],
        moments,
        false, // the β·α product term
    )
}

fn late_slot_specs() -> Vec<SlotSpec> {
    vec![
        SlotSpec {
            name: "pi_y".into(),
            source: 0,
            kind: SlotKind::Propensity {
                treatment: "Z".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "mu_y".into(),
            source: 0,
            kind: SlotKind::Regression {
                response: "Y".into(),
                treatment: "Z".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "pi_x".into(),
            source: 1,
            kind: SlotKind::Propensity {
                treatment: "Z".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "mu_x".into(),
            source: 1,
            kind: SlotKind::Regression {
                response: "X".into(),
                treatment: "Z".into(),
                covariates: vec!["W".into()],
            },
        },
    ]
}

/// Linear two-sample split: source 0 draws (W, Z, Y), source 1 draws
/// (W, Z, X), with binary W and Z so the logistic propensity and the linear
/// outcome models are exactly specified.
///
/// DGP: W ~ Bernoulli(pw); Z | W ~ Bernoulli(σ(a0 + a1·W));
/// X | Z, W ~ Bernoulli(c0 + c1·Z + c2·W); Y | Z, W ~ Normal(d0 + d1·Z +
/// d2·W, σ_y²). Then α* = c1 (uptake effect), ITT_Y = d1, β* = d1/c1.
///
/// The default constants put the oracle simplex near (0.66, 0.34): the two
/// moment variances are v1 = σ_y²·E[1/π + 1/(1−π)] and v2 = E[q_1(1−q_1)/π +
/// q_0(1−q_0)/(1−π)] (q_z the uptake probability), and κ1* = √v1/(√v1+β√v2).
fn two_sample_late(config: &ScenarioConfig) -> Result<Scenario> {
    let pw = check_probability(config.param("pw", 0.5), "two_sample_late pw")?;
    let a0 = config.param("a0", -0.4);
    let a1 = config.param("a1", 0.8);
    let c0 = config.param("c0", 0.25);
    let c1 = config.param("c1", 0.4);
    let c2 = config.param("c2", 0.1);
    let d0 = config.param("d0", 0.5);
    let d1 = config.param("d1", 0.4);
    let d2 = config.param("d2", 0.3);
    let sigma_y = config.param("sigma_y", 0.9);
    for (z, w) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        check_probability(
            c0 + c1 * z + c2 * w,
            &format!("two_sample_late uptake probability at (Z={z}, W={w})"),
        )?;
    }
    if c1 == 0.0 {
        return Err(Error::Config(
            "two_sample_late needs c1 != 0 (nonzero uptake effect)".into(),
        ));
    }

    let model = late_model("two_sample_late")?;
    let pi = move |w: f64| sigmoid(a0 + a1 * w);
    let p_x = move |z: f64, w: f64| c0 + c1 * z + c2 * w;
    let mu_y = move |z: f64, w: f64| d0 + d1 * z + d2 * w;

    let schema_y: Arc<[String]> = ["W", "Z", "Y"].iter().map(|s| s.to_string()).collect();
    let schema_x: Arc<[String]> = ["W", "Z", "X"].iter().map(|s| s.to_string()).collect();
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            let w = bernoulli(rng, pw);
            let z = bernoulli(rng, pi(w));
            let y = mu_y(z, w) + sigma_y * standard_normal(rng);
            Sample::new(schema_y.clone(), vec![w, z, y])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            let w = bernoulli(rng, pw);
            let z = bernoulli(rng, pi(w));
            let x = bernoulli(rng, p_x(z, w));
            Sample::new(schema_x.clone(), vec![w, z, x])
        }),
    ];

    let mut slots = BTreeMap::new();
    let pi_exact: PropensityFn = PropensityFn::Exact(Arc::new(move |w: &[f64]| pi(w[0])));
    slots.insert("pi_y".into(), SlotFn::Propensity(pi_exact.clone()));
    slots.insert("pi_x".into(), SlotFn::Propensity(pi_exact));
    slots.insert(
        "mu_y".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |z, w: &[f64]| {
            mu_y(z, w[0])
        }))),
    );
    slots.insert(
        "mu_x".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |z, w: &[f64]| {
            p_x(z, w[0])
        }))),
    );

    let alpha_star = c1;
    let beta_star = d1 / c1;
    // Population variance of each intent-to-treat score: the inverse
    // propensity weight second moment is 1/π + 1/(1−π) conditional on W, and
    // the W-contrast of each response is constant, so only residual noise
    // contributes.
    let e_w = move |f: &dyn Fn(f64) -> f64| (1.0 - pw) * f(0.0) + pw * f(1.0);
    let v1 = sigma_y * sigma_y * e_w(&|w| 1.0 / pi(w) + 1.0 / (1.0 - pi(w)));
    let v2 = e_w(&|w| {
        let q1 = p_x(1.0, w);
        let q0 = p_x(0.0, w);
        q1 * (1.0 - q1) / pi(w) + q0 * (1.0 - q0) / (1.0 - pi(w))
    });
    let g_star = DMatrix::from_row_slice(2, 2, &[-alpha_star, -beta_star, 0.0, -1.0]);
    let omega_star = DMatrix::from_row_slice(2, 2, &[v1, 0.0, 0.0, v2]);
    let k1 = v1.sqrt();
    let k2 = beta_star.abs() * v2.sqrt();
    let truth = Truth {
        theta_star: Some(vec![beta_star, alpha_star]),
        beta_star: Some(beta_star),
        oracle_nuisance: Some(NuisanceSnapshot::exact(slots)),
        kappa_star: Some(vec![k1 / (k1 + k2), k2 / (k1 + k2)]),
        population: Some(Population { g_star, omega_star }),
    };

    Ok(Scenario {
        name: "two_sample_late".into(),
        model,
        samplers,
        cost: vec![1.0, 1.0],
        truth,
        slot_specs: late_slot_specs(),
    })
}

// ---------------------------------------------------------------------------
// confounder_mediator
// ---------------------------------------------------------------------------

/// Overidentified ATE: a backdoor AIPW moment from source 0 = (W, X, Y) and
/// a frontdoor moment from source 1 = (X, M, Y), both centered at β (D = 1).
///
/// DGP: W ~ Bernoulli(pw); X | W ~ Bernoulli(σ(g0 + g1·W)) with extreme
/// propensities (inflating the backdoor variance); M | X ~ Bernoulli(q_X)
/// (mediator reads only the treatment, so the frontdoor criterion holds);
/// Y = γ·M + δ·W + σ_e·ε (no direct X→Y edge). β* = γ(q1 − q0).
///
/// The defaults give v_frontdoor ≈ 0.3·v_backdoor, so the oracle simplex is
/// the vertex (0, 1).
fn confounder_mediator(config: &ScenarioConfig) -> Result<Scenario> {
    let pw = check_probability(config.param("pw", 0.5), "confounder_mediator pw")?;
    let g0 = config.param("g0", -1.9924301646902063); // logit(0.12)
    let g1 = config.param("g1", 3.9848603293804126); // logit(0.88) − logit(0.12)
    let q0 = check_probability(config.param("q0", 0.25), "confounder_mediator q0")?;
    let q1 = check_probability(config.param("q1", 0.75), "confounder_mediator q1")?;
    let gamma = config.param("gamma", 1.0);
    let delta = config.param("delta", 1.0);
    let sigma_e = config.param("sigma_e", 0.5);

    let backdoor = Moment {
        name: "backdoor".into(),
        requires: vec!["W".into(), "X".into(), "Y".into()],
        slots: vec!["pi_x".into(), "mu_y".into()],
        psi: Arc::new(|s: &Sample, th: &[f64], eta: &NuisanceSnapshot| {
            let w = s.require("W", "backdoor moment")?;
            let x = s.require("X", "backdoor moment")?;
            let y = s.require("Y", "backdoor moment")?;
            let pw = eta.propensity("pi_x", &[w])?;
            let mu1 = eta.regression("mu_y", 1.0, &[w])?;
            let mu0 = eta.regression("mu_y", 0.0, &[w])?;
            let score = aipw_score(
                &[w],
                x,
                y,
                |_| pw,
                |xx, _| if xx == 1.0 { mu1 } else { mu0 },
            )?;
            Ok(score - th[0])
        }),
        jacobian: Some(Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| {
            Ok(vec![-1.0])
        })),
    };
    let frontdoor = Moment {
        name: "frontdoor".into(),
        requires: vec!["X".into(), "M".into(), "Y".into()],
        slots: vec!["fd".into()],
        psi: Arc::new(|s: &Sample, th: &[f64], eta: &NuisanceSnapshot| {
            let x = s.require("X", "frontdoor moment")?;
            let m = s.require("M", "frontdoor moment")?;
            let y = s.require("Y", "frontdoor moment")?;
            let tables = eta.tables("fd")?;
            Ok(frontdoor_score(x, m, y, &tables)? - th[0])
        }),
        jacobian: Some(Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| {
            Ok(vec![-1.0])
        })),
    };
    let model = MomentModel::with_first_param_target(
        "confounder_mediator",
        1,
        vec![(-50.0, 50.0)],
        vec![vec![true, false], vec![false, true]],
        vec![backdoor, frontdoor],
        true,
    )?;

    let pi_x = move |w: f64| sigmoid(g0 + g1 * w);
    let q = move |x: f64| if x == 1.0 { q1 } else { q0 };
    let schema_bd: Arc<[String]> = ["W", "X", "Y"].iter().map(|s| s.to_string()).collect();
    let schema_fd: Arc<[String]> = ["X", "M", "Y"].iter().map(|s| s.to_string()).collect();
    let draw_joint = move |rng: &mut dyn RngCore| {
        let w = bernoulli(rng, pw);
        let x = bernoulli(rng, pi_x(w));
        let m = bernoulli(rng, q(x));
        let y = gamma * m + delta * w + sigma_e * standard_normal(rng);
        (w, x, m, y)
    };
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            let (w, x, _, y) = draw_joint(rng);
            Sample::new(schema_bd.clone(), vec![w, x, y])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            let (_, x, m, y) = draw_joint(rng);
            Sample::new(schema_fd.clone(), vec![x, m, y])
        }),
    ];

    // Exact nuisances. P(X=1) and E[W | X=x] by direct enumeration over W.
    let px1 = (1.0 - pw) * pi_x(0.0) + pw * pi_x(1.0);
    let e_w_given_x1 = pw * pi_x(1.0) / px1;
    let e_w_given_x0 = pw * (1.0 - pi_x(1.0)) / (1.0 - px1);
    let e_w_given_x = [e_w_given_x0, e_w_given_x1];
    let tables = FrontdoorTables {
        p_m_given_x: [[1.0 - q0, q0], [1.0 - q1, q1]],
        e_y_given_xm: [
            [delta * e_w_given_x[0], gamma + delta * e_w_given_x[0]],
            [delta * e_w_given_x[1], gamma + delta * e_w_given_x[1]],
        ],
        p_x: [1.0 - px1, px1],
    };
    let mut slots = BTreeMap::new();
    slots.insert(
        "pi_x".into(),
        SlotFn::Propensity(PropensityFn::Exact(Arc::new(move |w: &[f64]| pi_x(w[0])))),
    );
    slots.insert(
        "mu_y".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |x, w: &[f64]| {
            gamma * q(x) + delta * w[0]
        }))),
    );
    slots.insert("fd".into(), SlotFn::Tables(tables));

    let beta_star = gamma * (q1 - q0);
    // Backdoor score variance: residual Var(Y | X, W) = γ²q_X(1−q_X) + σ_e²
    // weighted by the usual inverse-propensity second moment; the contrast
    // τ(W) is constant.
    let e_w = move |f: &dyn Fn(f64) -> f64| (1.0 - pw) * f(0.0) + pw * f(1.0);
    let var_y = move |x: f64| gamma * gamma * q(x) * (1.0 - q(x)) + sigma_e * sigma_e;
    let v_bd = e_w(&|w| var_y(1.0) / pi_x(w) + var_y(0.0) / (1.0 - pi_x(w)));
    // Frontdoor score variance: the residual term plus the marginal-mediator
    // term; the third term is constant and all cross-moments vanish.
    let var_w_given_x = [
        e_w_given_x[0] * (1.0 - e_w_given_x[0]),
        e_w_given_x[1] * (1.0 - e_w_given_x[1]),
    ];
    let p_m = move |x: usize, m: usize| {
        let qq = if x == 1 { q1 } else { q0 };
        if m == 1 {
            qq
        } else {
            1.0 - qq
        }
    };
    let p_x_arr = [1.0 - px1, px1];
    let mut term1 = 0.0;
    let mut term2 = 0.0;
    for x in 0..2 {
        let resid_var = delta * delta * var_w_given_x[x] + sigma_e * sigma_e;
        for m in 0..2 {
            let contrast = p_m(1, m) - p_m(0, m);
            term1 += p_x_arr[x] * contrast * contrast / p_m(x, m) * resid_var;
        }
        term2 += gamma * gamma * p_m(x, 1) * p_m(x, 0) / p_x_arr[x];
    }
    let v_fd = term1 + term2;
    let g_star = DMatrix::from_row_slice(2, 1, &[-1.0, -1.0]);
    let omega_star = DMatrix::from_row_slice(2, 2, &[v_bd, 0.0, 0.0, v_fd]);
    let kappa_star = if v_fd < v_bd {
        Some(vec![0.0, 1.0])
    } else {
        Some(vec![1.0, 0.0])
    };
    let truth = Truth {
        theta_star: Some(vec![beta_star]),
        beta_star: Some(beta_star),
        oracle_nuisance: Some(NuisanceSnapshot::exact(slots)),
        kappa_star,
        population: Some(Population { g_star, omega_star }),
    };

    let slot_specs = vec![
        SlotSpec {
            name: "pi_x".into(),
            source: 0,
            kind: SlotKind::Propensity {
                treatment: "X".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "mu_y".into(),
            source: 0,
            kind: SlotKind::Regression {
                response: "Y".into(),
                treatment: "X".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "fd".into(),
            source: 1,
            kind: SlotKind::Tables {
                x: "X".into(),
                m: "M".into(),
                y: "Y".into(),
            },
        },
    ];

    Ok(Scenario {
        name: "confounder_mediator".into(),
        model,
        samplers,
        cost: vec![1.0, 1.0],
        truth,
        slot_specs,
    })
}

// ---------------------------------------------------------------------------
// two_confounders_cost
// ---------------------------------------------------------------------------

/// ATE with two adjustment sets and a cost asymmetry: source 0 = (U, W, X, Y)
/// at cost 2 supports the full AIPW moment and the reduced one; source 1 =
/// (W, X, Y) at cost 1 supports only the reduced moment. The reduced moment
/// appears twice (once per source) so the cheap source sharpens α, which is
/// coupled to β through the co-observed covariance on source 0.
///
/// DGP: W, U ~ Bernoulli(pw), Bernoulli(pu) independent; X | W ~
/// Bernoulli(σ(h0 + h1·W)); Y = b0 + b1·X + b2·W + b3·U + σ_e·ε. U does not
/// enter the propensity, so both adjustment sets identify the same effect
/// (β* = α* = b1) and the reduced outcome model stays exactly linear; U's
/// role is variance: the score correlation is ρ² = σ_e²/(σ_e² + b3²pu(1−pu)),
/// giving the cost-weighted oracle simplex κ1* = b3·√(pu(1−pu))/σ_e ·
/// √(c2/(c1−c2)) when c1 > c2.
fn two_confounders_cost(config: &ScenarioConfig) -> Result<Scenario> {
    let pw = check_probability(config.param("pw", 0.5), "two_confounders_cost pw")?;
    let pu = check_probability(config.param("pu", 0.5), "two_confounders_cost pu")?;
    let h0 = config.param("h0", -0.8);
    let h1 = config.param("h1", 1.6);
    let b0 = config.param("b0", 0.0);
    let b1 = config.param("b1", 1.0);
    let b2 = config.param("b2", 1.0);
    let b3 = config.param("b3", 0.8);
    let sigma_e = config.param("sigma_e", 1.0);
    if sigma_e <= 0.0 {
        return Err(Error::Config("two_confounders_cost needs sigma_e > 0".into()));
    }

    let full = Moment {
        name: "ate_full".into(),
        requires: vec!["U".into(), "W".into(), "X".into(), "Y".into()],
        slots: vec!["pi_full".into(), "mu_full".into()],
        psi: Arc::new(|s: &Sample, th: &[f64], eta: &NuisanceSnapshot| {
            let u = s.require("U", "full-adjustment moment")?;
            let w = s.require("W", "full-adjustment moment")?;
            let x = s.require("X", "full-adjustment moment")?;
            let y = s.require("Y", "full-adjustment moment")?;
            let cov = [w, u];
            let pw = eta.propensity("pi_full", &cov)?;
            let mu1 = eta.regression("mu_full", 1.0, &cov)?;
            let mu0 = eta.regression("mu_full", 0.0, &cov)?;
            let score = aipw_score(
                &cov,
                x,
                y,
                |_| pw,
                |xx, _| if xx == 1.0 { mu1 } else { mu0 },
            )?;
            Ok(score - th[0])
        }),
        jacobian: Some(Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| {
            Ok(vec![-1.0, 0.0])
        })),
    };
    let reduced_psi: crate::model::MomentFn =
        Arc::new(|s: &Sample, th: &[f64], eta: &NuisanceSnapshot| {
            let w = s.require("W", "reduced-adjustment moment")?;
            let x = s.require("X", "reduced-adjustment moment")?;
            let y = s.require("Y", "reduced-adjustment moment")?;
            let pw = eta.propensity("pi_w", &[w])?;
            let mu1 = eta.regression("mu_w", 1.0, &[w])?;
            let mu0 = eta.regression("mu_w", 0.0, &[w])?;
            let score = aipw_score(
                &[w],
                x,
                y,
                |_| pw,
                |xx, _| if xx == 1.0 { mu1 } else { mu0 },
            )?;
            Ok(score - th[1])
        });
    let reduced_jac: crate::model::JacobianFn =
        Arc::new(|_: &Sample, _: &[f64], _: &NuisanceSnapshot| Ok(vec![0.0, -1.0]));
    let reduced = |name: &str| Moment {
        name: name.into(),
        requires: vec!["W".into(), "X".into(), "Y".into()],
        slots: vec!["pi_w".into(), "mu_w".into()],
        psi: reduced_psi.clone(),
        jacobian: Some(reduced_jac.clone()),
    };
    let model = MomentModel::with_first_param_target(
        "two_confounders_cost",
        2,
        vec![(-50.0, 50.0); 2],
        vec![vec![true, true, false], vec![false, false, true]],
        vec![full, reduced("ate_reduced_rich"), reduced("ate_reduced_cheap")],
        true,
    )?;

    let pi = move |w: f64| sigmoid(h0 + h1 * w);
    let schema_full: Arc<[String]> = ["U", "W", "X", "Y"].iter().map(|s| s.to_string()).collect();
    let schema_red: Arc<[String]> = ["W", "X", "Y"].iter().map(|s| s.to_string()).collect();
    let draw = move |rng: &mut dyn RngCore| {
        let w = bernoulli(rng, pw);
        let u = bernoulli(rng, pu);
        let x = bernoulli(rng, pi(w));
        let y = b0 + b1 * x + b2 * w + b3 * u + sigma_e * standard_normal(rng);
        (u, w, x, y)
    };
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            let (u, w, x, y) = draw(rng);
            Sample::new(schema_full.clone(), vec![u, w, x, y])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            let (_, w, x, y) = draw(rng);
            Sample::new(schema_red.clone(), vec![w, x, y])
        }),
    ];

    let mut slots = BTreeMap::new();
    let pi_exact = move |w: f64| pi(w);
    slots.insert(
        "pi_full".into(),
        SlotFn::Propensity(PropensityFn::Exact(Arc::new(move |cov: &[f64]| {
            pi_exact(cov[0])
        }))),
    );
    slots.insert(
        "pi_w".into(),
        SlotFn::Propensity(PropensityFn::Exact(Arc::new(move |cov: &[f64]| {
            pi_exact(cov[0])
        }))),
    );
    slots.insert(
        "mu_full".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |x, cov: &[f64]| {
            b0 + b1 * x + b2 * cov[0] + b3 * cov[1]
        }))),
    );
    slots.insert(
        "mu_w".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |x, cov: &[f64]| {
            b0 + b1 * x + b2 * cov[0] + b3 * pu
        }))),
    );

    // v1 = Var(full score) = σ_e²·A with A = E[1/π + 1/(1−π)];
    // v2 = Var(reduced score) = (b3²pu(1−pu) + σ_e²)·A; the co-observed
    // covariance equals v1 because the reduced residual contains the full
    // residual plus the independent U deviation.
    let e_w = move |f: &dyn Fn(f64) -> f64| (1.0 - pw) * f(0.0) + pw * f(1.0);
    let a = e_w(&|w| 1.0 / pi(w) + 1.0 / (1.0 - pi(w)));
    let v1 = sigma_e * sigma_e * a;
    let v2 = (b3 * b3 * pu * (1.0 - pu) + sigma_e * sigma_e) * a;
    let c12 = v1;
    let g_star = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 0.0, -1.0]);
    let omega_star =
        DMatrix::from_row_slice(3, 3, &[v1, c12, c12, c12, v2, v2, c12, v2, v2]);

    let cost = vec![2.0, 1.0];
    // Cost-weighted oracle simplex: minimizing V(κ)·(κᵀc) for the rank-one
    // structure above gives κ1* = √((1−ρ²)/ρ²) · √(c2/(c1−c2)).
    let rho_sq = v1 / v2;
    let kappa_star = if cost[0] > cost[1] {
        let k1 = ((1.0 - rho_sq) / rho_sq * cost[1] / (cost[0] - cost[1])).sqrt();
        (k1 < 1.0).then(|| vec![k1, 1.0 - k1])
    } else {
        None
    };
    let truth = Truth {
        theta_star: Some(vec![b1, b1]),
        beta_star: Some(b1),
        oracle_nuisance: Some(NuisanceSnapshot::exact(slots)),
        kappa_star,
        population: Some(Population { g_star, omega_star }),
    };

    let slot_specs = vec![
        SlotSpec {
            name: "pi_full".into(),
            source: 0,
            kind: SlotKind::Propensity {
                treatment: "X".into(),
                covariates: vec!["W".into(), "U".into()],
            },
        },
        SlotSpec {
            name: "mu_full".into(),
            source: 0,
            kind: SlotKind::Regression {
                response: "Y".into(),
                treatment: "X".into(),
                covariates: vec!["W".into(), "U".into()],
            },
        },
        SlotSpec {
            name: "pi_w".into(),
            source: 1,
            kind: SlotKind::Propensity {
                treatment: "X".into(),
                covariates: vec!["W".into()],
            },
        },
        SlotSpec {
            name: "mu_w".into(),
            source: 1,
            kind: SlotKind::Regression {
                response: "Y".into(),
                treatment: "X".into(),
                covariates: vec!["W".into()],
            },
        },
    ];

    Ok(Scenario {
        name: "two_confounders_cost".into(),
        model,
        samplers,
        cost,
        truth,
        slot_specs,
    })
}

// ---------------------------------------------------------------------------
// rff_iv — nonlinear structural equations from random Fourier features
// ---------------------------------------------------------------------------

/// A fixed nonlinear function x ↦ Σ_k w_k cos(ω_k·x + b_k): a Monte Carlo
/// approximation of a draw from a Gaussian process with a squared-exponential
/// kernel. Deterministic given the stream that sampled it.
#[derive(Clone, Debug)]
pub struct RffFunction {
    frequencies: Vec<Vec<f64>>,
    phases: Vec<f64>,
    weights: Vec<f64>,
}

impl RffFunction {
    /// Draws `num_features` features for `dim` inputs at the given kernel
    /// bandwidth: ω ~ Normal(0, I/bandwidth²), b ~ Uniform[0, 2π),
    /// w ~ Normal(0, 2/num_features) so the marginal variance is ≈ 1.
    pub fn sample(dim: usize, num_features: usize, bandwidth: f64, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / num_features as f64).sqrt();
        let frequencies = (0..num_features)
            .map(|_| {
                (0..dim)
                    .map(|_| standard_normal(rng) / bandwidth)
                    .collect()
            })
            .collect();
        let phases = (0..num_features)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let weights = (0..num_features)
            .map(|_| scale * standard_normal(rng))
            .collect();
        RffFunction {
            frequencies,
            phases,
            weights,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.phases)
            .zip(&self.weights)
            .map(|((omega, phase), w)| {
                let dot: f64 = omega.iter().zip(x).map(|(o, v)| o * v).sum();
                w * (dot + phase).cos()
            })
            .sum()
    }

    fn eval1(&self, x: f64) -> f64 {
        self.eval(&[x])
    }
}

/// Nonlinear two-sample split with the same moment structure as
/// `two_sample_late` but structural equations built from [`RffFunction`]s:
///
/// W ~ Uniform[−θ_w, θ_w]; U ~ Uniform[−θ_u, θ_u] (unmeasured);
/// Z | W ~ Bernoulli(σ(f_z(W))); X | W, Z, U ~ Bernoulli(σ(f_u(U) +
/// f_wz(W, Z) + b_z)); Y = f_yu(U) + f_wx(W, X) + b_y + Uniform[−θ_y, θ_y].
///
/// Oracle nuisances and the true (α*, β*) are integrals over the uniform
/// confounders, evaluated by Gauss–Legendre quadrature at build time.
fn rff_iv(config: &ScenarioConfig) -> Result<Scenario> {
    let theta_w = config.param("theta_w", 1.0);
    let theta_u = config.param("theta_u", 1.0);
    let theta_y = config.param("theta_y", 1.0);
    let b_z = config.param("b_z", 0.0);
    let b_y = config.param("b_y", 0.0);
    let bandwidth = config.param("bandwidth", 1.0);
    let num_features = config.param("num_features", 100.0) as usize;
    let instrument_gain = config.param("instrument_gain", 2.0);

    let mut rng = crate::rng::derive_rng(config.seed, 0, u64::MAX);
    let f_z = Arc::new(RffFunction::sample(1, num_features, bandwidth, &mut rng));
    let f_u = Arc::new(RffFunction::sample(1, num_features, bandwidth, &mut rng));
    let f_wz = Arc::new(RffFunction::sample(2, num_features, bandwidth, &mut rng));
    let f_yu = Arc::new(RffFunction::sample(1, num_features, bandwidth, &mut rng));
    let f_wx = Arc::new(RffFunction::sample(2, num_features, bandwidth, &mut rng));

    // Structural links. The instrument gain scales the Z-lever inside the
    // uptake equation so a generic draw of f_wz cannot leave the instrument
    // uselessly weak (which would make β = ITT_Y/ITT_X ill-conditioned).
    let pi_z = {
        let f_z = f_z.clone();
        move |w: f64| sigmoid(f_z.eval1(w))
    };
    let p_x = {
        let f_u = f_u.clone();
        let f_wz = f_wz.clone();
        move |w: f64, z: f64, u: f64| {
            sigmoid(f_u.eval1(u) + f_wz.eval(&[w, z]) + instrument_gain * z + b_z)
        }
    };
    let y_mean = {
        let f_yu = f_yu.clone();
        let f_wx = f_wx.clone();
        move |w: f64, x: f64, u: f64| f_yu.eval1(u) + f_wx.eval(&[w, x]) + b_y
    };

    // Oracle conditionals E[X | W, Z] and E[Y | W, Z], marginalizing U by
    // quadrature. The u-only feature values are fixed across (w, z), so they
    // are evaluated once per node here and only the cheap sigmoid mixing
    // remains per call.
    let (gl_nodes, gl_weights) = gauss_legendre(64);
    let u_weights: Vec<f64> = gl_weights.iter().map(|w| 0.5 * w).collect();
    let f_u_at: Vec<f64> = gl_nodes.iter().map(|x| f_u.eval1(theta_u * x)).collect();
    let f_yu_at: Vec<f64> = gl_nodes.iter().map(|x| f_yu.eval1(theta_u * x)).collect();
    let mu_x = {
        let f_wz = f_wz.clone();
        let u_weights = u_weights.clone();
        let f_u_at = f_u_at.clone();
        move |z: f64, w: f64| {
            let base = f_wz.eval(&[w, z]) + instrument_gain * z + b_z;
            u_weights
                .iter()
                .zip(&f_u_at)
                .map(|(uw, fu)| uw * sigmoid(fu + base))
                .sum::<f64>()
        }
    };
    let mu_y = {
        let f_wz = f_wz.clone();
        let f_wx = f_wx.clone();
        move |z: f64, w: f64| {
            let base = f_wz.eval(&[w, z]) + instrument_gain * z + b_z;
            let y1 = f_wx.eval(&[w, 1.0]) + b_y;
            let y0 = f_wx.eval(&[w, 0.0]) + b_y;
            u_weights
                .iter()
                .zip(&f_u_at)
                .zip(&f_yu_at)
                .map(|((uw, fu), fyu)| {
                    let px = sigmoid(fu + base);
                    uw * (fyu + px * y1 + (1.0 - px) * y0)
                })
                .sum::<f64>()
        }
    };

    // True intent-to-treat effects by the outer W-quadrature.
    let itt_x = uniform_mean(theta_w, |w| mu_x(1.0, w) - mu_x(0.0, w));
    let itt_y = uniform_mean(theta_w, |w| mu_y(1.0, w) - mu_y(0.0, w));
    if itt_x.abs() < 1e-3 {
        return Err(Error::Config(format!(
            "rff_iv draw from seed {} has a near-null uptake effect ({itt_x:.2e}); \
             pick another seed or raise instrument_gain",
            config.seed
        )));
    }
    let alpha_star = itt_x;
    let beta_star = itt_y / itt_x;

    let model = late_model("rff_iv")?;
    let schema_y: Arc<[String]> = ["W", "Z", "Y"].iter().map(|s| s.to_string()).collect();
    let schema_x: Arc<[String]> = ["W", "Z", "X"].iter().map(|s| s.to_string()).collect();
    let draw = {
        let pi_z = pi_z.clone();
        let p_x = p_x.clone();
        let y_mean = y_mean.clone();
        move |rng: &mut dyn RngCore| {
            let w = theta_w * (2.0 * rng.random::<f64>() - 1.0);
            let u = theta_u * (2.0 * rng.random::<f64>() - 1.0);
            let z = bernoulli(rng, pi_z(w));
            let x = bernoulli(rng, p_x(w, z, u));
            let y = y_mean(w, x, u) + theta_y * (2.0 * rng.random::<f64>() - 1.0);
            (w, z, x, y)
        }
    };
    let draw_y = draw.clone();
    let draw_x = draw;
    let samplers: Vec<SamplerFn> = vec![
        Arc::new(move |rng: &mut dyn RngCore| {
            let (w, z, _, y) = draw_y(rng);
            Sample::new(schema_y.clone(), vec![w, z, y])
        }),
        Arc::new(move |rng: &mut dyn RngCore| {
            let (w, z, x, _) = draw_x(rng);
            Sample::new(schema_x.clone(), vec![w, z, x])
        }),
    ];

    // Tabulate the oracle conditionals over the W support once; moment
    // evaluation then reads them back by interpolation.
    let grid = 2049;
    let pi_tab = Tabulated1d::build(-theta_w, theta_w, grid, &pi_z);
    let mu_y_tab = [
        Tabulated1d::build(-theta_w, theta_w, grid, |w| mu_y(0.0, w)),
        Tabulated1d::build(-theta_w, theta_w, grid, |w| mu_y(1.0, w)),
    ];
    let mu_x_tab = [
        Tabulated1d::build(-theta_w, theta_w, grid, |w| mu_x(0.0, w)),
        Tabulated1d::build(-theta_w, theta_w, grid, |w| mu_x(1.0, w)),
    ];
    let mut slots = BTreeMap::new();
    let pi_exact: PropensityFn =
        PropensityFn::Exact(Arc::new(move |w: &[f64]| pi_tab.eval(w[0])));
    slots.insert("pi_y".into(), SlotFn::Propensity(pi_exact.clone()));
    slots.insert("pi_x".into(), SlotFn::Propensity(pi_exact));
    slots.insert(
        "mu_y".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |z, w: &[f64]| {
            mu_y_tab[usize::from(z == 1.0)].eval(w[0])
        }))),
    );
    slots.insert(
        "mu_x".into(),
        SlotFn::Regression(RegressionFn::Exact(Arc::new(move |z, w: &[f64]| {
            mu_x_tab[usize::from(z == 1.0)].eval(w[0])
        }))),
    );

    let truth = Truth {
        theta_star: Some(vec![beta_star, alpha_star]),
        beta_star: Some(beta_star),
        oracle_nuisance: Some(NuisanceSnapshot::exact(slots)),
        kappa_star: None,      // no closed form: grid search on the oracle surface
        population: None,      // Monte Carlo oracle moments
    };

    Ok(Scenario {
        name: "rff_iv".into(),
        model,
        samplers,
        cost: vec![1.0, 1.0],
        truth,
        slot_specs: late_slot_specs(),
    })
}
