//! Sequentially fitted nuisance functions: propensities, outcome
//! regressions, and discrete mediator tables.
//!
//! Nuisances are fit on prefixes of the sample stream and frozen into
//! [`NuisanceSnapshot`]s. The prequential rule is that the moment for the
//! sample at time `t` may only use a snapshot trained on samples `1..=t−1`
//! ([`snapshot_for`]), which keeps plug-in moment averages honest: each term
//! is out-of-sample for the nuisance it plugs in.
//!
//! Three learner families cover the built-in scenarios:
//! - logistic regression (Newton) for propensities, predictions clamped away
//!   from 0 and 1,
//! - ordinary least squares on `[1, z, w]` for outcome regressions, with a
//!   random-Fourier-feature ridge alternative for nonlinear truths,
//! - add-one-smoothed frequency tables for binary treatment/mediator
//!   scenarios.
//!
//! Before any fit has happened, an *untrained* snapshot supplies neutral
//! fallbacks (propensity ½, regression 0, uniform tables) so early moments
//! are well-defined; the flag is carried so diagnostics can report it.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrontdoorTables, Sample};

/// Which learner family fits regression-type slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    /// Use the scenario's exact nuisances; nothing is fit.
    Oracle,
    /// Logistic propensities and linear outcome regressions.
    Linear,
    /// Logistic propensities and ridge regression on random Fourier features.
    RidgeRff,
}

/// Nuisance-fitting configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub kind: NuisanceKind,
    /// Refit cadence in samples; `None` refits at the policy's natural
    /// re-planning points (end of exploration, then each batch).
    pub refit_every: Option<usize>,
    /// Ridge penalty for the random-feature regression.
    pub ridge_lambda: f64,
    /// Propensity predictions are clamped into this interval.
    pub clamp: (f64, f64),
    /// Number of random Fourier features.
    pub rff_features: usize,
    /// Kernel bandwidth of the random-feature map.
    pub rff_bandwidth: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            kind: NuisanceKind::Linear,
            refit_every: None,
            ridge_lambda: 1e-3,
            clamp: (0.01, 0.99),
            rff_features: 100,
            rff_bandwidth: 1.0,
        }
    }
}

/// Declares how one named nuisance slot is trained.
#[derive(Clone, Debug)]
pub struct SlotSpec {
    /// Slot name the moment functions look up, e.g. `"pi_y"`.
    pub name: String,
    /// Source whose samples train this slot.
    pub source: usize,
    pub kind: SlotKind,
}

/// The statistical role of a slot, with the variable names it reads.
#[derive(Clone, Debug)]
pub enum SlotKind {
    /// P(treatment = 1 | covariates), fit by logistic regression.
    Propensity {
        treatment: String,
        covariates: Vec<String>,
    },
    /// E[response | treatment, covariates], fit by OLS or RFF ridge.
    Regression {
        response: String,
        treatment: String,
        covariates: Vec<String>,
    },
    /// Mediator/outcome tables over binary (x, m) for the frontdoor score.
    Tables { x: String, m: String, y: String },
}

/// A fitted propensity function w ↦ P(Z = 1 | W = w).
#[derive(Clone)]
pub enum PropensityFn {
    Constant(f64),
    /// `clamp(σ(intercept + coef·w))`.
    Logistic {
        intercept: f64,
        coef: Vec<f64>,
        clamp: (f64, f64),
    },
    /// Exact oracle function.
    Exact(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl PropensityFn {
    pub fn eval(&self, w: &[f64]) -> f64 {
        match self {
            PropensityFn::Constant(p) => *p,
            PropensityFn::Logistic {
                intercept,
                coef,
                clamp,
            } => {
                let lin = intercept + dot(coef, w);
                sigmoid(lin).clamp(clamp.0, clamp.1)
            }
            PropensityFn::Exact(f) => f(w),
        }
    }
}

/// A fitted regression function (z, w) ↦ E[R | Z = z, W = w].
#[derive(Clone)]
pub enum RegressionFn {
    Constant(f64),
    /// `intercept + z_coef·z + coef·w`.
    Linear {
        intercept: f64,
        z_coef: f64,
        coef: Vec<f64>,
    },
    /// Ridge weights on a random Fourier expansion of the stacked `[z, w]`.
    RidgeRff {
        features: RffFeatureMap,
        weights: Vec<f64>,
    },
    /// Exact oracle function.
    Exact(Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>),
}

impl RegressionFn {
    pub fn eval(&self, z: f64, w: &[f64]) -> f64 {
        match self {
            RegressionFn::Constant(c) => *c,
            RegressionFn::Linear {
                intercept,
                z_coef,
                coef,
            } => intercept + z_coef * z + dot(coef, w),
            RegressionFn::RidgeRff { features, weights } => {
                let mut v = Vec::with_capacity(1 + w.len());
                v.push(z);
                v.extend_from_slice(w);
                features.dot_phi(&v, weights)
            }
            RegressionFn::Exact(f) => f(z, w),
        }
    }
}

/// One fitted nuisance slot.
#[derive(Clone)]
pub enum SlotFn {
    Propensity(PropensityFn),
    Regression(RegressionFn),
    Tables(FrontdoorTables),
}

/// A frozen set of fitted nuisance functions.
#[derive(Clone)]
pub struct NuisanceSnapshot {
    /// Position in the snapshot list (0 = untrained fallback).
    pub snapshot_id: usize,
    /// Number of stream samples the fit saw; predictions are honest for
    /// samples with index > `trained_on`.
    pub trained_on: usize,
    /// Whether this is the neutral pre-fit fallback.
    pub untrained: bool,
    slots: BTreeMap<String, SlotFn>,
}

impl NuisanceSnapshot {
    /// The neutral fallback used before the first fit: propensities ½,
    /// regressions 0, uniform tables. Any slot name resolves.
    pub fn untrained(snapshot_id: usize) -> Self {
        NuisanceSnapshot {
            snapshot_id,
            trained_on: 0,
            untrained: true,
            slots: BTreeMap::new(),
        }
    }

    /// Wraps exact nuisance functions as an always-valid snapshot.
    pub fn exact(slots: BTreeMap<String, SlotFn>) -> Self {
        NuisanceSnapshot {
            snapshot_id: 0,
            trained_on: 0,
            untrained: false,
            slots,
        }
    }

    pub fn slot(&self, name: &str) -> Option<&SlotFn> {
        self.slots.get(name)
    }

    /// Evaluates a propensity slot.
    ///
    /// # Errors
    /// Configuration error when the slot exists but has the wrong role.
    /// A missing slot on an untrained snapshot falls back to ½.
    pub fn propensity(&self, slot: &str, w: &[f64]) -> Result<f64> {
        match self.slots.get(slot) {
            Some(SlotFn::Propensity(f)) => Ok(f.eval(w)),
            Some(_) => Err(Error::Config(format!(
                "nuisance slot `{slot}` is not a propensity"
            ))),
            None if self.untrained => Ok(0.5),
            None => Err(Error::Config(format!("missing nuisance slot `{slot}`"))),
        }
    }

    /// Evaluates a regression slot; untrained fallback is 0.
    pub fn regression(&self, slot: &str, z: f64, w: &[f64]) -> Result<f64> {
        match self.slots.get(slot) {
            Some(SlotFn::Regression(f)) => Ok(f.eval(z, w)),
            Some(_) => Err(Error::Config(format!(
                "nuisance slot `{slot}` is not a regression"
            ))),
            None if self.untrained => Ok(0.0),
            None => Err(Error::Config(format!("missing nuisance slot `{slot}`"))),
        }
    }

    /// Returns a frontdoor table slot; untrained fallback is uniform tables
    /// with cell means 0.
    pub fn tables(&self, slot: &str) -> Result<FrontdoorTables> {
        match self.slots.get(slot) {
            Some(SlotFn::Tables(t)) => Ok(t.clone()),
            Some(_) => Err(Error::Config(format!(
                "nuisance slot `{slot}` is not a table set"
            ))),
            None if self.untrained => Ok(FrontdoorTables {
                p_m_given_x: [[0.5, 0.5], [0.5, 0.5]],
                e_y_given_xm: [[0.0, 0.0], [0.0, 0.0]],
                p_x: [0.5, 0.5],
            }),
            None => Err(Error::Config(format!("missing nuisance slot `{slot}`"))),
        }
    }
}

impl std::fmt::Debug for NuisanceSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceSnapshot")
            .field("snapshot_id", &self.snapshot_id)
            .field("trained_on", &self.trained_on)
            .field("untrained", &self.untrained)
            .field("slots", &self.slots.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Picks the snapshot whose training window ends strictly before sample `t`:
/// the latest snapshot with `trained_on ≤ t − 1`. Snapshots must be in
/// increasing `trained_on` order with the untrained fallback first.
pub fn snapshot_for(t: usize, snapshots: &[NuisanceSnapshot]) -> &NuisanceSnapshot {
    assert!(!snapshots.is_empty(), "snapshot list may not be empty");
    let cutoff = t.saturating_sub(1);
    snapshots
        .iter()
        .rev()
        .find(|s| s.trained_on <= cutoff)
        .unwrap_or(&snapshots[0])
}

/// Fits every declared slot on per-source sample prefixes and freezes the
/// result. `per_source[d]` holds the samples drawn from source `d` so far;
/// `trained_on` is the total stream length those prefixes represent.
///
/// Slots whose training source has too little data (or a degenerate design)
/// fall back to the untrained constants for that role rather than failing:
/// early exploration batches must not abort a run.
pub fn fit(
    per_source: &[Vec<Sample>],
    specs: &[SlotSpec],
    config: &NuisanceConfig,
    trained_on: usize,
    snapshot_id: usize,
    rng: &mut impl Rng,
) -> Result<NuisanceSnapshot> {
    let mut slots = BTreeMap::new();
    for spec in specs {
        let data = per_source.get(spec.source).ok_or_else(|| {
            Error::Config(format!(
                "slot `{}` trains on source {} but only {} sources exist",
                spec.name,
                spec.source,
                per_source.len()
            ))
        })?;
        let fitted = match &spec.kind {
            SlotKind::Propensity {
                treatment,
                covariates,
            } => SlotFn::Propensity(fit_propensity(
                data,
                treatment,
                covariates,
                config.clamp,
                &spec.name,
            )?),
            SlotKind::Regression {
                response,
                treatment,
                covariates,
            } => SlotFn::Regression(fit_regression(
                data, response, treatment, covariates, config, &spec.name, rng,
            )?),
            SlotKind::Tables { x, m, y } => {
                SlotFn::Tables(fit_tables(data, x, m, y, &spec.name)?)
            }
        };
        slots.insert(spec.name.clone(), fitted);
    }
    Ok(NuisanceSnapshot {
        snapshot_id,
        trained_on,
        untrained: false,
        slots,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn design_row(sample: &Sample, names: &[String], context: &str) -> Result<Vec<f64>> {
    names.iter().map(|n| sample.require(n, context)).collect()
}

/// Logistic regression by Newton's method: at most 100 iterations, stop when
/// the sup-norm of the score drops below 1e-10. A vanishing Hessian ridge
/// keeps separation from producing a singular step; the clamp on predictions
/// bounds whatever the coefficients drift to.
fn fit_propensity(
    data: &[Sample],
    treatment: &str,
    covariates: &[String],
    clamp: (f64, f64),
    slot: &str,
) -> Result<PropensityFn> {
    let p = 1 + covariates.len();
    if data.len() < p + 1 {
        return Ok(PropensityFn::Constant(0.5));
    }
    let n = data.len();
    let mut x = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(n);
    for (i, s) in data.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, v) in design_row(s, covariates, slot)?.into_iter().enumerate() {
            x[(i, j + 1)] = v;
        }
        z[i] = s.require(treatment, slot)?;
    }
    let ones = z.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == n {
        // One-armed data: the MLE diverges; use the clamped empirical rate.
        let rate = (ones as f64 / n as f64).clamp(clamp.0, clamp.1);
        return Ok(PropensityFn::Constant(rate));
    }

    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let lin = &x * &beta;
        let probs = lin.map(sigmoid);
        let grad = x.transpose() * (&z - &probs);
        if grad.amax() < 1e-10 {
            break;
        }
        let mut hessian = DMatrix::zeros(p, p);
        for i in 0..n {
            let wgt = probs[i] * (1.0 - probs[i]);
            for a in 0..p {
                for b in 0..p {
                    hessian[(a, b)] += wgt * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            hessian[(a, a)] += 1e-10;
        }
        match hessian.cholesky() {
            Some(chol) => beta += chol.solve(&grad),
            None => break,
        }
        if beta.amax() > 1e6 {
            break; // separation: predictions are saturated anyway
        }
    }
    Ok(PropensityFn::Logistic {
        intercept: beta[0],
        coef: beta.as_slice()[1..].to_vec(),
        clamp,
    })
}

/// OLS (or RFF ridge) of `response` on `[1, treatment, covariates]`.
fn fit_regression(
    data: &[Sample],
    response: &str,
    treatment: &str,
    covariates: &[String],
    config: &NuisanceConfig,
    slot: &str,
    rng: &mut impl Rng,
) -> Result<RegressionFn> {
    let dim_in = 1 + covariates.len();
    let min_rows = match config.kind {
        NuisanceKind::RidgeRff => dim_in + 2,
        _ => dim_in + 2,
    };
    if data.len() < min_rows {
        let mean = if data.is_empty() {
            0.0
        } else {
            data.iter()
                .map(|s| s.require(response, slot))
                .sum::<Result<f64>>()?
                / data.len() as f64
        };
        return Ok(RegressionFn::Constant(mean));
    }

    let n = data.len();
    let mut inputs = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    for (i, s) in data.iter().enumerate() {
        let mut row = Vec::with_capacity(dim_in);
        row.push(s.require(treatment, slot)?);
        row.extend(design_row(s, covariates, slot)?);
        inputs.push(row);
        y[i] = s.require(response, slot)?;
    }

    match config.kind {
        NuisanceKind::RidgeRff => {
            let features = RffFeatureMap::sample(
                dim_in,
                config.rff_features,
                config.rff_bandwidth,
                rng,
            );
            let k = features.num_features() + 1; // + unpenalized intercept
            let mut phi = DMatrix::zeros(n, k);
            for (i, v) in inputs.iter().enumerate() {
                phi[(i, 0)] = 1.0;
                for (j, f) in features.phi(v).into_iter().enumerate() {
                    phi[(i, j + 1)] = f;
                }
            }
            let mut gram = phi.transpose() * &phi;
            for j in 1..k {
                gram[(j, j)] += config.ridge_lambda * n as f64;
            }
            gram[(0, 0)] += 1e-10;
            let rhs = phi.transpose() * &y;
            let weights = gram
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| gram.lu().solve(&rhs))
                .ok_or_else(|| {
                    Error::Config(format!("singular ridge system for slot `{slot}`"))
                })?;
            Ok(RegressionFn::RidgeRff {
                features,
                weights: weights.as_slice().to_vec(),
            })
        }
        _ => {
            let p = 1 + dim_in;
            let mut x = DMatrix::zeros(n, p);
            for (i, v) in inputs.iter().enumerate() {
                x[(i, 0)] = 1.0;
                for (j, f) in v.iter().enumerate() {
                    x[(i, j + 1)] = *f;
                }
            }
            let mut gram = x.transpose() * &x;
            for j in 0..p {
                gram[(j, j)] += 1e-8;
            }
            let rhs = x.transpose() * &y;
            let beta = gram
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| gram.lu().solve(&rhs))
                .ok_or_else(|| Error::Config(format!("singular OLS system for slot `{slot}`")))?;
            Ok(RegressionFn::Linear {
                intercept: beta[0],
                z_coef: beta[1],
                coef: beta.as_slice()[2..].to_vec(),
            })
        }
    }
}

/// Add-one-smoothed tables over binary (x, m): smoothing keeps every
/// probability strictly inside (0, 1) no matter the counts, and empty
/// (x, m) cells fall back to the global outcome mean.
fn fit_tables(
    data: &[Sample],
    x_name: &str,
    m_name: &str,
    y_name: &str,
    slot: &str,
) -> Result<FrontdoorTables> {
    let mut n_x = [0usize; 2];
    let mut n_xm = [[0usize; 2]; 2];
    let mut y_sum = [[0.0f64; 2]; 2];
    let mut y_total = 0.0;
    for s in data {
        let x = s.require(x_name, slot)?;
        let m = s.require(m_name, slot)?;
        let y = s.require(y_name, slot)?;
        let (xi, mi) = match (x, m) {
            (0.0 | 1.0, 0.0 | 1.0) => (x as usize, m as usize),
            _ => {
                return Err(Error::Unsupported(format!(
                    "table slot `{slot}` needs binary {x_name}/{m_name}, got ({x}, {m})"
                )))
            }
        };
        n_x[xi] += 1;
        n_xm[xi][mi] += 1;
        y_sum[xi][mi] += y;
        y_total += y;
    }
    let n = data.len();
    let global_mean = if n == 0 { 0.0 } else { y_total / n as f64 };
    let mut p_m_given_x = [[0.0; 2]; 2];
    let mut e_y_given_xm = [[0.0; 2]; 2];
    for xi in 0..2 {
        for mi in 0..2 {
            p_m_given_x[xi][mi] = (n_xm[xi][mi] + 1) as f64 / (n_x[xi] + 2) as f64;
            e_y_given_xm[xi][mi] = if n_xm[xi][mi] > 0 {
                y_sum[xi][mi] / n_xm[xi][mi] as f64
            } else {
                global_mean
            };
        }
    }
    let p_x = [
        (n_x[0] + 1) as f64 / (n + 2) as f64,
        (n_x[1] + 1) as f64 / (n + 2) as f64,
    ];
    Ok(FrontdoorTables {
        p_m_given_x,
        e_y_given_xm,
        p_x,
    })
}

/// A random Fourier feature map φ(v) = √(2/K) · cos(Ω v / bandwidth + b)
/// with Ω drawn standard normal and phases uniform on [0, 2π): the usual
/// Monte Carlo approximation of an RBF kernel.
#[derive(Clone, Debug)]
pub struct RffFeatureMap {
    /// `omegas[k]` is the k-th frequency row, already divided by bandwidth.
    omegas: Vec<Vec<f64>>,
    phases: Vec<f64>,
    scale: f64,
}

impl RffFeatureMap {
    pub fn sample(dim: usize, num_features: usize, bandwidth: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal is well-defined");
        let uniform = Uniform::new(0.0, std::f64::consts::TAU).expect("valid phase range");
        let omegas = (0..num_features)
            .map(|_| (0..dim).map(|_| normal.sample(rng) / bandwidth).collect())
            .collect();
        let phases = (0..num_features).map(|_| uniform.sample(rng)).collect();
        RffFeatureMap {
            omegas,
            phases,
            scale: (2.0 / num_features as f64).sqrt(),
        }
    }

    pub fn num_features(&self) -> usize {
        self.omegas.len()
    }

    pub fn input_dim(&self) -> usize {
        self.omegas.first().map_or(0, Vec::len)
    }

    /// The feature vector φ(v).
    pub fn phi(&self, v: &[f64]) -> Vec<f64> {
        self.omegas
            .iter()
            .zip(&self.phases)
            .map(|(omega, phase)| self.scale * (dot(omega, v) + phase).cos())
            .collect()
    }

    /// `weights[0] + weights[1..] · φ(v)` without allocating φ.
    fn dot_phi(&self, v: &[f64], weights: &[f64]) -> f64 {
        let mut acc = weights[0];
        for ((omega, phase), w) in self.omegas.iter().zip(&self.phases).zip(&weights[1..]) {
            acc += w * self.scale * (dot(omega, v) + phase).cos();
        }
        acc
    }
}
