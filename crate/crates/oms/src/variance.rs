//! Plug-in variance surfaces and their off-policy reweighting.
//!
//! A surface is built from a logged history at a reference θ: the averaged
//! Jacobian Ĝ_T, the second-moment matrix Ω̂_T, and the realized allocation
//! κ_T. Because masking enters both matrices multiplicatively through the
//! expected mask terms, the surface can be *reweighted* to any candidate
//! allocation κ without touching the raw data:
//!
//! ```text
//! Ĝ(κ)  = m_G(κ) ⊘ m_G(κ_T) ⊙ Ĝ_T,      m_G(κ) = Σ_d κ_d · m(d)
//! Ω̂(κ) = m_Ω(κ) ⊘ m_Ω(κ_T) ⊙ Ω̂_T,     m_Ω(κ) = Σ_d κ_d · m(d)m(d)ᵀ
//! V̂(κ)  = ∇fᵀ [Ĝ(κ)ᵀ Ω̂(κ)⁻¹ Ĝ(κ)]⁻¹ ∇f
//! ```
//!
//! with the convention that a zero expected-mask entry divides to zero: an
//! entry the logged allocation never produced stays zero at every κ. The
//! same formulas evaluated at population moments give the oracle surface.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{averaged_jacobian, second_moment_matrix, MomentLog};
use crate::model::MomentModel;
use crate::rng::{derive_rng, source_stream};
use crate::sources::{oracle_nuisance, Scenario};

/// Condition-number ceiling past which a reweighted matrix is treated as
/// singular and the variance as infinite.
const COND_LIMIT: f64 = 1e12;

/// A point on the probability simplex: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates the simplex constraints: entries ≥ 0, sum within 1e-12 of 1.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("simplex point needs at least one entry".into()));
        }
        if entries.iter().any(|e| *e < 0.0 || !e.is_finite()) {
            return Err(Error::Config(format!(
                "simplex entries must be nonnegative and finite, got {entries:?}"
            )));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "simplex entries sum to {sum}, not 1"
            )));
        }
        Ok(SimplexPoint(entries))
    }

    pub fn uniform(d: usize) -> Self {
        SimplexPoint(vec![1.0 / d as f64; d])
    }

    /// The i-th vertex e_i of the d-simplex.
    pub fn vertex(d: usize, i: usize) -> Self {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        SimplexPoint(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Expected mask terms at allocation κ: the M×D matrix m_G (every column
/// equals Σ_d κ_d·m(d)) and the M×M matrix m_Ω = Σ_d κ_d·m(d)m(d)ᵀ.
pub fn mask_expectations(
    masks: &[Vec<bool>],
    kappa: &[f64],
    num_params: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = masks[0].len();
    let mut col = DVector::zeros(m);
    let mut m_omega = DMatrix::zeros(m, m);
    for (d, mask) in masks.iter().enumerate() {
        for i in 0..m {
            if mask[i] {
                col[i] += kappa[d];
                for j in 0..m {
                    if mask[j] {
                        m_omega[(i, j)] += kappa[d];
                    }
                }
            }
        }
    }
    let mut m_g = DMatrix::zeros(m, num_params);
    for j in 0..num_params {
        m_g.set_column(j, &col);
    }
    (m_g, m_omega)
}

/// Everything needed to evaluate V̂(κ) for any κ: fitted moment matrices at
/// the reference θ, the allocation that produced them, and the target
/// gradient.
#[derive(Clone, Debug)]
pub struct VarianceSurface {
    /// Averaged masked Jacobian Ĝ_T (M×D).
    pub g_hat: DMatrix<f64>,
    /// Symmetrized second-moment matrix Ω̂_T (M×M).
    pub omega_hat: DMatrix<f64>,
    /// Allocation the log realized (or the synthetic reference allocation
    /// for oracle surfaces).
    pub kappa_t: Vec<f64>,
    /// Per-source moment masks.
    pub mask_table: Vec<Vec<bool>>,
    /// ∇f_tar at the reference θ.
    pub grad_f: Vec<f64>,
    pub theta_ref: Vec<f64>,
}

/// Builds the plug-in surface from a logged history at θ (typically θ̂_T).
pub fn build_surface(
    log: &MomentLog,
    model: &MomentModel,
    theta: &[f64],
) -> Result<VarianceSurface> {
    Ok(VarianceSurface {
        g_hat: averaged_jacobian(log, model, theta)?,
        omega_hat: second_moment_matrix(log, model, theta)?,
        kappa_t: log.kappa(),
        mask_table: (0..model.num_sources())
            .map(|d| model.mask(d).to_vec())
            .collect(),
        grad_f: model.target_gradient(theta),
        theta_ref: theta.to_vec(),
    })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// The reweighted variance V̂(κ). Returns `+∞` when the reweighted
/// second-moment matrix or the bracketed information matrix is numerically
/// singular (condition number above 1e12 after the standard ridge) — the
/// logged data cannot price that allocation, most often because κ starves a
/// moment entirely.
pub fn variance_at(surface: &VarianceSurface, kappa: &SimplexPoint) -> f64 {
    let m = surface.omega_hat.nrows();
    let d = surface.g_hat.ncols();
    let (mg_k, mo_k) = mask_expectations(&surface.mask_table, kappa.as_slice(), d);
    let (mg_t, mo_t) = mask_expectations(&surface.mask_table, &surface.kappa_t, d);

    // Zero-reciprocal convention: entries with no mass under κ_T stay zero.
    let mut g = surface.g_hat.clone();
    for i in 0..m {
        for j in 0..d {
            let denom = mg_t[(i, j)];
            g[(i, j)] *= if denom == 0.0 { 0.0 } else { mg_k[(i, j)] / denom };
        }
    }
    let mut omega = surface.omega_hat.clone();
    for i in 0..m {
        for j in 0..m {
            let denom = mo_t[(i, j)];
            omega[(i, j)] *= if denom == 0.0 { 0.0 } else { mo_k[(i, j)] / denom };
        }
    }

    if omega.clone().cholesky().is_none() {
        let bump = 1e-8 * omega.trace() / m as f64;
        if bump <= 0.0 {
            return f64::INFINITY;
        }
        for i in 0..m {
            omega[(i, i)] += bump;
        }
    }
    if condition_number(&omega) > COND_LIMIT {
        return f64::INFINITY;
    }
    let Some(omega_inv) = omega
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| omega.try_inverse())
    else {
        return f64::INFINITY;
    };

    let bracket = g.transpose() * omega_inv * &g;
    if condition_number(&bracket) > COND_LIMIT {
        return f64::INFINITY;
    }
    let Some(bracket_inv) = bracket
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| bracket.try_inverse())
    else {
        return f64::INFINITY;
    };

    let grad = DVector::from_column_slice(&surface.grad_f);
    (grad.transpose() * bracket_inv * grad)[(0, 0)]
}

/// The oracle surface: population (G*, Ω*) at (θ*, η*) masked at the uniform
/// reference allocation — analytic when the scenario provides population
/// matrices, otherwise estimated from `mc_samples` oracle-scored draws per
/// source.
pub fn oracle_surface(
    scenario: &Scenario,
    mc_samples: usize,
    seed: u64,
) -> Result<VarianceSurface> {
    let theta_star = scenario.truth.theta_star.clone().ok_or_else(|| {
        Error::Config(format!(
            "scenario `{}` has no true θ; the oracle surface is undefined",
            scenario.name
        ))
    })?;
    let model = &scenario.model;
    let n_src = scenario.num_sources();
    let uniform = vec![1.0 / n_src as f64; n_src];
    let masks: Vec<Vec<bool>> = (0..n_src).map(|d| model.mask(d).to_vec()).collect();

    let (g_hat, omega_hat) = if let Some(pop) = &scenario.truth.population {
        let (mg, mo) = mask_expectations(&masks, &uniform, model.num_params());
        (
            pop.g_star.component_mul(&mg),
            pop.omega_star.component_mul(&mo),
        )
    } else {
        population_from_draws(scenario, &theta_star, mc_samples, seed)?
    };

    Ok(VarianceSurface {
        g_hat,
        omega_hat,
        kappa_t: uniform,
        mask_table: masks,
        grad_f: model.target_gradient(&theta_star),
        theta_ref: theta_star,
    })
}

/// Monte Carlo population moments: per-source expectations of the masked
/// Jacobian and masked cross products at (θ*, η*), mixed at the uniform
/// allocation.
fn population_from_draws(
    scenario: &Scenario,
    theta_star: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let model = &scenario.model;
    let eta = oracle_nuisance(scenario)?;
    let m = model.num_moments();
    let d = model.num_params();
    let n_src = scenario.num_sources();
    let mut g_hat = DMatrix::zeros(m, d);
    let mut omega_hat = DMatrix::zeros(m, m);
    let weight = 1.0 / (n_src as f64 * mc_samples as f64);
    let mut psi = vec![0.0; m];
    for src in 0..n_src {
        let mask = model.mask(src);
        let mut rng = derive_rng(seed, 0, source_stream(src));
        for _ in 0..mc_samples {
            let sample = scenario.query(src, &mut rng)?;
            for (i, mom) in model.moments().iter().enumerate() {
                if mask[i] {
                    psi[i] = (mom.psi)(&sample, theta_star, &eta)?;
                    let row = model.moment_jacobian(i, &sample, theta_star, &eta)?;
                    for (c, v) in row.iter().enumerate() {
                        g_hat[(i, c)] += weight * v;
                    }
                } else {
                    psi[i] = 0.0;
                }
            }
            for i in 0..m {
                if psi[i] == 0.0 {
                    continue;
                }
                for j in 0..m {
                    omega_hat[(i, j)] += weight * psi[i] * psi[j];
                }
            }
        }
    }
    let omega_t = omega_hat.transpose();
    Ok((g_hat, (omega_hat + omega_t) * 0.5))
}

/// The oracle variance V*(κ): [`oracle_surface`] reweighted to κ. Draws are
/// seeded deterministically so repeated calls agree bit for bit.
pub fn oracle_variance(scenario: &Scenario, kappa: &SimplexPoint, mc_samples: usize) -> Result<f64> {
    Ok(variance_at(&oracle_surface(scenario, mc_samples, 0)?, kappa))
}
