//! Moment models: the raw moment vector ψ̃, per-source selection masks, the
//! parameter box Θ, the target functional f_tar, and the influence-function
//! building blocks used by the built-in causal scenarios.
//!
//! A model bundles `M` moment coordinates over `D` parameters and `|D|`
//! sources. Querying source `d` yields a sample that can evaluate exactly the
//! coordinates with `mask(d) = 1`; [`augmented_moments`] forms
//!
//! ```text
//! g(θ, η) = m(s) ⊙ ψ̃(sample, θ, η),
//! ```
//!
//! evaluating only the unmasked coordinates (masked ones are exactly zero and
//! typically could not be computed anyway — the sample lacks their
//! variables).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nuisance::NuisanceSnapshot;

/// A single observation: named variables bound to scalar values.
///
/// Samples from one source share an `Arc`'d schema, so a sample is one small
/// `Vec<f64>` plus a pointer. Lookup is a linear scan — sources carry at most
/// a handful of variables, where scanning beats hashing.
#[derive(Clone, Debug)]
pub struct Sample {
    schema: Arc<[String]>,
    values: Vec<f64>,
}

impl Sample {
    /// Binds `values` to `schema` positionally.
    ///
    /// # Panics
    /// Panics if the lengths differ; schemas are constructed once per source,
    /// so a mismatch is a programming error, not a data error.
    pub fn new(schema: Arc<[String]>, values: Vec<f64>) -> Self {
        assert_eq!(
            schema.len(),
            values.len(),
            "sample schema/value arity mismatch"
        );
        Sample { schema, values }
    }

    /// Convenience constructor for tests and hand-built data.
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        let schema: Arc<[String]> = pairs.iter().map(|(n, _)| n.to_string()).collect();
        let values = pairs.iter().map(|(_, v)| *v).collect();
        Sample { schema, values }
    }

    /// Looks up a variable by name.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.schema
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    /// Looks up a variable, failing with a schema error naming it.
    pub fn require(&self, name: &str, context: &str) -> Result<f64> {
        self.get(name).ok_or_else(|| Error::Schema {
            variable: name.to_string(),
            context: context.to_string(),
        })
    }

    /// Variable names carried by this sample.
    pub fn names(&self) -> &[String] {
        &self.schema
    }

    /// Values in schema order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One-hot selection of the source queried at a time step (0-based index).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionVector {
    pub source: usize,
}

impl SelectionVector {
    pub fn new(source: usize) -> Self {
        SelectionVector { source }
    }

    /// The explicit one-hot vector s with `s[source] = 1`.
    pub fn one_hot(&self, num_sources: usize) -> Vec<f64> {
        let mut s = vec![0.0; num_sources];
        s[self.source] = 1.0;
        s
    }
}

/// ψ̃_i(sample, θ, η) for one moment coordinate.
pub type MomentFn = Arc<dyn Fn(&Sample, &[f64], &NuisanceSnapshot) -> Result<f64> + Send + Sync>;

/// Analytic row ∂ψ̃_i/∂θ ∈ ℝ^D for one moment coordinate.
pub type JacobianFn =
    Arc<dyn Fn(&Sample, &[f64], &NuisanceSnapshot) -> Result<Vec<f64>> + Send + Sync>;

/// One coordinate of the raw moment vector ψ̃.
pub struct Moment {
    /// Diagnostic label, e.g. `"itt_y"` or `"frontdoor"`.
    pub name: String,
    /// Variables the moment reads from a sample.
    pub requires: Vec<String>,
    /// Named nuisance slots the moment consumes (empty for parametric moments).
    pub slots: Vec<String>,
    /// The moment function ψ̃_i.
    pub psi: MomentFn,
    /// Analytic Jacobian row, or `None` to fall back to central differences.
    pub jacobian: Option<JacobianFn>,
}

/// A complete moment model: masks, moments, parameter box, and target map.
///
/// Immutable after construction and cheap to share across concurrent runs;
/// all evaluation functions are pure.
pub struct MomentModel {
    name: String,
    num_params: usize,
    theta_box: Vec<(f64, f64)>,
    /// `masks[d][i]` — whether source `d` reveals moment `i`.
    masks: Vec<Vec<bool>>,
    moments: Vec<Moment>,
    /// Whether ψ̃ is affine in θ, making the GMM objective an exact quadratic.
    linear_in_theta: bool,
    f_tar: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    f_tar_grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl MomentModel {
    /// Builds a model whose target is the first parameter, `f_tar(θ) = θ_1` —
    /// the form shared by every built-in scenario.
    pub fn with_first_param_target(
        name: impl Into<String>,
        num_params: usize,
        theta_box: Vec<(f64, f64)>,
        masks: Vec<Vec<bool>>,
        moments: Vec<Moment>,
        linear_in_theta: bool,
    ) -> Result<Self> {
        let grad = move |_theta: &[f64]| {
            let mut g = vec![0.0; num_params];
            g[0] = 1.0;
            g
        };
        Self::new(
            name,
            num_params,
            theta_box,
            masks,
            moments,
            linear_in_theta,
            Arc::new(|theta: &[f64]| theta[0]),
            Arc::new(grad),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        num_params: usize,
        theta_box: Vec<(f64, f64)>,
        masks: Vec<Vec<bool>>,
        moments: Vec<Moment>,
        linear_in_theta: bool,
        f_tar: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        f_tar_grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    ) -> Result<Self> {
        let num_moments = moments.len();
        if num_moments == 0 || num_params == 0 || masks.is_empty() {
            return Err(Error::Config(
                "moment model needs at least one moment, parameter, and source".into(),
            ));
        }
        if theta_box.len() != num_params {
            return Err(Error::Config(format!(
                "theta_box has {} intervals for {} parameters",
                theta_box.len(),
                num_params
            )));
        }
        for (lo, hi) in &theta_box {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "theta_box interval [{lo}, {hi}] is not a nonempty compact interval"
                )));
            }
        }
        for (d, mask) in masks.iter().enumerate() {
            if mask.len() != num_moments {
                return Err(Error::Config(format!(
                    "mask for source {d} has length {}, expected {num_moments}",
                    mask.len()
                )));
            }
        }
        for i in 0..num_moments {
            if !masks.iter().any(|m| m[i]) {
                return Err(Error::Config(format!(
                    "moment {i} (`{}`) is not revealed by any source",
                    moments[i].name
                )));
            }
        }
        Ok(MomentModel {
            name: name.into(),
            num_params,
            theta_box,
            masks,
            moments,
            linear_in_theta,
            f_tar,
            f_tar_grad,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// M — the number of moment conditions.
    pub fn num_moments(&self) -> usize {
        self.moments.len()
    }

    /// D — the number of parameters in θ.
    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// |D| — the number of queryable data sources.
    pub fn num_sources(&self) -> usize {
        self.masks.len()
    }

    /// The selection mask m(d) of a source.
    pub fn mask(&self, source: usize) -> &[bool] {
        &self.masks[source]
    }

    /// Per-coordinate closed bounds of the parameter box Θ.
    pub fn theta_box(&self) -> &[(f64, f64)] {
        &self.theta_box
    }

    /// Whether ψ̃ is affine in θ (enables the closed-form GMM solve).
    pub fn linear_in_theta(&self) -> bool {
        self.linear_in_theta
    }

    /// The moment coordinates.
    pub fn moments(&self) -> &[Moment] {
        &self.moments
    }

    /// Union of the nuisance slot names consumed by any moment.
    pub fn nuisance_slots(&self) -> Vec<&str> {
        let mut slots: Vec<&str> = Vec::new();
        for m in &self.moments {
            for s in &m.slots {
                if !slots.contains(&s.as_str()) {
                    slots.push(s);
                }
            }
        }
        slots
    }

    /// Center of the parameter box.
    pub fn theta_center(&self) -> Vec<f64> {
        self.theta_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Whether θ lies inside the box (inclusive).
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(&self.theta_box)
            .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    /// Clips θ into the box in place; returns whether any coordinate moved.
    pub fn clip_to_box(&self, theta: &mut [f64]) -> bool {
        let mut clipped = false;
        for (t, (lo, hi)) in theta.iter_mut().zip(&self.theta_box) {
            let c = t.clamp(*lo, *hi);
            if c != *t {
                clipped = true;
                *t = c;
            }
        }
        clipped
    }

    /// Evaluates the full raw moment vector ψ̃(sample, θ, η).
    ///
    /// The sample must carry the variables of *every* moment; use
    /// [`augmented_moments`] for per-source samples.
    pub fn psi(&self, sample: &Sample, theta: &[f64], eta: &NuisanceSnapshot) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.num_moments());
        for (i, m) in self.moments.iter().enumerate() {
            out[i] = (m.psi)(sample, theta, eta)?;
        }
        Ok(out)
    }

    /// Evaluates the M×D Jacobian ∂ψ̃/∂θ, using analytic rows where the
    /// moment provides one and central finite differences otherwise.
    ///
    /// The finite-difference step is `1e-6 · max(1, |θ_j|)` per coordinate —
    /// large enough to dominate rounding at double precision, small enough to
    /// keep the truncation error of the same order.
    pub fn psi_jacobian(
        &self,
        sample: &Sample,
        theta: &[f64],
        eta: &NuisanceSnapshot,
    ) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.num_moments(), self.num_params);
        for i in 0..self.moments.len() {
            let row = self.moment_jacobian(i, sample, theta, eta)?;
            for (jcol, v) in row.iter().enumerate() {
                jac[(i, jcol)] = *v;
            }
        }
        Ok(jac)
    }

    /// One row of the Jacobian: ∂ψ̃_i/∂θ for moment `index` alone, so callers
    /// averaging over masked histories never touch moments the sample cannot
    /// evaluate.
    pub fn moment_jacobian(
        &self,
        index: usize,
        sample: &Sample,
        theta: &[f64],
        eta: &NuisanceSnapshot,
    ) -> Result<Vec<f64>> {
        let m = &self.moments[index];
        match &m.jacobian {
            Some(j) => j(sample, theta, eta),
            None => {
                let mut row = vec![0.0; self.num_params];
                let mut bumped = theta.to_vec();
                for jcol in 0..self.num_params {
                    let h = 1e-6 * theta[jcol].abs().max(1.0);
                    bumped[jcol] = theta[jcol] + h;
                    let up = (m.psi)(sample, &bumped, eta)?;
                    bumped[jcol] = theta[jcol] - h;
                    let down = (m.psi)(sample, &bumped, eta)?;
                    bumped[jcol] = theta[jcol];
                    row[jcol] = (up - down) / (2.0 * h);
                }
                Ok(row)
            }
        }
    }

    /// The target functional β = f_tar(θ).
    pub fn target(&self, theta: &[f64]) -> f64 {
        (self.f_tar)(theta)
    }

    /// The gradient ∇f_tar(θ).
    pub fn target_gradient(&self, theta: &[f64]) -> Vec<f64> {
        (self.f_tar_grad)(theta)
    }
}

impl std::fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("num_moments", &self.num_moments())
            .field("num_params", &self.num_params)
            .field("num_sources", &self.num_sources())
            .field("linear_in_theta", &self.linear_in_theta)
            .finish()
    }
}

/// Evaluates the augmented moment vector g = m(s) ⊙ ψ̃(sample, θ, η).
///
/// Only unmasked coordinates are evaluated; masked coordinates are exactly
/// zero without touching the sample, so a source's sample never needs
/// variables belonging to moments it cannot reveal.
///
/// # Errors
/// A schema error naming the variable when the sample lacks one that an
/// unmasked moment requires; a configuration error when a nuisance slot is
/// missing from the snapshot.
pub fn augmented_moments(
    model: &MomentModel,
    s: SelectionVector,
    sample: &Sample,
    theta: &[f64],
    eta: &NuisanceSnapshot,
) -> Result<DVector<f64>> {
    let mask = model.mask(s.source);
    let mut g = DVector::zeros(model.num_moments());
    for (i, m) in model.moments().iter().enumerate() {
        if mask[i] {
            g[i] = (m.psi)(sample, theta, eta)?;
        }
    }
    Ok(g)
}

fn as_binary(value: f64, what: &str) -> Result<usize> {
    if value == 0.0 {
        Ok(0)
    } else if value == 1.0 {
        Ok(1)
    } else {
        Err(Error::Unsupported(format!(
            "{what} must be binary 0/1, got {value}"
        )))
    }
}

/// The augmented inverse propensity weighting (AIPW) score for the contrast
/// `E[R | do(Z=1)] − E[R | do(Z=0)]` given covariates `w`:
///
/// ```text
/// ψ = (Z/π(W) − (1−Z)/(1−π(W))) · (R − μ(Z, W)) + μ(1, W) − μ(0, W)
/// ```
///
/// `pi` is the propensity `P(Z=1 | W=w)` and `mu(z, w)` the outcome
/// regression `E[R | Z=z, W=w]`.
///
/// # Errors
/// A positivity error when `pi(w)` falls outside (0, 1) — fitted propensities
/// are clamped upstream, so this only fires for misconfigured oracles — and
/// an unsupported-model error for non-binary `z`.
pub fn aipw_score(
    w: &[f64],
    z: f64,
    r: f64,
    pi: impl Fn(&[f64]) -> f64,
    mu: impl Fn(f64, &[f64]) -> f64,
) -> Result<f64> {
    as_binary(z, "AIPW treatment indicator")?;
    let pw = pi(w);
    if !(pw > 0.0 && pw < 1.0) {
        return Err(Error::Positivity { value: pw });
    }
    let weight = z / pw - (1.0 - z) / (1.0 - pw);
    Ok(weight * (r - mu(z, w)) + (mu(1.0, w) - mu(0.0, w)))
}

/// Nuisance tables for the frontdoor score, all over binary `x` and `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontdoorTables {
    /// `p_m_given_x[x][m]` = P(M = m | X = x).
    pub p_m_given_x: [[f64; 2]; 2],
    /// `e_y_given_xm[x][m]` = E[Y | X = x, M = m].
    pub e_y_given_xm: [[f64; 2]; 2],
    /// `p_x[x]` = P(X = x).
    pub p_x: [f64; 2],
}

/// The efficient influence function for the frontdoor functional
/// `E[Y | do(X=1)] − E[Y | do(X=0)]` with binary treatment and mediator:
///
/// ```text
/// ψ = (p₁(M) − p₀(M))/p_X(M) · (Y − E[Y|X, M])
///   + (2X − 1)/p(X) · ( Σ_x E[Y|x, M] p(x) − Σ_{x,m} E[Y|x, m] p_X(m) p(x) )
///   + Σ_m E[Y|X, m] (p₁(m) − p₀(m))
/// ```
///
/// where `p_x(m) = P(M = m | X = x)`. The sums over `x, m ∈ {0, 1}` are
/// evaluated exactly; continuous mediators are out of scope.
///
/// # Errors
/// Unsupported-model error for non-binary `x` or `m`; positivity error when a
/// realized denominator (`p_X(M)` or `p(X)`) is not strictly positive.
pub fn frontdoor_score(x: f64, m: f64, y: f64, eta: &FrontdoorTables) -> Result<f64> {
    let xi = as_binary(x, "frontdoor treatment")?;
    let mi = as_binary(m, "frontdoor mediator")?;

    let p_xm = eta.p_m_given_x[xi][mi];
    let p_xx = eta.p_x[xi];
    for denom in [p_xm, p_xx] {
        if !(denom > 0.0) {
            return Err(Error::Positivity { value: denom });
        }
    }

    let mediator_contrast = eta.p_m_given_x[1][mi] - eta.p_m_given_x[0][mi];
    let residual = y - eta.e_y_given_xm[xi][mi];
    let term1 = mediator_contrast / p_xm * residual;

    let sum_x: f64 = (0..2)
        .map(|xv| eta.e_y_given_xm[xv][mi] * eta.p_x[xv])
        .sum();
    let sum_xm: f64 = (0..2)
        .map(|xv| {
            (0..2)
                .map(|mv| eta.e_y_given_xm[xv][mv] * eta.p_m_given_x[xi][mv] * eta.p_x[xv])
                .sum::<f64>()
        })
        .sum();
    let term2 = (x - (1.0 - x)) / p_xx * (sum_x - sum_xm);

    let term3: f64 = (0..2)
        .map(|mv| eta.e_y_given_xm[xi][mv] * (eta.p_m_given_x[1][mv] - eta.p_m_given_x[0][mv]))
        .sum();

    Ok(term1 + term2 + term3)
}
