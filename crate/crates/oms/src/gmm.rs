//! Two-step GMM over a logged query history.
//!
//! The log records, for each time step, which source was queried, the sample
//! it returned, and which nuisance snapshot was current — so every moment
//! evaluation is prequential: sample `t` is always scored with nuisances
//! trained on data from before `t`.
//!
//! Estimation minimizes `ḡ_T(θ)ᵀ W ḡ_T(θ)` where `ḡ_T` averages the masked
//! moment vectors. Step one uses `W = I`; step two re-solves with
//! `W = Ω̂_T(θ̂_os)⁻¹`, the inverse of the (symmetrized, optionally ridged)
//! second-moment matrix at the one-step solution. Models that are affine in
//! θ solve in closed form; the rest run damped Gauss–Newton from a small
//! deterministic set of starting points inside the parameter box.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MomentModel, Sample};
use crate::nuisance::NuisanceSnapshot;

/// One entry of the query history.
#[derive(Clone, Debug)]
pub struct LogRecord {
    /// Time index, 1-based.
    pub t: usize,
    /// Which source was queried.
    pub source: usize,
    pub sample: Sample,
    /// Index into the log's snapshot store; always a snapshot trained on
    /// data observed strictly before `t`.
    pub snapshot: usize,
}

/// The full query history: records, per-source counts, and the nuisance
/// snapshots the records reference.
#[derive(Clone, Debug)]
pub struct MomentLog {
    records: Vec<LogRecord>,
    counts: Vec<usize>,
    snapshots: Vec<NuisanceSnapshot>,
}

impl MomentLog {
    /// An empty log whose snapshot store starts with the untrained fallback
    /// snapshot (id 0), so samples recorded before any refit are scored with
    /// the declared fallbacks.
    pub fn new(num_sources: usize) -> Self {
        MomentLog {
            records: Vec::new(),
            counts: vec![0; num_sources],
            snapshots: vec![NuisanceSnapshot::untrained(0)],
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_sources(&self) -> usize {
        self.counts.len()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn snapshots(&self) -> &[NuisanceSnapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, id: usize) -> &NuisanceSnapshot {
        &self.snapshots[id]
    }

    /// Index of the snapshot new records will reference.
    pub fn latest_snapshot(&self) -> usize {
        self.snapshots.len() - 1
    }

    /// Adds a freshly fitted snapshot; subsequent records use it.
    pub fn push_snapshot(&mut self, snapshot: NuisanceSnapshot) -> usize {
        self.snapshots.push(snapshot);
        self.snapshots.len() - 1
    }

    /// Appends one query result at time `len() + 1`.
    pub fn record(&mut self, source: usize, sample: Sample) {
        let snapshot = self.latest_snapshot();
        self.counts[source] += 1;
        self.records.push(LogRecord {
            t: self.records.len() + 1,
            source,
            sample,
            snapshot,
        });
    }

    /// The realized allocation κ_T = counts / T.
    pub fn kappa(&self) -> Vec<f64> {
        let t = self.records.len().max(1) as f64;
        self.counts.iter().map(|c| *c as f64 / t).collect()
    }

    /// How many logged samples can evaluate each moment.
    pub fn moment_selection_counts(&self, model: &MomentModel) -> Vec<usize> {
        let mut out = vec![0usize; model.num_moments()];
        for (d, count) in self.counts.iter().enumerate() {
            for (i, on) in model.mask(d).iter().enumerate() {
                if *on {
                    out[i] += count;
                }
            }
        }
        out
    }
}

/// Errors unless every moment has at least one logged sample that evaluates
/// it. The check is per moment, not per parameter: even a history that
/// happens to pin down θ through the remaining moments is rejected, because
/// the weighting and variance machinery need every row of the moment vector.
pub fn check_identification(log: &MomentLog, model: &MomentModel) -> Result<()> {
    for (i, n) in log.moment_selection_counts(model).iter().enumerate() {
        if *n == 0 {
            return Err(Error::UnderIdentified {
                moment: model.moments()[i].name.clone(),
            });
        }
    }
    Ok(())
}

/// The masked moment average ḡ_T(θ) = (1/T) Σ_t m(s_t) ⊙ ψ̃(O_t; θ, η_t).
pub fn moment_average(
    log: &MomentLog,
    model: &MomentModel,
    theta: &[f64],
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(model.num_moments());
    for rec in log.records() {
        let mask = model.mask(rec.source);
        let eta = log.snapshot(rec.snapshot);
        for (i, m) in model.moments().iter().enumerate() {
            if mask[i] {
                g[i] += (m.psi)(&rec.sample, theta, eta)?;
            }
        }
    }
    Ok(g / log.len().max(1) as f64)
}

/// The masked Jacobian average Ĝ_T(θ) = (1/T) Σ_t ∇_θ g_t(θ).
pub fn averaged_jacobian(
    log: &MomentLog,
    model: &MomentModel,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let mut j = DMatrix::zeros(model.num_moments(), model.num_params());
    for rec in log.records() {
        let mask = model.mask(rec.source);
        let eta = log.snapshot(rec.snapshot);
        for i in 0..model.num_moments() {
            if mask[i] {
                let row = model.moment_jacobian(i, &rec.sample, theta, eta)?;
                for (c, v) in row.iter().enumerate() {
                    j[(i, c)] += *v;
                }
            }
        }
    }
    Ok(j / log.len().max(1) as f64)
}

/// The symmetrized second-moment matrix Ω̂_T(θ) = (1/T) Σ_t g_t g_tᵀ.
/// Entries pairing moments that are never co-observed stay exactly zero.
pub fn second_moment_matrix(
    log: &MomentLog,
    model: &MomentModel,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let m = model.num_moments();
    let mut omega = DMatrix::zeros(m, m);
    let mut g = vec![0.0; m];
    for rec in log.records() {
        let mask = model.mask(rec.source);
        let eta = log.snapshot(rec.snapshot);
        for (i, mom) in model.moments().iter().enumerate() {
            g[i] = if mask[i] {
                (mom.psi)(&rec.sample, theta, eta)?
            } else {
                0.0
            };
        }
        for i in 0..m {
            if g[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                omega[(i, j)] += g[i] * g[j];
            }
        }
    }
    omega /= log.len().max(1) as f64;
    // Exact symmetry for the eigenvalue-sensitive consumers downstream.
    let omega_t = omega.transpose();
    Ok((omega + omega_t) * 0.5)
}

/// Solver diagnostics carried alongside the estimate.
#[derive(Clone, Debug, Default)]
pub struct GmmDiagnostics {
    /// The second-moment matrix needed a ridge before inversion.
    pub ridge_applied: bool,
    /// The final θ̂ sits on the parameter box boundary.
    pub boundary_hit: bool,
    /// Gauss–Newton iterations spent on the accepted start (0 when the
    /// closed-form path ran).
    pub iterations: usize,
    pub converged: bool,
}

/// A fitted two-step GMM estimate.
#[derive(Clone, Debug)]
pub struct GmmFit {
    /// One-step solution (identity weight).
    pub theta_os: Vec<f64>,
    /// Two-step solution.
    pub theta: Vec<f64>,
    /// The target β̂ = f_tar(θ̂).
    pub beta: f64,
    /// The second-step weight matrix.
    pub weight: DMatrix<f64>,
    /// ḡ_T(θ̂)ᵀ W ḡ_T(θ̂) at the two-step solution.
    pub objective_value: f64,
    pub diagnostics: GmmDiagnostics,
}

fn objective(g: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (g.transpose() * w * g)[(0, 0)]
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .or_else(|| a.clone().lu().solve(b))
        .or_else(|| {
            let d = a.nrows();
            let mut ridged = a.clone();
            let bump = 1e-10 * (a.trace().abs() / d as f64).max(1.0);
            for i in 0..d {
                ridged[(i, i)] += bump;
            }
            ridged.lu().solve(b)
        })
}

/// Deterministic starting points: the box center, then for each coordinate
/// the midpoints of the lower and upper half-boxes (1 + 2D points).
fn multistart_points(model: &MomentModel) -> Vec<Vec<f64>> {
    let center = model.theta_center();
    let mut starts = vec![center.clone()];
    for (j, (lo, hi)) in model.theta_box().iter().enumerate() {
        let quarter = (hi - lo) / 4.0;
        for sign in [-1.0, 1.0] {
            let mut p = center.clone();
            p[j] += sign * quarter;
            starts.push(p);
        }
    }
    starts
}

/// Closed-form minimizer for models affine in θ: with constant Jacobian J̄
/// and ḡ(θ) = ā + J̄(θ − θ0), the minimum of the quadratic form is
/// θ0 − (J̄ᵀWJ̄)⁻¹ J̄ᵀW ā.
fn solve_affine(
    log: &MomentLog,
    model: &MomentModel,
    w: &DMatrix<f64>,
) -> Result<(Vec<f64>, f64, bool)> {
    let theta0 = model.theta_center();
    let a = moment_average(log, model, &theta0)?;
    let j = averaged_jacobian(log, model, &theta0)?;
    let jtw = j.transpose() * w;
    let normal = &jtw * &j;
    let rhs = &jtw * &a;
    let step = solve_spd(&normal, &rhs).ok_or_else(|| {
        Error::Config("normal equations are singular; the logged history does not identify θ".into())
    })?;
    let mut theta: Vec<f64> = theta0
        .iter()
        .zip(step.iter())
        .map(|(t0, s)| t0 - s)
        .collect();
    let clipped = model.clip_to_box(&mut theta);
    let g = moment_average(log, model, &theta)?;
    Ok((theta, objective(&g, w), clipped))
}

struct GnOutcome {
    theta: Vec<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
    boundary: bool,
}

/// Damped Gauss–Newton from one start: full steps, halved on objective
/// increase, iterates clipped to the parameter box.
fn gauss_newton(
    log: &MomentLog,
    model: &MomentModel,
    w: &DMatrix<f64>,
    start: &[f64],
) -> Result<GnOutcome> {
    const MAX_ITER: usize = 200;
    const STEP_TOL: f64 = 1e-10;

    let mut theta = start.to_vec();
    let mut boundary = model.clip_to_box(&mut theta);
    let mut g = moment_average(log, model, &theta)?;
    let mut obj = objective(&g, w);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_ITER {
        iterations = iter;
        let j = averaged_jacobian(log, model, &theta)?;
        let jtw = j.transpose() * w;
        let normal = &jtw * &j;
        let rhs = &jtw * &g;
        let Some(step) = solve_spd(&normal, &rhs) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t - scale * s)
                .collect();
            let clipped = model.clip_to_box(&mut cand);
            let g_cand = moment_average(log, model, &cand)?;
            let obj_cand = objective(&g_cand, w);
            if obj_cand <= obj {
                let moved: f64 = cand
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                theta = cand;
                boundary = clipped;
                g = g_cand;
                obj = obj_cand;
                accepted = true;
                if moved < STEP_TOL {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No descent at any step length: at a (possibly constrained)
            // stationary point up to numerical precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    Ok(GnOutcome {
        theta,
        objective: obj,
        iterations,
        converged,
        boundary,
    })
}

/// Minimizes the quadratic form under `w`, dispatching on model linearity.
/// Returns (θ̂, objective, iterations, converged, boundary_hit).
fn solve_with_weight(
    log: &MomentLog,
    model: &MomentModel,
    w: &DMatrix<f64>,
    warm: Option<&[f64]>,
) -> Result<(Vec<f64>, f64, usize, bool, bool)> {
    if model.linear_in_theta() {
        let (theta, obj, clipped) = solve_affine(log, model, w)?;
        return Ok((theta, obj, 0, true, clipped));
    }
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(ws) = warm {
        starts.push(ws.to_vec());
    }
    starts.extend(multistart_points(model));
    let mut best: Option<GnOutcome> = None;
    for start in &starts {
        let out = gauss_newton(log, model, w, start)?;
        let improved = best.as_ref().is_none_or(|b| out.objective < b.objective);
        if improved {
            best = Some(out);
        }
        // A numerically zero objective is a global minimum; later starts
        // cannot beat it.
        if best.as_ref().is_some_and(|b| b.objective < 1e-18) {
            break;
        }
    }
    let best = best.expect("at least one start");
    Ok((
        best.theta,
        best.objective,
        best.iterations,
        best.converged,
        best.boundary,
    ))
}

/// Two-step GMM over the logged history.
///
/// `warm_start` (typically the previous checkpoint's θ̂) is tried before the
/// deterministic starts; it never replaces them.
///
/// # Errors
/// Under-identification when any moment has zero logged selections; a
/// degenerate-surface error when the second-moment matrix is zero.
pub fn two_step_estimate(
    log: &MomentLog,
    model: &MomentModel,
    warm_start: Option<&[f64]>,
) -> Result<GmmFit> {
    check_identification(log, model)?;
    let m = model.num_moments();

    // Step one: identity weight.
    let identity = DMatrix::identity(m, m);
    let (theta_os, _, _, _, boundary_os) = solve_with_weight(log, model, &identity, warm_start)?;

    // Step two: inverse second-moment weight at the one-step solution.
    let mut omega = second_moment_matrix(log, model, &theta_os)?;
    let mut ridge_applied = false;
    if omega.clone().cholesky().is_none() {
        let bump = 1e-8 * omega.trace() / m as f64;
        if bump <= 0.0 {
            return Err(Error::DegenerateSurface);
        }
        for i in 0..m {
            omega[(i, i)] += bump;
        }
        ridge_applied = true;
    }
    let weight = omega
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| omega.clone().try_inverse())
        .ok_or(Error::DegenerateSurface)?;

    let (theta, objective_value, iterations, converged, boundary) =
        solve_with_weight(log, model, &weight, Some(&theta_os))?;

    Ok(GmmFit {
        beta: model.target(&theta),
        theta_os,
        theta,
        weight,
        objective_value,
        diagnostics: GmmDiagnostics {
            ridge_applied,
            boundary_hit: boundary || boundary_os,
            iterations,
            converged,
        },
    })
}
