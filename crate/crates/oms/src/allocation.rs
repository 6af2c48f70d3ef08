//! Allocation arithmetic: minimizing a variance surface over the simplex,
//! projecting ideal allocations onto what a partially spent budget can still
//! reach, and rounding fractional targets to integer query counts.
//!
//! The feasible-set geometry is the crux. After `t` queries at realized mix
//! κ_past, a policy that will spend the remaining fraction `1 − w` of its
//! horizon at some mix κ can only land on
//!
//! ```text
//! Δ̃ = { w·κ_past + (1 − w)·κ : κ ∈ Δ },
//! ```
//!
//! a shrunken copy of the simplex anchored at the history. Steering toward
//! an ideal target means Euclidean-projecting the target onto Δ̃, which
//! reduces to an ordinary simplex projection in the κ coordinate.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::variance::{variance_at, SimplexPoint, VarianceSurface};

/// Spacing of the coarse seeding grid for the one-dimensional search.
const EDGE_GRID_STEP: f64 = 0.01;
/// Denominator of the composition grid used to seed the multi-source search.
const SIMPLEX_GRID_DENOM: usize = 20;
/// Projected-gradient refinement steps after the grid seed.
const PGD_STEPS: usize = 50;

/// Estimated oracle allocation: the argmin of the reweighted variance
/// `V̂(κ)` over the simplex, located to within `resolution`.
///
/// Two sources reduce to a scalar search: a 0.01-spaced grid brackets the
/// minimum and golden-section refines it. Three or more sources seed a
/// composition grid and refine with projected-gradient descent. Exact ties
/// resolve toward the lexicographically smaller point. Errors with
/// [`Error::DegenerateSurface`] when no grid point prices finitely.
pub fn estimate_oracle_simplex(
    surface: &VarianceSurface,
    resolution: f64,
) -> Result<SimplexPoint> {
    minimize_on_simplex(
        |k| variance_at(surface, k),
        surface.kappa_t.len(),
        resolution,
    )
}

/// Cost-aware variant: minimizes `V̂(κ)·(κᵀc)`, the variance per unit of
/// budget, which is the right objective when queries have heterogeneous
/// prices and the horizon is a spend cap rather than a count.
pub fn estimate_oracle_simplex_with_cost(
    surface: &VarianceSurface,
    cost: &[f64],
    resolution: f64,
) -> Result<SimplexPoint> {
    let d = surface.kappa_t.len();
    if cost.len() != d {
        return Err(Error::Config(format!(
            "cost vector has {} entries for {} sources",
            cost.len(),
            d
        )));
    }
    minimize_on_simplex(
        |k| {
            let spend: f64 = k.as_slice().iter().zip(cost).map(|(a, b)| a * b).sum();
            variance_at(surface, k) * spend
        },
        d,
        resolution,
    )
}

fn minimize_on_simplex<F: Fn(&SimplexPoint) -> f64>(
    objective: F,
    d: usize,
    resolution: f64,
) -> Result<SimplexPoint> {
    if d == 2 {
        return minimize_on_edge(&objective, resolution);
    }
    // Seed: all compositions of SIMPLEX_GRID_DENOM into d parts.
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut comp = vec![0usize; d];
    enumerate_compositions(SIMPLEX_GRID_DENOM, d, 0, &mut comp, &mut |c| {
        let point: Vec<f64> = c
            .iter()
            .map(|&k| k as f64 / SIMPLEX_GRID_DENOM as f64)
            .collect();
        let v = objective(&SimplexPoint::new(point.clone()).expect("grid point"));
        if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, point));
        }
    });
    let Some((mut f_cur, mut x)) = best else {
        return Err(Error::DegenerateSurface);
    };

    // Refine: projected gradient with backtracking line search.
    let mut step = 0.1;
    for _ in 0..PGD_STEPS {
        let grad = simplex_fd_gradient(&objective, &x);
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
            let proj = euclidean_simplex_projection(&trial);
            let f_trial = objective(&proj);
            if f_trial < f_cur {
                x = proj.as_slice().to_vec();
                f_cur = f_trial;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved || step * grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < resolution * 1e-3
        {
            break;
        }
        step *= 2.0;
    }
    Ok(SimplexPoint::new(x).expect("projected point"))
}

/// Central finite differences of the objective along feasible directions,
/// stepping inside the simplex when a coordinate sits on the boundary.
fn simplex_fd_gradient<F: Fn(&SimplexPoint) -> f64>(objective: &F, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    let d = x.len();
    let mut grad = vec![0.0; d];
    for i in 0..d {
        // Move mass between coordinate i and the rest, staying on the simplex.
        let eval = |delta: f64| {
            let mut y = x.to_vec();
            y[i] += delta;
            let scale: f64 = (1.0 - y[i]) / (1.0 - x[i]).max(1e-12);
            for (j, yj) in y.iter_mut().enumerate() {
                if j != i {
                    *yj *= scale;
                }
            }
            objective(&SimplexPoint::new(euclidean_simplex_projection(&y).as_slice().to_vec()).unwrap())
        };
        let up = (x[i] + h).min(1.0) - x[i];
        let dn = x[i] - (x[i] - h).max(0.0);
        if up + dn == 0.0 {
            grad[i] = 0.0;
        } else {
            grad[i] = (eval(up) - eval(-dn)) / (up + dn);
        }
    }
    grad
}

fn enumerate_compositions(
    total: usize,
    parts: usize,
    index: usize,
    current: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if index == parts - 1 {
        current[index] = total;
        visit(current);
        return;
    }
    for k in 0..=total {
        current[index] = k;
        enumerate_compositions(total - k, parts, index + 1, current, visit);
    }
}

/// Golden-section refinement of the scalar map κ1 ↦ objective((κ1, 1−κ1)),
/// bracketed by a coarse grid scan.
fn minimize_on_edge<F: Fn(&SimplexPoint) -> f64>(
    objective: &F,
    resolution: f64,
) -> Result<SimplexPoint> {
    let eval = |k1: f64| {
        let k1 = k1.clamp(0.0, 1.0);
        objective(&SimplexPoint::new(vec![k1, 1.0 - k1]).unwrap())
    };
    let steps = (1.0 / EDGE_GRID_STEP).round() as usize;
    let mut best_idx = None;
    let mut best_val = f64::INFINITY;
    for i in 0..=steps {
        let v = eval(i as f64 * EDGE_GRID_STEP);
        if v.is_finite() && v < best_val {
            best_val = v;
            best_idx = Some(i);
        }
    }
    let Some(idx) = best_idx else {
        return Err(Error::DegenerateSurface);
    };
    let mut lo = (idx as f64 - 1.0) * EDGE_GRID_STEP;
    let mut hi = (idx as f64 + 1.0) * EDGE_GRID_STEP;
    lo = lo.max(0.0);
    hi = hi.min(1.0);

    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    while hi - lo > resolution {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = eval(x2);
        }
    }
    let k1 = 0.5 * (lo + hi);
    Ok(SimplexPoint::new(vec![k1, 1.0 - k1]).unwrap())
}

/// The allocations a policy can still realize: having locked in `κ_past`
/// with weight `w` (the fraction of the horizon already spent), the terminal
/// mix is `w·κ_past + (1−w)·κ` for some free choice κ on the simplex.
#[derive(Clone, Debug)]
pub struct FeasibleSet {
    pub kappa_past: Vec<f64>,
    /// Weight on the locked-in history, in [0, 1].
    pub w: f64,
}

impl FeasibleSet {
    pub fn new(kappa_past: Vec<f64>, w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!("history weight {w} outside [0, 1]")));
        }
        Ok(FeasibleSet { kappa_past, w })
    }
}

/// Euclidean projection of `target` onto the feasible set: solve for the
/// free mix κ that lands closest, by projecting `(target − w·κ_past)/(1−w)`
/// onto the simplex and mapping back. A fully spent horizon (`w = 1`)
/// returns the history unchanged.
pub fn project(feasible: &FeasibleSet, target: &SimplexPoint) -> SimplexPoint {
    let w = feasible.w;
    if w >= 1.0 {
        return SimplexPoint::new(feasible.kappa_past.clone()).expect("logged allocation");
    }
    let free: Vec<f64> = target
        .as_slice()
        .iter()
        .zip(&feasible.kappa_past)
        .map(|(t, p)| (t - w * p) / (1.0 - w))
        .collect();
    let kappa = euclidean_simplex_projection(&free);
    let terminal: Vec<f64> = feasible
        .kappa_past
        .iter()
        .zip(kappa.as_slice())
        .map(|(p, k)| w * p + (1.0 - w) * k)
        .collect();
    SimplexPoint::new(renormalize(terminal)).expect("affine mix of simplex points")
}

/// The free mix κ the projection chose (rather than the terminal
/// allocation): what the policy should sample at going forward.
pub fn project_free_mix(feasible: &FeasibleSet, target: &SimplexPoint) -> SimplexPoint {
    let w = feasible.w;
    if w >= 1.0 {
        return SimplexPoint::new(feasible.kappa_past.clone()).expect("logged allocation");
    }
    let free: Vec<f64> = target
        .as_slice()
        .iter()
        .zip(&feasible.kappa_past)
        .map(|(t, p)| (t - w * p) / (1.0 - w))
        .collect();
    euclidean_simplex_projection(&free)
}

/// Sort-and-threshold Euclidean projection onto the probability simplex.
pub fn euclidean_simplex_projection(v: &[f64]) -> SimplexPoint {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumulative = 0.0;
    let mut lambda = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (1.0 - cumulative) / (j + 1) as f64;
        if u + candidate > 0.0 {
            lambda = candidate;
        }
    }
    let projected: Vec<f64> = v.iter().map(|x| (x + lambda).max(0.0)).collect();
    SimplexPoint::new(renormalize(projected)).expect("thresholded point")
}

/// Scrubs floating-point drift so the entries pass simplex validation.
fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        for x in &mut v {
            *x /= sum;
        }
    }
    v
}

/// Largest-remainder apportionment of `n` queries to the fractional target:
/// floors first, then one extra query per largest remainder, ties resolving
/// to the lower-indexed source. The result is always within `1/n` of the
/// target in sup norm.
pub fn apportion(kappa: &SimplexPoint, n: usize) -> Vec<usize> {
    let d = kappa.len();
    let mut counts: Vec<usize> = (0..d).map(|i| (kappa[i] * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let ra = kappa[a] * n as f64 - counts[a] as f64;
        let rb = kappa[b] * n as f64 - counts[b] as f64;
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Budget bookkeeping for cost-structured horizons: what the remaining
/// spend can still buy and where the terminal allocation can land.
#[derive(Clone, Debug)]
pub struct CostFeasibleSet {
    pub budget_remaining: f64,
    pub kappa_past: Vec<f64>,
    pub t_past: usize,
    pub cost: Vec<f64>,
}

/// Builds the cost feasible set from the ledger so far.
pub fn cost_feasible_set(
    budget_spent: f64,
    budget_total: f64,
    kappa_past: &[f64],
    t_past: usize,
    cost: &[f64],
) -> Result<CostFeasibleSet> {
    if budget_spent > budget_total + 1e-9 {
        return Err(Error::Config(format!(
            "spent {budget_spent} exceeds total budget {budget_total}"
        )));
    }
    Ok(CostFeasibleSet {
        budget_remaining: budget_total - budget_spent,
        kappa_past: kappa_past.to_vec(),
        t_past,
        cost: cost.to_vec(),
    })
}

impl CostFeasibleSet {
    /// How many more queries the remaining budget affords at mix κ:
    /// `⌊B_rem / (κᵀc)⌋`.
    pub fn affordable_queries(&self, kappa: &SimplexPoint) -> usize {
        let per_query: f64 = kappa
            .as_slice()
            .iter()
            .zip(&self.cost)
            .map(|(k, c)| k * c)
            .sum();
        if per_query <= 0.0 {
            return 0;
        }
        (self.budget_remaining / per_query).floor() as usize
    }

    /// The terminal allocation if the rest of the budget is spent at mix κ.
    pub fn terminal_allocation(&self, kappa: &SimplexPoint) -> SimplexPoint {
        let extra = self.affordable_queries(kappa) as f64;
        let total = self.t_past as f64 + extra;
        if total == 0.0 {
            return kappa.clone();
        }
        let mix: Vec<f64> = self
            .kappa_past
            .iter()
            .zip(kappa.as_slice())
            .map(|(p, k)| (self.t_past as f64 * p + extra * k) / total)
            .collect();
        SimplexPoint::new(renormalize(mix)).expect("count-weighted mix")
    }
}

/// Squared Euclidean distance between two allocations, a convenience for
/// policies comparing candidate targets.
pub fn simplex_distance(a: &SimplexPoint, b: &SimplexPoint) -> f64 {
    DVector::from_column_slice(a.as_slice())
        .metric_distance(&DVector::from_column_slice(b.as_slice()))
}
