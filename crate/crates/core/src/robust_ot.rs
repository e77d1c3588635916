//! Classical and outlier-robust Wasserstein distances between discrete
//! measures, resilience bounds and 1-D quantile trimming.
//!
//! Every distance is one transport LP solved through [`crate::conic`]. The
//! robust variants trim mass inside the LP: the two-sided form transports
//! 1 − ε of the mass with row and column caps, the one-sided form inflates
//! the row caps by 1/(1 − ε) and transports all of ν.

use nalgebra::DMatrix;

use crate::conic::{self, ConicProgram, Sense, SolveStatus};
use crate::error::{check_range, Error, Result};
use crate::measures::{check_dim, DiscreteMeasure, GroundCost, Order};
use crate::par::{self, Execution};

/// Mass-constraint tolerance for plan invariants.
pub const MASS_TOL: f64 = 1e-9;

const LP_TOL: f64 = 1e-10;
const LP_TOL_RETRY: f64 = 1e-8;

/// A (possibly partial) transport plan and its cost Σ πᵢⱼ cᵢⱼ.
#[derive(Debug, Clone)]
pub struct PartialPlan {
    pub masses: DMatrix<f64>,
    pub total: f64,
    pub cost: f64,
}

enum Columns<'a> {
    Capped(&'a [f64]),
    Exact(&'a [f64]),
}

fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &GroundCost) -> Result<Vec<Vec<Option<f64>>>> {
    check_dim(mu.dim(), nu.dim())?;
    check_dim(mu.dim(), cost.mask.dim())?;
    Ok(mu
        .support()
        .iter()
        .map(|a| nu.support().iter().map(|b| cost.cost(a.coords(), b.coords())).collect())
        .collect())
}

fn transport_lp(costs: &[Vec<Option<f64>>], row_caps: &[f64], cols: Columns, total: f64) -> Result<PartialPlan> {
    let n = row_caps.len();
    let m = costs.first().map_or(0, |r| r.len());
    let mut prog = ConicProgram::new(Sense::Minimize);
    let mut vars = Vec::new();
    for (i, row) in costs.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if let Some(c) = c {
                let v = prog.add_var();
                prog.add_objective_term(v, *c);
                vars.push((i, j, v));
            }
        }
    }
    if vars.is_empty() {
        return Err(Error::InfeasibleTransport);
    }
    prog.add_cone(conic::Cone::Nonneg(vars.iter().map(|t| t.2).collect()));
    let mut by_row = vec![Vec::new(); n];
    let mut by_col = vec![Vec::new(); m];
    for &(i, j, v) in &vars {
        by_row[i].push((v, 1.0));
        by_col[j].push((v, 1.0));
    }
    for (i, terms) in by_row.into_iter().enumerate() {
        if !terms.is_empty() {
            prog.add_leq(terms, row_caps[i]);
        }
    }
    match cols {
        Columns::Capped(caps) => {
            for (j, terms) in by_col.into_iter().enumerate() {
                if !terms.is_empty() {
                    prog.add_leq(terms, caps[j]);
                }
            }
        }
        Columns::Exact(w) => {
            for (j, terms) in by_col.into_iter().enumerate() {
                if terms.is_empty() {
                    if w[j] > 0.0 {
                        return Err(Error::InfeasibleTransport);
                    }
                    continue;
                }
                prog.add_equality(terms, w[j]);
            }
        }
    }
    prog.add_equality(vars.iter().map(|t| (t.2, 1.0)).collect(), total);

    let mut report = conic::solve(&prog, LP_TOL)?;
    if report.status == SolveStatus::Inaccurate {
        report = conic::solve(&prog, LP_TOL_RETRY)?;
    }
    match report.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(Error::InfeasibleTransport),
        status => {
            return Err(Error::Solve {
                status,
                diagnostic: "transport LP".into(),
            })
        }
    }
    let mut masses = DMatrix::zeros(n, m);
    for &(i, j, v) in &vars {
        masses[(i, j)] = report.primal[v].max(0.0);
    }
    Ok(PartialPlan {
        masses,
        total,
        cost: report.objective.max(0.0),
    })
}

fn check_eps(eps: f64) -> Result<()> {
    check_range("eps", eps, (0.0..1.0).contains(&eps), "[0, 1)")
}

/// Optimal plan for W_p via the LP.
pub fn wasserstein_plan(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &GroundCost) -> Result<PartialPlan> {
    let c = cost_matrix(mu, nu, cost)?;
    transport_lp(&c, mu.weights(), Columns::Exact(nu.weights()), 1.0)
}

/// W_p through the transport LP, with no fast path.
pub fn wasserstein_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &GroundCost) -> Result<f64> {
    Ok(cost.p.root(wasserstein_plan(mu, nu, cost)?.cost))
}

/// W_p between discrete measures. One-dimensional fully transported inputs
/// use sorted quantile matching; everything else goes through the LP.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &GroundCost) -> Result<f64> {
    check_dim(mu.dim(), nu.dim())?;
    check_dim(mu.dim(), cost.mask.dim())?;
    if mu.dim() == 1 {
        return wasserstein_1d(mu, nu, cost.p);
    }
    wasserstein_lp(mu, nu, cost)
}

/// W_p on ℝ via the quantile coupling F_μ⁻¹(U), F_ν⁻¹(U).
pub fn wasserstein_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: Order) -> Result<f64> {
    check_dim(1, mu.dim())?;
    check_dim(1, nu.dim())?;
    let a = sorted_1d(mu);
    let b = sorted_1d(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    loop {
        let step = ra.min(rb);
        total += step * p.pow((a[i].0 - b[j].0).abs());
        ra -= step;
        rb -= step;
        if ra <= 0.0 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 0.0 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(p.root(total))
}

fn sorted_1d(m: &DiscreteMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = m.atoms().map(|(z, w)| (z[0], w)).collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    v
}

/// Two-sided partial plan: row sums ≤ μ, column sums ≤ ν, total 1 − ε.
pub fn rwp_two_sided_plan(mu: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64, cost: &GroundCost) -> Result<PartialPlan> {
    check_eps(eps)?;
    let c = cost_matrix(mu, nu, cost)?;
    transport_lp(&c, mu.weights(), Columns::Capped(nu.weights()), 1.0 - eps)
}

/// RW_p(μ, ν) at contamination level ε.
pub fn rwp_two_sided(mu: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64, cost: &GroundCost) -> Result<f64> {
    Ok(cost.p.root(rwp_two_sided_plan(mu, nu, eps, cost)?.cost))
}

/// One-sided plan: row sums ≤ μ̃/(1 − ε), column sums = ν.
pub fn rwp_one_sided_plan(mu_tilde: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64, cost: &GroundCost) -> Result<PartialPlan> {
    check_eps(eps)?;
    let c = cost_matrix(mu_tilde, nu, cost)?;
    let caps: Vec<f64> = mu_tilde.weights().iter().map(|w| w / (1.0 - eps)).collect();
    transport_lp(&c, &caps, Columns::Exact(nu.weights()), 1.0)
}

/// RW_p(μ̃ ‖ ν): only μ̃ may shed mass.
pub fn rwp_one_sided(mu_tilde: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64, cost: &GroundCost) -> Result<f64> {
    Ok(cost.p.root(rwp_one_sided_plan(mu_tilde, nu, eps, cost)?.cost))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResilienceClass {
    /// Second moment about some center at most σ².
    G2 { sigma: f64 },
    /// Centered second-moment matrix capped by σ²I in dimension `dim`.
    Gcov { sigma: f64, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResilienceQuery {
    pub class: ResilienceClass,
    pub eps: f64,
    /// Order in [1, 2].
    pub p: f64,
}

/// Upper bound on τ_p(𝒢, ε): 4σ ε^{1/p − 1/2} (1 − ε)^{−1/p}, with σ ← √d σ
/// for the covariance class. Returns 0 at ε = 0, where nothing is removed.
pub fn resilience_bound(q: ResilienceQuery) -> Result<f64> {
    check_eps(q.eps)?;
    check_range("p", q.p, (1.0..=2.0).contains(&q.p), "[1, 2]")?;
    let sigma = match q.class {
        ResilienceClass::G2 { sigma } => sigma,
        ResilienceClass::Gcov { sigma, dim } => {
            if dim == 0 {
                return Err(Error::Invalid("covariance class needs dim >= 1".into()));
            }
            (dim as f64).sqrt() * sigma
        }
    };
    check_range("sigma", sigma, sigma >= 0.0, "[0, inf)")?;
    if q.eps == 0.0 {
        return Ok(0.0);
    }
    let inv_p = 1.0 / q.p;
    Ok(4.0 * sigma * q.eps.powf(inv_p - 0.5) * (1.0 - q.eps).powf(-inv_p))
}

/// Largest support size accepted by [`empirical_resilience`].
pub const EXHAUSTIVE_RESILIENCE_MAX: usize = 8;

/// τ_p(ν, ε) = sup over ν′ ≤ ν/(1 − ε) of W_p(ν′, ν) for a discrete ν with
/// at most eight atoms.
///
/// W_p^p(·, ν) is convex, so the sup is attained at a vertex of the capped
/// simplex: some atoms at their cap ν_i/(1 − ε), at most one fractional, the
/// rest removed. All such vertices are enumerated.
pub fn empirical_resilience(nu: &DiscreteMeasure, eps: f64, cost: &GroundCost, exec: Execution) -> Result<f64> {
    check_eps(eps)?;
    let n = nu.len();
    if n > EXHAUSTIVE_RESILIENCE_MAX {
        return Err(Error::Unsupported(format!(
            "exhaustive resilience for {n} atoms (max {EXHAUSTIVE_RESILIENCE_MAX})"
        )));
    }
    if eps == 0.0 {
        return Ok(0.0);
    }
    let caps: Vec<f64> = nu.weights().iter().map(|w| w / (1.0 - eps)).collect();
    let mut vertices = Vec::new();
    for set in 0u32..(1 << n) {
        let mass: f64 = (0..n).filter(|i| set >> i & 1 == 1).map(|i| caps[i]).sum();
        if mass > 1.0 + MASS_TOL {
            continue;
        }
        let rest = (1.0 - mass).max(0.0);
        if rest <= MASS_TOL {
            vertices.push((set, None));
            continue;
        }
        for f in (0..n).filter(|i| set >> i & 1 == 0) {
            if rest <= caps[f] + MASS_TOL {
                vertices.push((set, Some((f, rest))));
            }
        }
    }
    let values = par::map(exec, vertices, |(set, frac)| -> Result<f64> {
        let mut w: Vec<f64> = (0..n).map(|i| if set >> i & 1 == 1 { caps[i] } else { 0.0 }).collect();
        if let Some((f, r)) = frac {
            w[f] = r;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
        let sub = DiscreteMeasure::new(
            keep.iter().map(|&i| nu.support()[i].clone()).collect(),
            keep.iter().map(|&i| w[i]).collect(),
        )?;
        wasserstein(&sub, nu, cost)
    });
    let mut best: f64 = 0.0;
    for v in values {
        best = best.max(v?);
    }
    Ok(best)
}

/// The γ-trimming of a 1-D measure: the law of F⁻¹(U) conditioned on
/// U ∈ [γ, 1 − γ]. Atoms are returned in sorted order.
pub fn gamma_trim_1d(m: &DiscreteMeasure, gamma: f64) -> Result<DiscreteMeasure> {
    check_dim(1, m.dim())?;
    check_range("gamma", gamma, (0.0..0.5).contains(&gamma), "[0, 1/2)")?;
    if gamma == 0.0 {
        return Ok(m.clone());
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m.support()[a][0].total_cmp(&m.support()[b][0]));
    let (lo, hi) = (gamma, 1.0 - gamma);
    let mut support = Vec::new();
    let mut weights = Vec::new();
    let mut cum = 0.0;
    for i in order {
        let w = m.weights()[i];
        let overlap = (cum + w).min(hi) - cum.max(lo);
        cum += w;
        // Rounding in the running sum leaves slivers at the cut points.
        if overlap > 1e-12 {
            support.push(m.support()[i].clone());
            weights.push(overlap);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    DiscreteMeasure::new(support, weights)
}

/// Mean of the γ-trimmed 1-D measure.
pub fn trimmed_mean_1d(m: &DiscreteMeasure, gamma: f64) -> Result<f64> {
    Ok(gamma_trim_1d(m, gamma)?.mean()[0])
}
