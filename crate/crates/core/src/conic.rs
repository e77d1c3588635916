//! Cone-native program representation and solve contract.
//!
//! A [`ConicProgram`] has scalar variables `0..num_vars`, a linear objective,
//! linear equalities and cone memberships over variable indices:
//!
//! - `Nonneg(ix)`: every listed variable is ≥ 0
//! - `Soc { t, x }`: t ≥ ‖x‖₂
//! - `Rsoc { u, v, x }`: 2uv ≥ ‖x‖², u, v ≥ 0
//! - `Psd { dim, entries }`: the symmetric matrix whose upper triangle is
//!   packed column by column ((0,0), (0,1), (1,1), (0,2), ...) is PSD;
//!   `None` entries are structural zeros
//!
//! Inequalities are written with explicit slack variables. [`solve`] hands
//! the program to the Clarabel interior-point backend.
//!
//! # Text dump
//!
//! [`ConicProgram::dump`] writes one statement per line:
//!
//! ```text
//! conic-program
//! sense minimize|maximize
//! vars <n>
//! objective-constant <c>
//! objective <i>:<coef> ...
//! eq <i>:<coef> ... = <rhs>
//! nonneg <i> ...
//! soc <t> ; <x> ...
//! rsoc <u> <v> ; <x> ...
//! psd <dim> ; <entry> ...        (entry is an index or `_`)
//! ```
//!
//! Numbers are printed in shortest round-trip form.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Sparse affine expression Σ coef·x[idx] + constant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn var(idx: usize, coef: f64) -> Self {
        LinExpr {
            terms: vec![(idx, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, idx: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((idx, coef));
        }
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        for &(i, c) in &other.terms {
            self.add_term(i, c * scale);
        }
        self.constant += other.constant * scale;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cone {
    Nonneg(Vec<usize>),
    Soc { t: usize, x: Vec<usize> },
    Rsoc { u: usize, v: usize, x: Vec<usize> },
    Psd { dim: usize, entries: Vec<Option<usize>> },
}

/// Position of (row, col) in the packed upper triangle.
pub fn psd_pack_index(row: usize, col: usize) -> usize {
    let (i, j) = if row <= col { (row, col) } else { (col, row) };
    j * (j + 1) / 2 + i
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    num_vars: usize,
    sense: Sense,
    objective: LinExpr,
    equalities: Vec<Equality>,
    cones: Vec<Cone>,
}

impl ConicProgram {
    pub fn new(sense: Sense) -> Self {
        ConicProgram {
            num_vars: 0,
            sense,
            objective: LinExpr::zero(),
            equalities: Vec::new(),
            cones: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn cones(&self) -> &[Cone] {
        &self.cones
    }

    pub fn add_var(&mut self) -> usize {
        self.num_vars += 1;
        self.num_vars - 1
    }

    pub fn add_vars(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.add_var()).collect()
    }

    pub fn add_nonneg_var(&mut self) -> usize {
        let v = self.add_var();
        self.add_cone(Cone::Nonneg(vec![v]));
        v
    }

    pub fn add_nonneg_vars(&mut self, n: usize) -> Vec<usize> {
        let v = self.add_vars(n);
        self.add_cone(Cone::Nonneg(v.clone()));
        v
    }

    pub fn add_objective_term(&mut self, idx: usize, coef: f64) {
        self.objective.add_term(idx, coef);
    }

    pub fn add_objective_expr(&mut self, e: &LinExpr, scale: f64) {
        self.objective.add_expr(e, scale);
    }

    pub fn add_objective_constant(&mut self, c: f64) {
        self.objective.constant += c;
    }

    /// Σ terms = rhs. Zero coefficients are dropped.
    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        let terms = terms.into_iter().filter(|&(_, c)| c != 0.0).collect();
        self.equalities.push(Equality { terms, rhs });
    }

    /// expr == 0.
    pub fn add_expr_equality(&mut self, e: &LinExpr) {
        self.add_equality(e.terms.clone(), -e.constant);
    }

    /// expr ≤ 0 via a fresh nonnegative slack; returns the slack index.
    pub fn add_expr_leq_zero(&mut self, e: &LinExpr) -> usize {
        let s = self.add_nonneg_var();
        let mut terms = e.terms.clone();
        terms.push((s, 1.0));
        self.add_equality(terms, -e.constant);
        s
    }

    /// Σ terms ≤ rhs; returns the slack index.
    pub fn add_leq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_expr_leq_zero(&LinExpr { terms, constant: -rhs })
    }

    pub fn add_cone(&mut self, c: Cone) {
        self.cones.push(c);
    }

    /// Fixes a variable to a constant.
    pub fn fix(&mut self, idx: usize, value: f64) {
        self.add_equality(vec![(idx, 1.0)], value);
    }

    /// Structural validation: indices in range, nonempty cones, PSD packing
    /// of the right length.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        let check = |i: usize, what: &str| -> Result<()> {
            if i < n {
                Ok(())
            } else {
                Err(Error::MalformedProgram(format!("{what} index {i} >= num_vars {n}")))
            }
        };
        for &(i, c) in &self.objective.terms {
            check(i, "objective")?;
            if !c.is_finite() {
                return Err(Error::MalformedProgram("non-finite objective coefficient".into()));
            }
        }
        if !self.objective.constant.is_finite() {
            return Err(Error::MalformedProgram("non-finite objective constant".into()));
        }
        for eq in &self.equalities {
            for &(i, c) in &eq.terms {
                check(i, "equality")?;
                if !c.is_finite() {
                    return Err(Error::MalformedProgram("non-finite equality coefficient".into()));
                }
            }
            if !eq.rhs.is_finite() {
                return Err(Error::MalformedProgram("non-finite equality rhs".into()));
            }
        }
        for cone in &self.cones {
            match cone {
                Cone::Nonneg(ix) => {
                    if ix.is_empty() {
                        return Err(Error::MalformedProgram("empty nonneg cone".into()));
                    }
                    for &i in ix {
                        check(i, "nonneg")?;
                    }
                }
                Cone::Soc { t, x } => {
                    check(*t, "soc")?;
                    for &i in x {
                        check(i, "soc")?;
                    }
                }
                Cone::Rsoc { u, v, x } => {
                    check(*u, "rsoc")?;
                    check(*v, "rsoc")?;
                    for &i in x {
                        check(i, "rsoc")?;
                    }
                }
                Cone::Psd { dim, entries } => {
                    if *dim == 0 || entries.len() != dim * (dim + 1) / 2 {
                        return Err(Error::MalformedProgram(format!(
                            "psd block of dim {dim} needs {} packed entries, got {}",
                            dim * (dim + 1) / 2,
                            entries.len()
                        )));
                    }
                    for i in entries.iter().flatten() {
                        check(*i, "psd")?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        let fmt_terms = |terms: &[(usize, f64)]| terms.iter().map(|(i, c)| format!("{i}:{c:?}")).collect::<Vec<_>>().join(" ");
        let join = |ix: &[usize]| ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(s, "conic-program").unwrap();
        let sense = match self.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        writeln!(s, "sense {sense}").unwrap();
        writeln!(s, "vars {}", self.num_vars).unwrap();
        writeln!(s, "objective-constant {:?}", self.objective.constant).unwrap();
        writeln!(s, "objective {}", fmt_terms(&self.objective.terms)).unwrap();
        for eq in &self.equalities {
            writeln!(s, "eq {} = {:?}", fmt_terms(&eq.terms), eq.rhs).unwrap();
        }
        for cone in &self.cones {
            match cone {
                Cone::Nonneg(ix) => writeln!(s, "nonneg {}", join(ix)),
                Cone::Soc { t, x } => writeln!(s, "soc {t} ; {}", join(x)),
                Cone::Rsoc { u, v, x } => writeln!(s, "rsoc {u} {v} ; {}", join(x)),
                Cone::Psd { dim, entries } => {
                    let e = entries
                        .iter()
                        .map(|e| e.map_or("_".to_string(), |i| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(" ");
                    writeln!(s, "psd {dim} ; {e}")
                }
            }
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Inaccurate,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    /// One multiplier per equality, signed so that the objective gradient
    /// equals Σ yₖ aₖ plus cone duals.
    pub dual_equalities: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: u32,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Solves `p` to relative tolerance `tol`. Infeasibility and unboundedness
/// are reported through the status; only malformed programs are errors.
pub fn solve(p: &ConicProgram, tol: f64) -> Result<SolveReport> {
    p.validate()?;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::OutOfRange {
            name: "tol",
            value: tol,
            range: "(0, 1)",
        });
    }
    let n = p.num_vars;
    let flip = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut q = vec![0.0; n];
    for &(i, c) in &p.objective.terms {
        q[i] += flip * c;
    }

    let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0usize;

    if !p.equalities.is_empty() {
        for eq in &p.equalities {
            for &(i, c) in &eq.terms {
                rows.push(row);
                cols.push(i);
                vals.push(c);
            }
            b.push(eq.rhs);
            row += 1;
        }
        cones.push(SupportedConeT::ZeroConeT(p.equalities.len()));
    }

    // Every cone reads s = b − A x with b = 0 and A = −(selector).
    let mut push_row = |entries: &[(usize, f64)], rows: &mut Vec<usize>, row: &mut usize| {
        for &(i, c) in entries {
            rows.push(*row);
            cols.push(i);
            vals.push(-c);
        }
        b.push(0.0);
        *row += 1;
    };
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for cone in &p.cones {
        match cone {
            Cone::Nonneg(ix) => {
                for &i in ix {
                    push_row(&[(i, 1.0)], &mut rows, &mut row);
                }
                cones.push(SupportedConeT::NonnegativeConeT(ix.len()));
            }
            Cone::Soc { t, x } => {
                push_row(&[(*t, 1.0)], &mut rows, &mut row);
                for &i in x {
                    push_row(&[(i, 1.0)], &mut rows, &mut row);
                }
                cones.push(SupportedConeT::SecondOrderConeT(1 + x.len()));
            }
            Cone::Rsoc { u, v, x } => {
                // 2uv ≥ ‖x‖² ⇔ ‖((u−v)/√2, x)‖ ≤ (u+v)/√2
                push_row(&[(*u, r2), (*v, r2)], &mut rows, &mut row);
                push_row(&[(*u, r2), (*v, -r2)], &mut rows, &mut row);
                for &i in x {
                    push_row(&[(i, 1.0)], &mut rows, &mut row);
                }
                cones.push(SupportedConeT::SecondOrderConeT(2 + x.len()));
            }
            Cone::Psd { dim, entries } => {
                // Clarabel packs the scaled upper triangle column-major,
                // off-diagonals multiplied by √2.
                for j in 0..*dim {
                    for i in 0..=j {
                        let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                        match entries[psd_pack_index(i, j)] {
                            Some(idx) => push_row(&[(idx, scale)], &mut rows, &mut row),
                            None => push_row(&[], &mut rows, &mut row),
                        }
                    }
                }
                cones.push(SupportedConeT::PSDTriangleConeT(*dim));
            }
        }
    }

    let a = CscMatrix::new_from_triplets(row, n, rows, cols, vals);
    let pmat = CscMatrix::zeros((n, n));
    let settings = DefaultSettingsBuilder::default()
        .verbose(log::log_enabled!(log::Level::Trace))
        .direct_solve_method("faer".into())
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .max_iter(300)
        .build()
        .map_err(|e| Error::MalformedProgram(format!("solver settings: {e:?}")))?;
    let mut solver =
        DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings).map_err(|e| Error::MalformedProgram(format!("{e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let info = &solver.info;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::Inaccurate,
    };
    let m_eq = p.equalities.len();
    let dual_equalities = sol.z[..m_eq].iter().map(|z| -flip * z).collect();
    let c0 = p.objective.constant;
    Ok(SolveReport {
        status,
        primal: sol.x.clone(),
        dual_equalities,
        objective: flip * sol.obj_val + c0,
        dual_objective: flip * sol.obj_val_dual + c0,
        primal_residual: info.res_primal,
        dual_residual: info.res_dual,
        gap: info.gap_rel,
        iterations: sol.iterations,
    })
}

/// Appends the perspective P_h(ζ, λ) of h(ζ) = χ_{‖ζ‖≤1} (p = 1) or
/// h(ζ) = ¼‖ζ‖² (p = 2).
///
/// For p = 1 this is the constraint ‖ζ‖ ≤ λ and contributes nothing to the
/// objective. For p = 2 it returns a fresh `t` with ‖ζ‖² ≤ 4tλ, i.e.
/// t ≥ ‖ζ‖²/(4λ); the caller adds `t` wherever P_h appears.
pub fn add_perspective_h(prog: &mut ConicProgram, zeta: &[usize], lambda: usize, p: u32) -> Result<Option<usize>> {
    match p {
        1 => {
            prog.add_cone(Cone::Soc {
                t: lambda,
                x: zeta.to_vec(),
            });
            Ok(None)
        }
        2 => {
            let t = prog.add_var();
            let w = prog.add_var();
            prog.add_equality(vec![(w, 1.0), (t, -2.0)], 0.0);
            prog.add_cone(Cone::Rsoc {
                u: w,
                v: lambda,
                x: zeta.to_vec(),
            });
            Ok(Some(t))
        }
        _ => Err(Error::Unsupported(format!("perspective of h for p = {p}"))),
    }
}

/// The sample space 𝒵.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    FullSpace,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            Domain::FullSpace => Ok(()),
            Domain::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: lower.len().min(upper.len()),
                    });
                }
                if lower
                    .iter()
                    .zip(upper)
                    .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
                {
                    return Err(Error::Invalid("box bounds must be finite with lower <= upper".into()));
                }
                Ok(())
            }
            Domain::Ball { center, radius } => {
                if center.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: center.len(),
                    });
                }
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::Invalid("ball radius must be finite and >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        match self {
            Domain::FullSpace => true,
            Domain::Box { lower, upper } => z
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
            Domain::Ball { center, radius } => {
                let d: f64 = z.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d.sqrt() <= radius + tol
            }
        }
    }
}

/// Appends the support function χ*_𝒵(ζ) = sup_{z∈𝒵} ζᵀz and returns it as
/// an expression to be placed where it appears.
///
/// Full space forces ζ = 0. A box contributes Σ max(l_k ζ_k, u_k ζ_k) via a
/// nonnegative split ζ = ζ⁺ − ζ⁻. A ball contributes cᵀζ + r‖ζ‖ through an
/// epigraph variable.
pub fn add_support_fn_term(prog: &mut ConicProgram, zeta: &[usize], domain: &Domain) -> Result<LinExpr> {
    domain.check_dim(zeta.len())?;
    let mut expr = LinExpr::zero();
    match domain {
        Domain::FullSpace => {
            for &z in zeta {
                prog.fix(z, 0.0);
            }
        }
        Domain::Box { lower, upper } => {
            for (k, &z) in zeta.iter().enumerate() {
                let plus = prog.add_nonneg_var();
                let minus = prog.add_nonneg_var();
                prog.add_equality(vec![(z, 1.0), (plus, -1.0), (minus, 1.0)], 0.0);
                expr.add_term(plus, upper[k]);
                expr.add_term(minus, -lower[k]);
            }
        }
        Domain::Ball { center, radius } => {
            let e = prog.add_var();
            prog.add_cone(Cone::Soc { t: e, x: zeta.to_vec() });
            for (k, &z) in zeta.iter().enumerate() {
                expr.add_term(z, center[k]);
            }
            expr.add_term(e, *radius);
        }
    }
    Ok(expr)
}

/// Constrains ξ ∈ q·𝒵 (the homogenized domain, q ≥ 0 assumed).
pub fn add_homogenized_domain(prog: &mut ConicProgram, xi: &[usize], q: usize, domain: &Domain) -> Result<()> {
    domain.check_dim(xi.len())?;
    match domain {
        Domain::FullSpace => {}
        Domain::Box { lower, upper } => {
            for (k, &x) in xi.iter().enumerate() {
                prog.add_leq(vec![(x, 1.0), (q, -upper[k])], 0.0);
                prog.add_leq(vec![(x, -1.0), (q, lower[k])], 0.0);
            }
        }
        Domain::Ball { center, radius } => {
            let w = prog.add_var();
            prog.add_equality(vec![(w, 1.0), (q, -radius)], 0.0);
            let ys = prog.add_vars(xi.len());
            for (k, (&x, &y)) in xi.iter().zip(&ys).enumerate() {
                prog.add_equality(vec![(y, 1.0), (x, -1.0), (q, center[k])], 0.0);
            }
            prog.add_cone(Cone::Soc { t: w, x: ys });
        }
    }
    Ok(())
}
