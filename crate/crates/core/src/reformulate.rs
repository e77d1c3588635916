//! Conic programs for the inner worst case
//! sup { E_ν[ℓ] : ν in the moment class, RW_p(μ̃ ‖ ν) ≤ ρ },
//! joint minimization over θ, worst-case extraction and excess-risk bounds.
//!
//! The inner dual has one block per (sample i, piece j). With affine pieces
//! ℓ_j(ξ) = a_ijᵀξ + b_ij the conjugate (−ℓ_j)* forces ζ^ℓ = −a_ij and
//! contributes b_ij, so each block reads
//!
//! ```text
//! s_i ≥ b_ij + z₀ᵀζ^G + τ_ij + Z̃_iᵀζ^W + P_h(ζ^W, λ₂) + χ*_𝒵(ζ^𝒵) − α
//! ζ^G + ζ^W + ζ^𝒵 = a_ij            (+ 2Λ₁z₀ for the covariance class)
//! ‖ζ^G‖² ≤ 4λ₁τ_ij                  ([[Λ₁, ζ^G], [ζ^Gᵀ, 4τ_ij]] ⪰ 0)
//! ```
//!
//! and the objective is λ₁σ² + λ₂ρᵖ + α + Σ w_i s_i / (1 − ε), with
//! −z₀ᵀΛ₁z₀ + σ²Tr Λ₁ replacing λ₁σ² for the covariance class.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conic::{
    self, add_homogenized_domain, add_perspective_h, add_support_fn_term, psd_pack_index, Cone, ConicProgram, Domain, LinExpr,
    Sense, SolveReport, SolveStatus,
};
use crate::error::{check_range, Error, Result};
use crate::losses::{LossFamily, SeminormReport, ThetaAffinePiece};
use crate::measures::{check_dim, norm, sq_dist, DiscreteMeasure, Order, Point, TransportMask};
use crate::robust_ot::{resilience_bound, ResilienceClass, ResilienceQuery};

/// Smallest radius used when ρ = 0 is requested.
pub const MIN_RHO: f64 = 1e-9;
/// Atoms with q ≤ this fraction of max q are dropped from ν⋆.
pub const Q_THRESHOLD: f64 = 1e-10;

/// For p = 1, σ ≥ this factor times (1 + ρ + max_i‖Z̃_i − z₀‖) is treated
/// as infinite. The value changes by O(((ρ + D)/σ)²) while the cone
/// program becomes too badly scaled to solve.
pub const SIGMA_INACTIVE_FACTOR: f64 = 1e3;

const SOLVE_TOL: f64 = 1e-8;
const SOLVE_TOL_RETRY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentFamily {
    /// E‖Z − z₀‖² ≤ σ².
    G2,
    /// E[(Z − z₀)(Z − z₀)ᵀ] ⪯ σ²I on the transported block.
    Gcov,
}

/// The ambiguity set. `sigma = f64::INFINITY` drops the moment constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguitySpec {
    pub p: Order,
    pub eps: f64,
    pub rho: f64,
    pub family: MomentFamily,
    pub sigma: f64,
    /// Center of the moment class, full sample dimension. May be empty when
    /// σ is infinite.
    pub z0: Vec<f64>,
    /// Sample space of the transported block.
    pub domain: Domain,
}

impl AmbiguitySpec {
    pub fn new(p: Order, eps: f64, rho: f64, family: MomentFamily, sigma: f64, z0: Vec<f64>) -> Self {
        AmbiguitySpec {
            p,
            eps,
            rho,
            family,
            sigma,
            z0,
            domain: Domain::FullSpace,
        }
    }

    /// Classical WDRO: ε = 0 and no moment constraint.
    pub fn classical(p: Order, rho: f64) -> Self {
        Self::new(p, 0.0, rho, MomentFamily::G2, f64::INFINITY, Vec::new())
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn sigma_is_infinite(&self) -> bool {
        self.sigma == f64::INFINITY
    }

    fn validated(&self, mask: &TransportMask) -> Result<AmbiguitySpec> {
        check_range("eps", self.eps, (0.0..1.0).contains(&self.eps), "[0, 1)")?;
        if self.rho.is_nan() || self.rho < 0.0 || self.rho.is_infinite() {
            return Err(Error::OutOfRange {
                name: "rho",
                value: self.rho,
                range: "[0, inf)",
            });
        }
        if !(self.sigma > 0.0) {
            return Err(Error::OutOfRange {
                name: "sigma",
                value: self.sigma,
                range: "(0, inf]",
            });
        }
        if !self.sigma_is_infinite() {
            check_dim(mask.dim(), self.z0.len())?;
            if self.z0.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("z0"));
            }
        }
        self.domain.check_dim(mask.num_transported())?;
        let mut s = self.clone();
        if s.rho < MIN_RHO {
            log::warn!("rho = {} bumped to {MIN_RHO}: strong duality needs a positive radius", s.rho);
            s.rho = MIN_RHO;
        }
        Ok(s)
    }
}

/// Per-sample piece coefficients (a_ij over the transported block, b_ij).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePieces {
    pub mask: TransportMask,
    pub per_sample: Vec<Vec<(Vec<f64>, f64)>>,
}

impl SamplePieces {
    pub fn new(mask: TransportMask, per_sample: Vec<Vec<(Vec<f64>, f64)>>) -> Result<Self> {
        let dt = mask.num_transported();
        for pieces in &per_sample {
            if pieces.is_empty() {
                return Err(Error::Empty("pieces for a sample"));
            }
            for (a, b) in pieces {
                check_dim(dt, a.len())?;
                if a.iter().any(|x| !x.is_finite()) || !b.is_finite() {
                    return Err(Error::NonFinite("loss piece"));
                }
            }
        }
        Ok(SamplePieces { mask, per_sample })
    }

    /// The same pieces for every sample (losses that ignore the pinned block).
    pub fn uniform(mask: TransportMask, pieces: Vec<(Vec<f64>, f64)>, n: usize) -> Result<Self> {
        Self::new(mask, vec![pieces; n])
    }

    pub fn from_family(family: &LossFamily, theta: &[f64], data: &DiscreteMeasure) -> Result<Self> {
        check_dim(family.dim(), data.dim())?;
        let per_sample = data
            .support()
            .iter()
            .map(|z| {
                let (_, zf) = family.mask.split(z.coords());
                family.pieces_at(theta, &zf)
            })
            .collect::<Result<_>>()?;
        Self::new(family.mask.clone(), per_sample)
    }

    /// max_ij ‖a_ij‖.
    pub fn lipschitz(&self) -> f64 {
        self.per_sample.iter().flatten().map(|(a, _)| norm(a)).fold(0.0, f64::max)
    }
}

struct Prepared {
    w: Vec<f64>,
    zt: Vec<Vec<f64>>,
    zf: Vec<Vec<f64>>,
    dt: usize,
}

impl Prepared {
    fn new(data: &DiscreteMeasure, mask: &TransportMask) -> Result<Self> {
        check_dim(mask.dim(), data.dim())?;
        let (zt, zf) = data.support().iter().map(|z| mask.split(z.coords())).unzip();
        Ok(Prepared {
            w: data.weights().to_vec(),
            zt,
            zf,
            dt: mask.num_transported(),
        })
    }

    fn n(&self) -> usize {
        self.w.len()
    }
}

/// Where the piece coefficients come from: fixed numbers or affine
/// expressions in θ variables.
enum Coeffs<'a> {
    Fixed(&'a SamplePieces),
    Theta {
        vars: Vec<usize>,
        per_sample: Vec<Vec<ThetaAffinePiece>>,
    },
}

impl Coeffs<'_> {
    fn num_pieces(&self, i: usize) -> usize {
        match self {
            Coeffs::Fixed(p) => p.per_sample[i].len(),
            Coeffs::Theta { per_sample, .. } => per_sample[i].len(),
        }
    }

    fn get(&self, i: usize, j: usize) -> (Vec<LinExpr>, LinExpr) {
        match self {
            Coeffs::Fixed(p) => {
                let (a, b) = &p.per_sample[i][j];
                let a = a
                    .iter()
                    .map(|&c| LinExpr {
                        terms: Vec::new(),
                        constant: c,
                    })
                    .collect();
                (
                    a,
                    LinExpr {
                        terms: Vec::new(),
                        constant: *b,
                    },
                )
            }
            Coeffs::Theta { vars, per_sample } => {
                let piece = &per_sample[i][j];
                let a = (0..piece.slope0.len())
                    .map(|k| {
                        let mut e = LinExpr {
                            terms: Vec::new(),
                            constant: piece.slope0[k],
                        };
                        for (t, &v) in vars.iter().enumerate() {
                            e.add_term(v, piece.slope[(k, t)]);
                        }
                        e
                    })
                    .collect();
                let mut b = LinExpr {
                    terms: Vec::new(),
                    constant: piece.offset0,
                };
                for (t, &v) in vars.iter().enumerate() {
                    b.add_term(v, piece.offset[t]);
                }
                (a, b)
            }
        }
    }
}

/// Variable indices of one (i, j) block.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub i: usize,
    pub j: usize,
    /// τ_ij, or the Schur corner 4τ_ij for the covariance class.
    pub tau: Option<usize>,
    pub zeta_g: Vec<usize>,
    pub zeta_w: Vec<usize>,
    pub zeta_z: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DualLayout {
    pub lambda1: Option<usize>,
    /// Packed upper triangle of Λ₁.
    pub lambda_matrix: Option<Vec<usize>>,
    pub lambda2: usize,
    pub alpha: usize,
    pub s: Vec<usize>,
    pub theta: Vec<usize>,
    pub blocks: Vec<BlockLayout>,
    family: MomentFamily,
    dt: usize,
}

/// A built inner dual, ready for [`conic::solve`].
#[derive(Debug, Clone)]
pub struct DualProgram {
    pub program: ConicProgram,
    pub layout: DualLayout,
}

/// Per-block dual values.
#[derive(Debug, Clone)]
pub struct DualBlock {
    pub i: usize,
    pub j: usize,
    pub tau: f64,
    pub zeta_l: Vec<f64>,
    pub zeta_g: Vec<f64>,
    pub zeta_w: Vec<f64>,
    pub zeta_z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub value: f64,
    pub lambda1: Option<f64>,
    pub lambda_matrix: Option<DMatrix<f64>>,
    pub lambda2: f64,
    pub alpha: f64,
    pub s: Vec<f64>,
    pub theta: Vec<f64>,
    pub blocks: Vec<DualBlock>,
    pub report: SolveReport,
}

fn build_dual(
    prep: &Prepared,
    spec: &AmbiguitySpec,
    coeffs: &Coeffs,
    mut prog: ConicProgram,
    theta: Vec<usize>,
) -> Result<DualProgram> {
    let dt = prep.dt;
    let n = prep.n();
    let moment = !spec.sigma_is_infinite();
    let (z0t, z0f) = if moment {
        split_by_flags(&spec.z0, prep)
    } else {
        (Vec::new(), Vec::new())
    };
    let p = match spec.p {
        Order::One => 1,
        Order::Two => 2,
    };

    let lambda2 = prog.add_nonneg_var();
    let alpha = prog.add_var();
    let s = prog.add_nonneg_vars(n);
    prog.add_objective_term(lambda2, spec.p.pow(spec.rho));
    prog.add_objective_term(alpha, 1.0);
    for (i, &si) in s.iter().enumerate() {
        prog.add_objective_term(si, prep.w[i] / (1.0 - spec.eps));
    }

    let mut lambda1 = None;
    let mut two_lambda1 = None;
    let mut lambda_matrix = None;
    if moment {
        match spec.family {
            MomentFamily::G2 => {
                let l1 = prog.add_nonneg_var();
                prog.add_objective_term(l1, spec.sigma * spec.sigma);
                let h = prog.add_var();
                prog.add_equality(vec![(h, 1.0), (l1, -2.0)], 0.0);
                lambda1 = Some(l1);
                two_lambda1 = Some(h);
            }
            MomentFamily::Gcov => {
                let lam = prog.add_vars(dt * (dt + 1) / 2);
                for c in 0..dt {
                    for r in 0..=c {
                        let v = lam[psd_pack_index(r, c)];
                        let coef = if r == c {
                            spec.sigma * spec.sigma - z0t[r] * z0t[r]
                        } else {
                            -2.0 * z0t[r] * z0t[c]
                        };
                        prog.add_objective_term(v, coef);
                    }
                }
                lambda_matrix = Some(lam);
            }
        }
    }

    let mut blocks = Vec::new();
    let mut schur = Vec::new();
    for i in 0..n {
        let c_i = if moment && spec.family == MomentFamily::G2 {
            sq_dist(&prep.zf[i], &z0f)
        } else {
            0.0
        };
        for j in 0..coeffs.num_pieces(i) {
            let (a, b) = coeffs.get(i, j);
            let mut rhs = b;
            rhs.add_term(alpha, -1.0);
            rhs.add_term(s[i], -1.0);

            let zeta_w = prog.add_vars(dt);
            for (k, &v) in zeta_w.iter().enumerate() {
                rhs.add_term(v, prep.zt[i][k]);
            }
            if let Some(t) = add_perspective_h(&mut prog, &zeta_w, lambda2, p)? {
                rhs.add_term(t, 1.0);
            }

            let zeta_z = match spec.domain {
                Domain::FullSpace => Vec::new(),
                _ => {
                    let zz = prog.add_vars(dt);
                    let e = add_support_fn_term(&mut prog, &zz, &spec.domain)?;
                    rhs.add_expr(&e, 1.0);
                    zz
                }
            };

            let (mut tau, mut zeta_g) = (None, Vec::new());
            if moment {
                zeta_g = prog.add_vars(dt);
                match spec.family {
                    MomentFamily::G2 => {
                        let t = prog.add_var();
                        prog.add_cone(Cone::Rsoc {
                            u: t,
                            v: two_lambda1.unwrap(),
                            x: zeta_g.clone(),
                        });
                        rhs.add_term(t, 1.0);
                        for (k, &v) in zeta_g.iter().enumerate() {
                            rhs.add_term(v, z0t[k]);
                        }
                        if c_i != 0.0 {
                            rhs.add_term(lambda1.unwrap(), c_i);
                        }
                        tau = Some(t);
                    }
                    MomentFamily::Gcov => {
                        let corner = prog.add_var();
                        schur.push((zeta_g.clone(), corner));
                        rhs.add_term(corner, 0.25);
                        tau = Some(corner);
                    }
                }
            }
            prog.add_expr_leq_zero(&rhs);

            // ζ^G + ζ^W + ζ^𝒵 − a_ij (− 2Λ₁z₀) = 0, coordinate by coordinate.
            for k in 0..dt {
                let mut e = LinExpr::zero();
                e.add_term(zeta_w[k], 1.0);
                if !zeta_g.is_empty() {
                    e.add_term(zeta_g[k], 1.0);
                }
                if !zeta_z.is_empty() {
                    e.add_term(zeta_z[k], 1.0);
                }
                e.add_expr(&a[k], -1.0);
                if let (Some(lam), MomentFamily::Gcov) = (&lambda_matrix, spec.family) {
                    for l in 0..dt {
                        e.add_term(lam[psd_pack_index(k, l)], -2.0 * z0t[l]);
                    }
                }
                prog.add_expr_equality(&e);
            }

            blocks.push(BlockLayout {
                i,
                j,
                tau,
                zeta_g,
                zeta_w,
                zeta_z,
            });
        }
    }
    if let Some(lam) = &lambda_matrix {
        add_schur_cones(&mut prog, lam, &schur, dt);
    }
    prog.validate()?;
    Ok(DualProgram {
        program: prog,
        layout: DualLayout {
            lambda1,
            lambda_matrix,
            lambda2,
            alpha,
            s,
            theta,
            blocks,
            family: spec.family,
            dt,
        },
    })
}

/// Imposes [[Λ, ζ_b], [ζ_bᵀ, c_b]] ⪰ 0 for every block b.
///
/// With K blocks this is either K cones of size dt + 1 sharing Λ, or one cone
/// [[Λ, Z], [Zᵀ, W]] of size dt + K with diag(W) = c and free off-diagonal
/// W. The two are equivalent (take W = ZᵀΛ⁺Z + diag(c − diag ZᵀΛ⁺Z)).
///
/// Once a small cone has more entries than 2K, the ordering eliminates the
/// shared Λ entries first and the KKT factor fills in across all K cones, so
/// the stacked cone is used instead.
fn add_schur_cones(prog: &mut ConicProgram, lam: &[usize], schur: &[(Vec<usize>, usize)], dt: usize) {
    let k = schur.len();
    if (dt + 1) * (dt + 2) / 2 <= 2 * k {
        let m = dt + 1;
        for (zeta, corner) in schur {
            let mut entries = vec![None; m * (m + 1) / 2];
            for c in 0..dt {
                for r in 0..=c {
                    entries[psd_pack_index(r, c)] = Some(lam[psd_pack_index(r, c)]);
                }
                entries[psd_pack_index(c, dt)] = Some(zeta[c]);
            }
            entries[psd_pack_index(dt, dt)] = Some(*corner);
            prog.add_cone(Cone::Psd { dim: m, entries });
        }
        return;
    }
    let m = dt + k;
    let mut entries = vec![None; m * (m + 1) / 2];
    for c in 0..dt {
        for r in 0..=c {
            entries[psd_pack_index(r, c)] = Some(lam[psd_pack_index(r, c)]);
        }
    }
    for (b, (zeta, corner)) in schur.iter().enumerate() {
        let col = dt + b;
        for r in 0..dt {
            entries[psd_pack_index(r, col)] = Some(zeta[r]);
        }
        for b2 in 0..b {
            entries[psd_pack_index(dt + b2, col)] = Some(prog.add_var());
        }
        entries[psd_pack_index(col, col)] = Some(*corner);
    }
    prog.add_cone(Cone::Psd { dim: m, entries });
}

/// Splits a canonical (transported-first) vector into its two blocks.
fn split_by_flags(z0: &[f64], prep: &Prepared) -> (Vec<f64>, Vec<f64>) {
    (z0[..prep.dt].to_vec(), z0[prep.dt..].to_vec())
}

/// Drops a moment constraint that cannot change the value. For p = 2 every
/// feasible ν has E‖ξ − z₀‖² ≤ 2ρ² + 2D², so larger σ² is exactly inactive.
fn drop_inactive_moment(mut spec: AmbiguitySpec, data: &DiscreteMeasure) -> AmbiguitySpec {
    if spec.sigma_is_infinite() {
        return spec;
    }
    let d = data
        .support()
        .iter()
        .map(|z| sq_dist(z.coords(), &spec.z0).sqrt())
        .fold(0.0, f64::max);
    let inactive = match spec.p {
        Order::Two => spec.sigma * spec.sigma >= 2.0 * (spec.rho * spec.rho + d * d),
        Order::One => spec.sigma >= SIGMA_INACTIVE_FACTOR * (1.0 + spec.rho + d),
    };
    if inactive {
        log::debug!(
            "sigma = {} is inactive for this sample, dropping the moment constraint",
            spec.sigma
        );
        spec.sigma = f64::INFINITY;
    }
    spec
}

fn check_pieces(pieces: &SamplePieces, data: &DiscreteMeasure) -> Result<()> {
    check_dim(data.len(), pieces.per_sample.len())?;
    check_dim(pieces.mask.dim(), data.dim())
}

/// Reorders a full-dimension vector so transported coordinates come first.
/// The builders work in that order.
fn canonical_z0(spec: &AmbiguitySpec, mask: &TransportMask) -> AmbiguitySpec {
    let mut s = spec.clone();
    if !spec.sigma_is_infinite() {
        let (t, f) = mask.split(&spec.z0);
        s.z0 = t.into_iter().chain(f).collect();
    }
    s
}

/// Builds the inner dual for either moment family.
pub fn build_inner_dual(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<DualProgram> {
    check_pieces(pieces, data)?;
    let spec = canonical_z0(&drop_inactive_moment(spec.validated(&pieces.mask)?, data), &pieces.mask);
    let prep = Prepared::new(data, &pieces.mask)?;
    build_dual(
        &prep,
        &spec,
        &Coeffs::Fixed(pieces),
        ConicProgram::new(Sense::Minimize),
        Vec::new(),
    )
}

/// The inner dual over 𝒢₂(σ, z₀) (SOCP).
pub fn build_inner_dual_i(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<DualProgram> {
    if spec.family != MomentFamily::G2 {
        return Err(Error::Invalid("second-moment dual needs the G2 family".into()));
    }
    build_inner_dual(pieces, data, spec)
}

/// The inner dual over 𝒢cov(σ, z₀) (SDP).
pub fn build_inner_dual_ii(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<DualProgram> {
    if spec.family != MomentFamily::Gcov {
        return Err(Error::Invalid("covariance dual needs the Gcov family".into()));
    }
    build_inner_dual(pieces, data, spec)
}

fn solve_checked(prog: &ConicProgram, what: &str) -> Result<SolveReport> {
    let mut r = conic::solve(prog, SOLVE_TOL)?;
    if r.status == SolveStatus::Inaccurate {
        r = conic::solve(prog, SOLVE_TOL_RETRY)?;
    }
    match r.status {
        SolveStatus::Optimal => Ok(r),
        SolveStatus::Inaccurate => Err(Error::Solve {
            status: r.status,
            diagnostic: format!("{what}: solver stopped before reaching tolerance"),
        }),
        status => Err(Error::Solve {
            status,
            diagnostic: format!(
                "{what}: {}; the Slater condition (strictly feasible ν with RW_p < ρ and moment < σ²) likely fails, \
                 try a larger sigma or rho",
                match status {
                    SolveStatus::Unbounded => "dual unbounded, so the ambiguity set is empty",
                    _ => "dual infeasible",
                }
            ),
        }),
    }
}

impl DualProgram {
    pub fn solve(&self) -> Result<DualSolution> {
        let report = solve_checked(&self.program, "inner dual")?;
        Ok(self.extract(report, None))
    }

    fn extract(&self, report: SolveReport, pieces: Option<&SamplePieces>) -> DualSolution {
        let x = &report.primal;
        let l = &self.layout;
        let get = |ix: &[usize]| ix.iter().map(|&v| x[v]).collect::<Vec<_>>();
        let lambda_matrix = l
            .lambda_matrix
            .as_ref()
            .map(|lam| DMatrix::from_fn(l.dt, l.dt, |r, c| x[lam[psd_pack_index(r, c)]]));
        let blocks = l
            .blocks
            .iter()
            .map(|b| {
                let tau = b.tau.map_or(0.0, |t| match l.family {
                    MomentFamily::G2 => x[t],
                    MomentFamily::Gcov => x[t] / 4.0,
                });
                let zeta_l = pieces.map_or_else(Vec::new, |p| p.per_sample[b.i][b.j].0.iter().map(|a| -a).collect());
                DualBlock {
                    i: b.i,
                    j: b.j,
                    tau,
                    zeta_l,
                    zeta_g: get(&b.zeta_g),
                    zeta_w: get(&b.zeta_w),
                    zeta_z: get(&b.zeta_z),
                }
            })
            .collect();
        DualSolution {
            value: report.objective,
            lambda1: l.lambda1.map(|v| x[v]),
            lambda_matrix,
            lambda2: x[l.lambda2],
            alpha: x[l.alpha],
            s: get(&l.s),
            theta: get(&l.theta),
            blocks,
            report,
        }
    }
}

/// Solves the inner worst-case value for fixed pieces.
pub fn inner_worst_case(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<DualSolution> {
    let dp = build_inner_dual(pieces, data, spec)?;
    let report = solve_checked(&dp.program, "inner dual")?;
    Ok(dp.extract(report, Some(pieces)))
}

/// Inner worst-case value of `family` at θ.
pub fn evaluate_inner(family: &LossFamily, theta: &[f64], data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<f64> {
    let pieces = SamplePieces::from_family(family, theta, data)?;
    Ok(inner_worst_case(&pieces, data, spec)?.value)
}

#[derive(Debug, Clone)]
pub struct JointFit {
    pub theta: Vec<f64>,
    pub value: f64,
    pub dual: DualSolution,
}

/// min over θ of the inner worst case, as one conic program with θ free.
pub fn joint_fit(family: &LossFamily, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<JointFit> {
    check_dim(family.dim(), data.dim())?;
    let spec = canonical_z0(&drop_inactive_moment(spec.validated(&family.mask)?, data), &family.mask);
    let prep = Prepared::new(data, &family.mask)?;
    let mut prog = ConicProgram::new(Sense::Minimize);
    let vars = prog.add_vars(family.theta_dim);
    let per_sample = prep.zf.iter().map(|zf| family.theta_pieces(zf)).collect::<Result<Vec<_>>>()?;
    let coeffs = Coeffs::Theta {
        vars: vars.clone(),
        per_sample,
    };
    let dp = build_dual(&prep, &spec, &coeffs, prog, vars)?;
    let report = solve_checked(&dp.program, "joint fit")?;
    let dual = dp.extract(report, None);
    Ok(JointFit {
        theta: dual.theta.clone(),
        value: dual.value,
        dual,
    })
}

/// Variable indices of the worst-case primal.
#[derive(Debug, Clone)]
pub struct PrimalLayout {
    pub q: Vec<Vec<usize>>,
    pub xi: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct PrimalProgram {
    pub program: ConicProgram,
    pub layout: PrimalLayout,
    mask: TransportMask,
    fixed: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct WorstCaseSolution {
    pub value: f64,
    pub q: Vec<Vec<f64>>,
    /// Homogenized transported blocks ξ_ij ∈ q_ij·𝒵.
    pub xi: Vec<Vec<Vec<f64>>>,
    pub report: SolveReport,
    mask: TransportMask,
    fixed: Vec<Vec<f64>>,
}

/// The worst-case primal over 𝒢₂(σ, z₀) (maximization).
pub fn build_worst_case_primal(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<PrimalProgram> {
    check_pieces(pieces, data)?;
    if spec.family != MomentFamily::G2 {
        return Err(Error::Unsupported("worst-case primal for the covariance class".into()));
    }
    let spec = canonical_z0(&drop_inactive_moment(spec.validated(&pieces.mask)?, data), &pieces.mask);
    let prep = Prepared::new(data, &pieces.mask)?;
    let dt = prep.dt;
    let n = prep.n();
    let moment = !spec.sigma_is_infinite();
    let (z0t, z0f) = if moment {
        split_by_flags(&spec.z0, &prep)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut prog = ConicProgram::new(Sense::Maximize);
    let mut q = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n);
    let mut all_q = Vec::new();
    let mut budget = Vec::new();
    let mut moment_terms = Vec::new();
    for i in 0..n {
        let c_i = sq_dist(&prep.zf[i], &z0f);
        let mut qi = Vec::new();
        let mut xii = Vec::new();
        for (a, b) in &pieces.per_sample[i] {
            let qv = prog.add_nonneg_var();
            let xv = prog.add_vars(dt);
            prog.add_objective_term(qv, *b);
            for (k, &v) in xv.iter().enumerate() {
                prog.add_objective_term(v, a[k]);
            }
            add_homogenized_domain(&mut prog, &xv, qv, &spec.domain)?;

            // δ = ξ − q Z̃_i
            let delta = prog.add_vars(dt);
            for k in 0..dt {
                prog.add_equality(vec![(delta[k], 1.0), (xv[k], -1.0), (qv, prep.zt[i][k])], 0.0);
            }
            match spec.p {
                Order::One => {
                    let e = prog.add_var();
                    prog.add_cone(Cone::Soc { t: e, x: delta });
                    budget.push((e, 1.0));
                }
                Order::Two => {
                    let u = prog.add_var();
                    prog.add_cone(Cone::Rsoc { u, v: qv, x: delta });
                    budget.push((u, 2.0));
                }
            }
            if moment {
                let g = prog.add_vars(dt);
                for k in 0..dt {
                    prog.add_equality(vec![(g[k], 1.0), (xv[k], -1.0), (qv, z0t[k])], 0.0);
                }
                let v = prog.add_var();
                prog.add_cone(Cone::Rsoc { u: v, v: qv, x: g });
                moment_terms.push((v, 2.0));
                if c_i != 0.0 {
                    moment_terms.push((qv, c_i));
                }
            }
            all_q.push((qv, 1.0));
            qi.push(qv);
            xii.push(xv);
        }
        prog.add_leq(qi.iter().map(|&v| (v, 1.0)).collect(), prep.w[i] / (1.0 - spec.eps));
        q.push(qi);
        xi.push(xii);
    }
    prog.add_equality(all_q, 1.0);
    prog.add_leq(budget, spec.p.pow(spec.rho));
    if moment {
        prog.add_leq(moment_terms, spec.sigma * spec.sigma);
    }
    prog.validate()?;
    Ok(PrimalProgram {
        program: prog,
        layout: PrimalLayout { q, xi },
        mask: pieces.mask.clone(),
        fixed: prep.zf,
    })
}

impl PrimalProgram {
    pub fn solve(&self) -> Result<WorstCaseSolution> {
        let report = solve_checked(&self.program, "worst-case primal")?;
        let x = &report.primal;
        Ok(WorstCaseSolution {
            value: report.objective,
            q: self.layout.q.iter().map(|qi| qi.iter().map(|&v| x[v]).collect()).collect(),
            xi: self
                .layout
                .xi
                .iter()
                .map(|xii| xii.iter().map(|xv| xv.iter().map(|&v| x[v]).collect()).collect())
                .collect(),
            report,
            mask: self.mask.clone(),
            fixed: self.fixed.clone(),
        })
    }
}

/// Solves the worst-case primal.
pub fn worst_case(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<WorstCaseSolution> {
    build_worst_case_primal(pieces, data, spec)?.solve()
}

/// ν⋆ = Σ q_ij δ_{ξ_ij / q_ij} over q_ij > 1e−10·max q, renormalized.
pub fn extract_worst_case(sol: &WorstCaseSolution) -> Result<DiscreteMeasure> {
    let qmax = sol.q.iter().flatten().fold(0.0f64, |m, &q| m.max(q));
    if !(qmax > 0.0) {
        return Err(Error::Invalid("degenerate worst-case solution: all q are zero".into()));
    }
    let cut = Q_THRESHOLD * qmax;
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for (i, qi) in sol.q.iter().enumerate() {
        for (j, &q) in qi.iter().enumerate() {
            if q > cut {
                let zt: Vec<f64> = sol.xi[i][j].iter().map(|x| x / q).collect();
                support.push(Point::new(sol.mask.join(&zt, &sol.fixed[i]))?);
                weights.push(q);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    DiscreteMeasure::new(support, weights)
}

/// CVaR_{1−ε} of a discrete loss distribution: the average of the top
/// (1 − ε) mass, splitting the boundary atom.
pub fn cvar(losses: &[f64], weights: &[f64], eps: f64) -> Result<f64> {
    check_dim(losses.len(), weights.len())?;
    if losses.is_empty() {
        return Err(Error::Empty("losses"));
    }
    check_range("eps", eps, (0.0..1.0).contains(&eps), "[0, 1)")?;
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mass = 1.0 - eps;
    let mut left = mass;
    let mut acc = 0.0;
    for i in order {
        let take = weights[i].min(left);
        acc += take * losses[i];
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    Ok(acc / mass)
}

/// ρ·max_ij‖a_ij‖ + CVaR_{1−ε}(ℓ(Z̃)): the inner value for p = 1, σ = ∞ and
/// 𝒵 = ℝᵈ.
pub fn closed_form_value_p1(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<f64> {
    check_pieces(pieces, data)?;
    if spec.p != Order::One || !spec.sigma_is_infinite() || spec.domain != Domain::FullSpace {
        return Err(Error::Unsupported(
            "closed form needs p = 1, infinite sigma and the full space".into(),
        ));
    }
    let spec = spec.validated(&pieces.mask)?;
    let losses: Vec<f64> = data
        .support()
        .iter()
        .zip(&pieces.per_sample)
        .map(|(z, ps)| {
            let (zt, _) = pieces.mask.split(z.coords());
            ps.iter()
                .map(|(a, b)| a.iter().zip(&zt).map(|(x, y)| x * y).sum::<f64>() + b)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(spec.rho * pieces.lipschitz() + cvar(&losses, data.weights(), spec.eps)?)
}

/// Inputs of the excess-risk bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBoundInputs {
    pub p: Order,
    pub eps: f64,
    pub rho: f64,
    pub seminorms: SeminormReport,
    /// Smoothness α of ℓ⋆, needed for p = 2.
    pub smoothness: Option<f64>,
    /// Class whose resilience at 2ε enters the bound (pass the k-dimensional
    /// class for low-dimensional features).
    pub class: ResilienceClass,
}

/// With c = 2(1 − ε)^{−1/p} and r = cρ + 2τ_p(𝒢, 2ε):
/// p = 1 gives Lip·r, p = 2 gives ‖ℓ⋆‖_{Ḣ^{1,2}}·r + ½αr².
pub fn risk_bound(inp: RiskBoundInputs) -> Result<f64> {
    check_range("eps", inp.eps, (0.0..0.5).contains(&inp.eps), "[0, 1/2)")?;
    check_range("rho", inp.rho, inp.rho >= 0.0, "[0, inf)")?;
    let tau = resilience_bound(ResilienceQuery {
        class: inp.class,
        eps: 2.0 * inp.eps,
        p: inp.p.value(),
    })?;
    let c = 2.0 * (1.0 - inp.eps).powf(-1.0 / inp.p.value());
    let r = c * inp.rho + 2.0 * tau;
    match inp.p {
        Order::One => Ok(inp.seminorms.lipschitz * r),
        Order::Two => {
            let alpha = inp
                .smoothness
                .ok_or_else(|| Error::Invalid("p = 2 bound needs the smoothness constant".into()))?;
            Ok(inp.seminorms.sobolev12 * r + 0.5 * alpha * r * r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::empirical;

    fn line(xs: &[f64]) -> DiscreteMeasure {
        empirical(xs.iter().map(|&x| Point::new(vec![x]).unwrap()).collect()).unwrap()
    }

    fn abs_pieces(n: usize) -> SamplePieces {
        SamplePieces::uniform(TransportMask::all(1), vec![(vec![1.0], 0.0), (vec![-1.0], 0.0)], n).unwrap()
    }

    fn identity_pieces(n: usize) -> SamplePieces {
        SamplePieces::uniform(TransportMask::all(1), vec![(vec![1.0], 0.0)], n).unwrap()
    }

    #[test]
    fn dual_i_classical_example() {
        let spec = AmbiguitySpec::new(Order::One, 0.0, 0.5, MomentFamily::G2, 1e6, vec![0.0]);
        let v = inner_worst_case(&abs_pieces(1), &line(&[0.0]), &spec).unwrap().value;
        assert!((v - 0.5).abs() < 1e-5, "{v}");
    }

    #[test]
    fn dual_i_cvar_example() {
        let spec = AmbiguitySpec::new(Order::One, 0.5, 1e-6, MomentFamily::G2, 1e6, vec![0.0]);
        let v = inner_worst_case(&identity_pieces(2), &line(&[0.0, 1.0]), &spec)
            .unwrap()
            .value;
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn dual_i_moment_cap_binds() {
        let spec = AmbiguitySpec::new(Order::One, 0.0, 0.5, MomentFamily::G2, 0.1, vec![0.0]);
        let v = inner_worst_case(&abs_pieces(1), &line(&[0.0]), &spec).unwrap().value;
        assert!(v <= 0.1 + 1e-6, "{v}");
        let w = worst_case(&abs_pieces(1), &line(&[0.0]), &spec).unwrap().value;
        assert!((v - w).abs() < 1e-6, "{v} vs {w}");
    }

    #[test]
    fn dual_ii_zero_loss() {
        let pieces = SamplePieces::uniform(TransportMask::all(1), vec![(vec![0.0], 0.0)], 1).unwrap();
        let spec = AmbiguitySpec::new(Order::One, 0.0, 0.3, MomentFamily::Gcov, 1.0, vec![0.0]);
        let sol = inner_worst_case(&pieces, &line(&[0.0]), &spec).unwrap();
        assert!(sol.value.abs() < 1e-6);
        assert!(sol.lambda_matrix.unwrap()[(0, 0)].abs() < 1e-5);
    }

    #[test]
    fn closed_form_examples() {
        let data = line(&[0.0, 1.0]);
        let spec = AmbiguitySpec::classical(Order::One, 0.25);
        let v = closed_form_value_p1(&identity_pieces(2), &data, &spec).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        let mut spec = spec;
        spec.eps = 0.5;
        let v = closed_form_value_p1(&identity_pieces(2), &data, &spec).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        spec.eps = 0.49;
        let v = closed_form_value_p1(&identity_pieces(2), &data, &spec).unwrap();
        // Top 0.51 of {0, 1}: 0.5 at 1 and 0.01 at 0.
        assert!((v - (0.25 + 0.5 / 0.51)).abs() < 1e-12);
        assert!((cvar(&[0.0, 1.0], &[0.5, 0.5], 0.5).unwrap() - 1.0).abs() < 1e-15);
        spec.sigma = 3.0;
        assert!(closed_form_value_p1(&identity_pieces(2), &data, &spec).is_err());
    }

    #[test]
    fn worst_case_concentrates() {
        let spec = AmbiguitySpec::new(Order::One, 0.5, 1e-6, MomentFamily::G2, f64::INFINITY, Vec::new());
        let sol = worst_case(&identity_pieces(2), &line(&[0.0, 1.0]), &spec).unwrap();
        assert!((sol.q[1][0] - 1.0).abs() < 1e-6);
        let nu = extract_worst_case(&sol).unwrap();
        assert_eq!(nu.len(), 1);
        assert!((nu.mean()[0] - 1.0).abs() < 1e-5);

        let spec = AmbiguitySpec { eps: 0.49, ..spec };
        let sol = worst_case(&identity_pieces(2), &line(&[0.0, 1.0]), &spec).unwrap();
        let nu = extract_worst_case(&sol).unwrap();
        assert!((nu.mean()[0] - sol.value).abs() < 1e-5);
        // Cap 0.5/0.51 on the atom at 1; the rest sits at 0.
        assert!((sol.value - 0.5 / 0.51).abs() < 1e-4, "{}", sol.value);
    }

    #[test]
    fn gcov_primal_is_unsupported() {
        let spec = AmbiguitySpec::new(Order::One, 0.0, 0.1, MomentFamily::Gcov, 1.0, vec![0.0]);
        assert!(matches!(
            build_worst_case_primal(&abs_pieces(1), &line(&[0.0]), &spec),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn rho_zero_is_bumped() {
        let spec = AmbiguitySpec::classical(Order::One, 0.0);
        let v = inner_worst_case(&abs_pieces(2), &line(&[1.0, -1.0]), &spec).unwrap().value;
        assert!((v - 1.0).abs() < 1e-6);
        let bad = AmbiguitySpec::classical(Order::One, -1.0);
        assert!(inner_worst_case(&abs_pieces(2), &line(&[1.0, -1.0]), &bad).is_err());
    }

    #[test]
    fn risk_bound_examples() {
        let sn = SeminormReport {
            lipschitz: 1.0,
            sobolev12: 1.0,
        };
        let g2 = ResilienceClass::G2 { sigma: 1.0 };
        let inp = RiskBoundInputs {
            p: Order::One,
            eps: 0.0,
            rho: 0.3,
            seminorms: sn,
            smoothness: None,
            class: g2,
        };
        assert!((risk_bound(inp).unwrap() - 0.6).abs() < 1e-15);
        let inp = RiskBoundInputs {
            eps: 0.25,
            rho: 0.0,
            ..inp
        };
        assert!((risk_bound(inp).unwrap() - 16.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(risk_bound(RiskBoundInputs { p: Order::Two, ..inp }).is_err());
        let k = |dim| {
            risk_bound(RiskBoundInputs {
                class: ResilienceClass::Gcov { sigma: 1.0, dim },
                ..inp
            })
            .unwrap()
        };
        assert!(k(2) < k(5));
    }
}
