//! Corruption models: the generic translate-and-replace (Setting B) and
//! translate-and-add (Setting B′) plans, and the concrete regression,
//! classification and multivariate-regression corruptions of the
//! experiments.
//!
//! Gaussian draws use rand_distr's `StandardNormal` (ziggurat) on a
//! `ChaCha8Rng`; callers pick the seed and stream.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::measures::{empirical, norm, DiscreteMeasure, GroundCost, Order, Point, TransportMask};
use crate::robust_ot::{rwp_one_sided, rwp_two_sided};

/// Budget checks run the transport LP only up to this many atoms.
pub const MAX_CHECKED_ATOMS: usize = 60;
const BUDGET_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Displacement {
    /// Every point moves by ρ₀ along `direction`.
    #[default]
    Translate,
    /// Random directions and lengths with (1/n)Σ‖Δᵢ‖ᵖ = ρ₀ᵖ.
    Heterogeneous,
}

/// Outliers are placed at `location + scale·g` with g standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub location: Vec<f64>,
    pub scale: f64,
}

impl OutlierSpec {
    /// A point mass at `distance`·e₁.
    pub fn far_along_e1(dim: usize, distance: f64) -> Self {
        let mut location = vec![0.0; dim];
        location[0] = distance;
        OutlierSpec { location, scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlanB {
    pub rho0: f64,
    pub eps: f64,
    pub p: Order,
    pub displacement: Displacement,
    /// Unit direction for the translation; e₁ when empty.
    pub direction: Vec<f64>,
    pub outliers: OutlierSpec,
}

impl CorruptionPlanB {
    pub fn new(rho0: f64, eps: f64, p: Order, outliers: OutlierSpec) -> Self {
        CorruptionPlanB {
            rho0,
            eps,
            p,
            displacement: Displacement::Translate,
            direction: Vec::new(),
            outliers,
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        check_range("rho0", self.rho0, self.rho0 >= 0.0 && self.rho0.is_finite(), "[0, inf)")?;
        check_range("eps", self.eps, (0.0..=0.49).contains(&self.eps), "[0, 0.49]")?;
        if self.outliers.location.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.outliers.location.len(),
            });
        }
        if !self.direction.is_empty() && (self.direction.len() != dim || norm(&self.direction) == 0.0) {
            return Err(Error::Invalid(
                "direction must be a nonzero vector of the sample dimension".into(),
            ));
        }
        Ok(())
    }

    fn unit_direction(&self, dim: usize) -> Vec<f64> {
        if self.direction.is_empty() {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        } else {
            let l = norm(&self.direction);
            self.direction.iter().map(|x| x / l).collect()
        }
    }
}

/// Outcome of the post-hoc RW_p check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BudgetCheck {
    Verified { value: f64, budget: f64, passed: bool },
    Skipped { reason: String },
}

impl BudgetCheck {
    pub fn passed(&self) -> Option<bool> {
        match self {
            BudgetCheck::Verified { passed, .. } => Some(*passed),
            BudgetCheck::Skipped { .. } => None,
        }
    }
}

/// A clean/corrupted pair with the planted parameter and corrupted indices.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub clean: DiscreteMeasure,
    pub corrupted: DiscreteMeasure,
    pub mask: TransportMask,
    /// θ⋆ (or M⋆ row-major) for the learning tasks; empty otherwise.
    pub truth: Vec<f64>,
    pub outliers: Vec<usize>,
    pub budget: BudgetCheck,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationMeta<'a> {
    pub seed: u64,
    pub n_clean: usize,
    pub n_corrupted: usize,
    pub outliers: &'a [usize],
    pub truth: &'a [f64],
    pub plan: serde_json::Value,
    pub budget_check: &'a BudgetCheck,
}

impl Simulation {
    pub fn meta(&self, seed: u64, plan: serde_json::Value) -> SimulationMeta<'_> {
        SimulationMeta {
            seed,
            n_clean: self.clean.len(),
            n_corrupted: self.corrupted.len(),
            outliers: &self.outliers,
            truth: &self.truth,
            plan,
            budget_check: &self.budget,
        }
    }
}

fn gaussian_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_sphere(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, d);
        let l = norm(&g);
        if l > 1e-12 {
            return g.into_iter().map(|x| x / l).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// i.i.d. standard normal sample in ℝᵈ.
pub fn gaussian_sample(rng: &mut impl Rng, n: usize, d: usize) -> Result<DiscreteMeasure> {
    empirical((0..n).map(|_| Point::new(gaussian_vec(rng, d))).collect::<Result<_>>()?)
}

fn corrupted_subset(rng: &mut impl Rng, n: usize, eps: f64) -> Vec<usize> {
    let k = (eps * n as f64 + 1e-9).floor() as usize;
    let mut s = index::sample(rng, n, k).into_vec();
    s.sort_unstable();
    s
}

fn displaced(clean: &DiscreteMeasure, plan: &CorruptionPlanB, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let d = clean.dim();
    let pts = clean.support();
    match plan.displacement {
        Displacement::Translate => {
            let u = plan.unit_direction(d);
            Ok(pts
                .iter()
                .map(|z| z.coords().iter().zip(&u).map(|(x, v)| x + plan.rho0 * v).collect())
                .collect())
        }
        Displacement::Heterogeneous => {
            let raw: Vec<f64> = (0..pts.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let mean_p: f64 = raw.iter().zip(clean.weights()).map(|(r, w)| w * plan.p.pow(*r)).sum();
            let scale = if mean_p > 0.0 { plan.rho0 / plan.p.root(mean_p) } else { 0.0 };
            Ok(pts
                .iter()
                .zip(&raw)
                .map(|(z, r)| {
                    let u = unit_sphere(rng, d);
                    z.coords().iter().zip(&u).map(|(x, v)| x + scale * r * v).collect()
                })
                .collect())
        }
    }
}

fn outlier_point(spec: &OutlierSpec, rng: &mut impl Rng) -> Vec<f64> {
    if spec.scale == 0.0 {
        spec.location.clone()
    } else {
        spec.location
            .iter()
            .map(|&l| l + spec.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// RW_p(corrupted, clean) ≤ ρ + 1e−6 by the transport LP, for small inputs.
pub fn check_two_sided_budget(
    corrupted: &DiscreteMeasure,
    clean: &DiscreteMeasure,
    eps: f64,
    rho: f64,
    p: Order,
    mask: &TransportMask,
) -> Result<BudgetCheck> {
    if corrupted.len().max(clean.len()) > MAX_CHECKED_ATOMS {
        return Ok(skipped(corrupted.len().max(clean.len())));
    }
    let cost = GroundCost { p, mask: mask.clone() };
    let value = rwp_two_sided(corrupted, clean, eps, &cost)?;
    Ok(BudgetCheck::Verified {
        value,
        budget: rho,
        passed: value <= rho + BUDGET_SLACK,
    })
}

/// RW_p(corrupted ‖ clean) ≤ ρ + 1e−6 by the transport LP, for small inputs.
pub fn check_one_sided_budget(
    corrupted: &DiscreteMeasure,
    clean: &DiscreteMeasure,
    eps: f64,
    rho: f64,
    p: Order,
    mask: &TransportMask,
) -> Result<BudgetCheck> {
    if corrupted.len().max(clean.len()) > MAX_CHECKED_ATOMS {
        return Ok(skipped(corrupted.len().max(clean.len())));
    }
    let cost = GroundCost { p, mask: mask.clone() };
    let value = rwp_one_sided(corrupted, clean, eps, &cost)?;
    Ok(BudgetCheck::Verified {
        value,
        budget: rho,
        passed: value <= rho + BUDGET_SLACK,
    })
}

fn skipped(n: usize) -> BudgetCheck {
    BudgetCheck::Skipped {
        reason: format!(
            "{n} atoms exceeds the LP check limit of {MAX_CHECKED_ATOMS}; the budget holds by construction \
             (uncorrupted atoms move by at most rho0 and the rest are covered by the eps mass)"
        ),
    }
}

/// Translate (or perturb) every point with W_p budget ρ₀, then replace a
/// uniform ⌊εn⌋-subset by outliers.
pub fn corrupt_setting_b(clean: &DiscreteMeasure, plan: &CorruptionPlanB, rng: &mut impl Rng) -> Result<Simulation> {
    plan.check(clean.dim())?;
    let mut rows = displaced(clean, plan, rng)?;
    let outliers = corrupted_subset(rng, clean.len(), plan.eps);
    for &i in &outliers {
        rows[i] = outlier_point(&plan.outliers, rng);
    }
    let corrupted = DiscreteMeasure::from_rows(rows, clean.weights().to_vec())?;
    let mask = TransportMask::all(clean.dim());
    let budget = check_two_sided_budget(&corrupted, clean, plan.eps, plan.rho0, plan.p, &mask)?;
    Ok(Simulation {
        clean: clean.clone(),
        corrupted,
        mask,
        truth: Vec::new(),
        outliers,
        budget,
    })
}

/// Number of clean samples m = ⌈(1 − ε)n⌉ for a final size n.
pub fn clean_count(n: usize, eps: f64) -> usize {
    ((1.0 - eps) * n as f64 - 1e-9).ceil() as usize
}

/// Additive contamination: `clean` holds m = ⌈(1 − ε)n⌉ samples; after the
/// ρ₀ displacement, ⌊εn⌋ outliers are appended.
pub fn corrupt_setting_b_prime(
    clean: &DiscreteMeasure,
    n: usize,
    plan: &CorruptionPlanB,
    rng: &mut impl Rng,
) -> Result<Simulation> {
    plan.check(clean.dim())?;
    let m = clean.len();
    if clean_count(n, plan.eps) != m {
        return Err(Error::Invalid(format!(
            "{m} clean samples do not match n = {n} at eps = {} (need {})",
            plan.eps,
            clean_count(n, plan.eps)
        )));
    }
    if clean.weights().iter().any(|&w| (w - 1.0 / m as f64).abs() > 1e-12) {
        return Err(Error::InvalidWeights(
            "additive contamination needs a uniform clean sample".into(),
        ));
    }
    let mut rows = displaced(clean, plan, rng)?;
    let extra = (plan.eps * n as f64 + 1e-9).floor() as usize;
    let outliers: Vec<usize> = (m..m + extra).collect();
    for _ in 0..extra {
        rows.push(outlier_point(&plan.outliers, rng));
    }
    let k = rows.len();
    let corrupted = DiscreteMeasure::from_rows(rows, vec![1.0 / k as f64; k])?;
    let mask = TransportMask::all(clean.dim());
    let budget = check_one_sided_budget(&corrupted, clean, plan.eps, plan.rho0, plan.p, &mask)?;
    Ok(Simulation {
        clean: clean.clone(),
        corrupted,
        mask,
        truth: Vec::new(),
        outliers,
        budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionCorruption {
    pub c: f64,
    pub rho: f64,
    pub eps: f64,
}

/// z = (x, y) with x ~ N(0, I_{d−1}), y = θ⋆ᵀx, θ⋆ uniform on the sphere.
/// Corrupted atom i is (Cx, −C²θ⋆ᵀx + ρ) for i ∈ S and (x, θ⋆ᵀx + ρ)
/// otherwise.
pub fn corrupt_regression(n: usize, d: usize, plan: &RegressionCorruption, rng: &mut impl Rng) -> Result<Simulation> {
    if d < 2 {
        return Err(Error::Invalid("regression needs d >= 2".into()));
    }
    check_common(n, plan.rho, plan.eps)?;
    check_range("C", plan.c, plan.c > 0.0 && plan.c.is_finite(), "(0, inf)")?;
    let dx = d - 1;
    let theta = unit_sphere(rng, dx);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, dx)).collect();
    let outliers = corrupted_subset(rng, n, plan.eps);
    let mut clean = Vec::with_capacity(n);
    let mut bad = Vec::with_capacity(n);
    for (i, x) in xs.into_iter().enumerate() {
        let y = dot(&theta, &x);
        let mut z = x.clone();
        z.push(y);
        clean.push(z);
        if outliers.binary_search(&i).is_ok() {
            let mut z: Vec<f64> = x.iter().map(|v| plan.c * v).collect();
            z.push(-plan.c * plan.c * y + plan.rho);
            bad.push(z);
        } else {
            let mut z = x;
            z.push(y + plan.rho);
            bad.push(z);
        }
    }
    finish(clean, bad, TransportMask::all(d), theta, outliers, plan.eps, plan.rho)
}

/// z = (x, sign(θ⋆ᵀx)) with pinned label. Corrupted feature
/// (−100)^{1[i∈S]}x + ρe₁.
pub fn corrupt_classification(n: usize, d: usize, rho: f64, eps: f64, rng: &mut impl Rng) -> Result<Simulation> {
    if d < 2 {
        return Err(Error::Invalid("classification needs d >= 2".into()));
    }
    check_common(n, rho, eps)?;
    let dx = d - 1;
    let theta = unit_sphere(rng, dx);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, dx)).collect();
    let outliers = corrupted_subset(rng, n, eps);
    let mut clean = Vec::with_capacity(n);
    let mut bad = Vec::with_capacity(n);
    for (i, x) in xs.into_iter().enumerate() {
        let y = if dot(&theta, &x) >= 0.0 { 1.0 } else { -1.0 };
        let s = if outliers.binary_search(&i).is_ok() { -100.0 } else { 1.0 };
        let mut z: Vec<f64> = x.iter().map(|v| s * v).collect();
        z[0] += rho;
        z.push(y);
        bad.push(z);
        let mut z = x;
        z.push(y);
        clean.push(z);
    }
    finish(clean, bad, TransportMask::leading(d, dx)?, theta, outliers, eps, rho)
}

/// z = (x, M⋆x) with x ~ N(0, I_d), M⋆ ∈ ℝ^{k×d} standard normal (returned
/// row-major). Corrupted atom (10^{1[i∈S]}x + ρe₁, (−100)^{1[i∈S]}M⋆x).
pub fn corrupt_multiregression(n: usize, d: usize, k: usize, rho: f64, eps: f64, rng: &mut impl Rng) -> Result<Simulation> {
    if k == 0 || k > crate::losses::MAX_MULTIREG_OUTPUTS {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as f64,
            range: "[1, 12]",
        });
    }
    if d == 0 {
        return Err(Error::Invalid("multiregression needs d >= 1".into()));
    }
    check_common(n, rho, eps)?;
    let m_star = gaussian_vec(rng, k * d);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
    let outliers = corrupted_subset(rng, n, eps);
    let mut clean = Vec::with_capacity(n);
    let mut bad = Vec::with_capacity(n);
    for (i, x) in xs.into_iter().enumerate() {
        let y: Vec<f64> = (0..k).map(|r| dot(&m_star[r * d..(r + 1) * d], &x)).collect();
        let (sx, sy) = if outliers.binary_search(&i).is_ok() {
            (10.0, -100.0)
        } else {
            (1.0, 1.0)
        };
        let mut z: Vec<f64> = x.iter().map(|v| sx * v).collect();
        z[0] += rho;
        z.extend(y.iter().map(|v| sy * v));
        bad.push(z);
        let mut z = x;
        z.extend(y);
        clean.push(z);
    }
    finish(clean, bad, TransportMask::all(d + k), m_star, outliers, eps, rho)
}

fn check_common(n: usize, rho: f64, eps: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    check_range("rho", rho, rho >= 0.0 && rho.is_finite(), "[0, inf)")?;
    check_range("eps", eps, (0.0..=0.49).contains(&eps), "[0, 0.49]")
}

fn finish(
    clean: Vec<Vec<f64>>,
    bad: Vec<Vec<f64>>,
    mask: TransportMask,
    truth: Vec<f64>,
    outliers: Vec<usize>,
    eps: f64,
    rho: f64,
) -> Result<Simulation> {
    let n = clean.len();
    let w = vec![1.0 / n as f64; n];
    let clean = DiscreteMeasure::from_rows(clean, w.clone())?;
    let corrupted = DiscreteMeasure::from_rows(bad, w)?;
    let budget = check_two_sided_budget(&corrupted, &clean, eps, rho, Order::One, &mask)?;
    Ok(Simulation {
        clean,
        corrupted,
        mask,
        truth,
        outliers,
        budget,
    })
}
