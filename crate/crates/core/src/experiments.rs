//! Excess-risk experiments: config parsing, parallel trials, bootstrap
//! bands, bound overlay and the CSV / gnuplot / manifest writers.
//!
//! Config files are flat `key = value` lines; `#` starts a comment.
//!
//! ```text
//! task = regression          # regression | classification | multiregression
//! grid = n                   # n | d
//! grid_values = 10, 20, 50
//! d = 10                     # fixed dimension when grid = n
//! n = 20                     # fixed sample size when grid = d
//! k = 3                      # outputs, multiregression only
//! p = 1
//! rho = 0.1
//! eps = 0.1
//! c = 8                      # corruption scale, regression only
//! trials = 20
//! bootstrap = 100
//! seed = 1
//! methods = wdro; orwdro-g2 eps_hat=0.1; orwdro-g2 eps_hat=0.2 label=orwdro-g2-2eps
//! ```
//!
//! Method options: `eps_hat`, `rho_hat`, `sigma` (a number, `auto` or
//! `inf`), `e_const`, `z0` (`trimmed`, `filter` or `origin`), `label`.
//! Other keys: `smoothness` (needed for p = 2 bounds), `filter_threshold`,
//! `record_walltime`, `parallel`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_range, Error, Result};
use crate::losses::LossFamily;
use crate::measures::{top_eigen, DiscreteMeasure, Order, Point, TransportMask};
use crate::par::{self, Execution};
use crate::reformulate::{joint_fit, risk_bound, AmbiguitySpec, MomentFamily, RiskBoundInputs};
use crate::robust_ot::ResilienceClass;
use crate::robust_stats::{iterative_filter, trimmed_mean, FilterOptions, TrimSpec, MAX_FILTER_EPS};
use crate::simulate::{corrupt_classification, corrupt_multiregression, corrupt_regression, RegressionCorruption, Simulation};

/// σ is doubled at most this many times after an infeasible solve.
pub const MAX_SIGMA_DOUBLINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
    Multiregression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridAxis {
    N,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Wdro,
    OrwdroG2,
    OrwdroGcov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaPolicy {
    /// √d + E for 𝒢₂, 1 + E for 𝒢cov.
    Auto,
    Infinite,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterPolicy {
    Trimmed,
    Filter,
    Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSpec {
    pub label: String,
    pub kind: MethodKind,
    /// ε̂; defaults to the config ε for the robust methods and 0 for WDRO.
    pub eps_hat: f64,
    pub rho_hat: f64,
    pub sigma: SigmaPolicy,
    /// Certified center error E; defaults to √d + ρ (𝒢₂) or 1 + ρ (𝒢cov).
    pub e_const: Option<f64>,
    pub z0: CenterPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub grid: GridAxis,
    pub grid_values: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub p: Order,
    pub rho: f64,
    pub eps: f64,
    pub c: f64,
    pub trials: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    pub smoothness: Option<f64>,
    pub filter_threshold: f64,
    pub record_walltime: bool,
    pub parallel: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected key = value, got {body:?}"),
            })?;
            let key = k.trim().to_string();
            if kv.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
        }
        let take = |kv: &mut BTreeMap<String, (usize, String)>, key: &str| kv.remove(key);

        let task = match take(&mut kv, "task") {
            Some((l, v)) => match v.as_str() {
                "regression" => Task::Regression,
                "classification" => Task::Classification,
                "multiregression" => Task::Multiregression,
                _ => {
                    return Err(Error::Parse {
                        line: l,
                        msg: format!("unknown task {v:?}"),
                    })
                }
            },
            None => Task::Regression,
        };
        let grid = match take(&mut kv, "grid") {
            Some((l, v)) => match v.as_str() {
                "n" => GridAxis::N,
                "d" => GridAxis::D,
                _ => {
                    return Err(Error::Parse {
                        line: l,
                        msg: format!("unknown grid axis {v:?}"),
                    })
                }
            },
            None => GridAxis::N,
        };
        let (gl, gv) = take(&mut kv, "grid_values").ok_or(Error::Parse {
            line: 0,
            msg: "missing grid_values".into(),
        })?;
        let grid_values = gv
            .split(',')
            .map(|s| parse_num::<usize>("grid_values", s, gl))
            .collect::<Result<Vec<_>>>()?;

        let mut num = |key: &str, default: f64| -> Result<f64> {
            match take(&mut kv, key) {
                Some((l, v)) => parse_num(key, &v, l),
                None => Ok(default),
            }
        };
        let n = num("n", 20.0)? as usize;
        let d = num("d", 10.0)? as usize;
        let k = num("k", 3.0)? as usize;
        let p = Order::from_int(num("p", 1.0)? as u32)?;
        let rho = num("rho", 0.1)?;
        let eps = num("eps", 0.1)?;
        let c = num("c", 8.0)?;
        let trials = num("trials", 20.0)? as usize;
        let bootstrap = num("bootstrap", 100.0)? as usize;
        let filter_threshold = num("filter_threshold", FilterOptions::default().threshold)?;
        let seed = match take(&mut kv, "seed") {
            Some((l, v)) => parse_num("seed", &v, l)?,
            None => 0,
        };
        let smoothness = match take(&mut kv, "smoothness") {
            Some((l, v)) => Some(parse_num("smoothness", &v, l)?),
            None => None,
        };
        let record_walltime = match take(&mut kv, "record_walltime") {
            Some((l, v)) => parse_bool("record_walltime", &v, l)?,
            None => false,
        };
        let parallel = match take(&mut kv, "parallel") {
            Some((l, v)) => parse_bool("parallel", &v, l)?,
            None => true,
        };
        let methods = match take(&mut kv, "methods") {
            Some((l, v)) => v
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_method(s, eps, rho, l))
                .collect::<Result<Vec<_>>>()?,
            None => vec![parse_method("wdro", eps, rho, 0)?, parse_method("orwdro-g2", eps, rho, 0)?],
        };
        if let Some((key, (line, _))) = kv.into_iter().next() {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key {key}"),
            });
        }
        let cfg = ExperimentConfig {
            task,
            grid,
            grid_values,
            n,
            d,
            k,
            p,
            rho,
            eps,
            c,
            trials,
            bootstrap,
            seed,
            methods,
            smoothness,
            filter_threshold,
            record_walltime,
            parallel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_values.is_empty() {
            return Err(Error::Empty("grid_values"));
        }
        if self.methods.is_empty() {
            return Err(Error::Empty("methods"));
        }
        if self.trials < 2 {
            return Err(Error::Invalid("trials must be at least 2".into()));
        }
        if self.bootstrap == 0 {
            return Err(Error::Invalid("bootstrap must be positive".into()));
        }
        check_range("eps", self.eps, (0.0..=0.49).contains(&self.eps), "[0, 0.49]")?;
        check_range("rho", self.rho, self.rho >= 0.0 && self.rho.is_finite(), "[0, inf)")?;
        for m in &self.methods {
            check_range("eps_hat", m.eps_hat, (0.0..0.5).contains(&m.eps_hat), "[0, 1/2)")?;
            check_range("rho_hat", m.rho_hat, m.rho_hat >= 0.0 && m.rho_hat.is_finite(), "[0, inf)")?;
        }
        let mut labels: Vec<&str> = self.methods.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("method labels must be unique".into()));
        }
        for &g in &self.grid_values {
            let (n, d) = self.size_at(g);
            if n == 0 {
                return Err(Error::Invalid("sample size must be positive".into()));
            }
            let min_d = if self.task == Task::Multiregression { 1 } else { 2 };
            if d < min_d {
                return Err(Error::Invalid(format!("dimension {d} too small for {:?}", self.task)));
            }
        }
        Ok(())
    }

    /// (n, d) at a grid value.
    pub fn size_at(&self, g: usize) -> (usize, usize) {
        match self.grid {
            GridAxis::N => (g, self.d),
            GridAxis::D => (self.n, g),
        }
    }
}

fn parse_method(text: &str, eps: f64, rho: f64, line: usize) -> Result<MethodSpec> {
    let mut toks = text.split_whitespace();
    let kind_s = toks.next().ok_or(Error::Parse {
        line,
        msg: "empty method".into(),
    })?;
    let kind = match kind_s {
        "wdro" => MethodKind::Wdro,
        "orwdro-g2" => MethodKind::OrwdroG2,
        "orwdro-gcov" => MethodKind::OrwdroGcov,
        _ => {
            return Err(Error::Parse {
                line,
                msg: format!("unknown method {kind_s:?}"),
            })
        }
    };
    let robust = kind != MethodKind::Wdro;
    let mut m = MethodSpec {
        label: kind_s.to_string(),
        kind,
        eps_hat: if robust { eps } else { 0.0 },
        rho_hat: rho,
        sigma: if robust { SigmaPolicy::Auto } else { SigmaPolicy::Infinite },
        e_const: None,
        z0: match kind {
            MethodKind::OrwdroGcov => CenterPolicy::Filter,
            _ => CenterPolicy::Trimmed,
        },
    };
    let mut explicit_label = false;
    for tok in toks {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected option=value in method, got {tok:?}"),
        })?;
        match k {
            "eps_hat" => m.eps_hat = parse_num(k, v, line)?,
            "rho_hat" => m.rho_hat = parse_num(k, v, line)?,
            "e_const" => m.e_const = Some(parse_num(k, v, line)?),
            "sigma" => {
                m.sigma = match v {
                    "auto" => SigmaPolicy::Auto,
                    "inf" => SigmaPolicy::Infinite,
                    _ => SigmaPolicy::Fixed(parse_num(k, v, line)?),
                }
            }
            "z0" => {
                m.z0 = match v {
                    "trimmed" => CenterPolicy::Trimmed,
                    "filter" => CenterPolicy::Filter,
                    "origin" => CenterPolicy::Origin,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown z0 policy {v:?}"),
                        })
                    }
                }
            }
            "label" => {
                m.label = v.to_string();
                explicit_label = true;
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown method option {k:?}"),
                })
            }
        }
    }
    if kind == MethodKind::Wdro && m.eps_hat != 0.0 {
        return Err(Error::Parse {
            line,
            msg: "wdro has no eps_hat".into(),
        });
    }
    if !explicit_label && robust && m.eps_hat != eps {
        m.label = format!("{kind_s}(eps_hat={})", m.eps_hat);
    }
    if !explicit_label && m.rho_hat != rho {
        m.label = format!("{}(rho_hat={})", m.label, m.rho_hat);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub grid: usize,
    pub method: String,
    pub mean: f64,
    pub q10: f64,
    pub q90: f64,
    pub bound: f64,
    pub status: String,
    pub walltime_ms: u64,
    /// mean ≤ bound, with the order-level constants set to 1.
    pub bound_respected: Option<bool>,
    pub excess: Vec<f64>,
}

/// Resampled means; returns the nearest-rank q and 1 − q quantiles.
pub fn bootstrap_quantiles(values: &[f64], resamples: usize, q: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    if !(q > 0.0 && q < 0.5) {
        return Err(Error::OutOfRange {
            name: "q",
            value: q,
            range: "(0, 1/2)",
        });
    }
    if resamples == 0 {
        return Err(Error::Invalid("resamples must be positive".into()));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let rank = |f: f64| ((f * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    Ok((means[rank(q)], means[rank(1.0 - q)]))
}

/// Fills `bound` and `bound_respected` from `bound_for`.
pub fn overlay_bounds(rows: &mut [ResultRow], mut bound_for: impl FnMut(&ResultRow) -> Option<f64>) {
    for row in rows {
        match bound_for(row) {
            Some(b) => {
                row.bound = b;
                row.bound_respected = Some(row.mean <= b);
            }
            None => {
                row.bound = f64::NAN;
                row.bound_respected = None;
            }
        }
    }
}

struct TrialOutcome {
    excess: Option<f64>,
    sigma_doublings: usize,
    bound: Option<f64>,
    millis: u64,
    error: Option<String>,
}

fn family_for(cfg: &ExperimentConfig, d: usize) -> Result<LossFamily> {
    match cfg.task {
        Task::Regression => LossFamily::mad(d - 1, TransportMask::all(d)),
        Task::Classification => LossFamily::hinge(d - 1),
        Task::Multiregression => LossFamily::l1_multiregression(d, cfg.k, TransportMask::all(d + cfg.k)),
    }
}

fn simulate_trial(cfg: &ExperimentConfig, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Simulation> {
    match cfg.task {
        Task::Regression => corrupt_regression(
            n,
            d,
            &RegressionCorruption {
                c: cfg.c,
                rho: cfg.rho,
                eps: cfg.eps,
            },
            rng,
        ),
        Task::Classification => corrupt_classification(n, d, cfg.rho, cfg.eps, rng),
        Task::Multiregression => corrupt_multiregression(n, d, cfg.k, cfg.rho, cfg.eps, rng),
    }
}

/// Population moment constants of the clean model: (σ for 𝒢₂, σ for 𝒢cov,
/// feature dimension k of the loss).
fn population_constants(cfg: &ExperimentConfig, d: usize, truth: &[f64]) -> (f64, f64, usize) {
    match cfg.task {
        // z = (x, θ⋆ᵀx), ‖θ⋆‖ = 1: trace d, top eigenvalue 2.
        Task::Regression => ((d as f64).sqrt(), 2f64.sqrt(), 1),
        // Cov(x, sign(θ⋆ᵀx)) = √(2/π)θ⋆.
        Task::Classification => ((d as f64).sqrt(), (1.0 + (2.0 / std::f64::consts::PI).sqrt()).sqrt(), 1),
        Task::Multiregression => {
            let k = cfg.k;
            let m = nalgebra::DMatrix::from_row_slice(k, d, truth);
            let gram = &m.transpose() * &m;
            let op = top_eigen(&gram).0.max(0.0);
            let fro = truth.iter().map(|x| x * x).sum::<f64>();
            ((d as f64 + fro).sqrt(), (1.0 + op).sqrt(), k)
        }
    }
}

fn center(data: &DiscreteMeasure, method: &MethodSpec, cfg: &ExperimentConfig) -> Result<Point> {
    match method.z0 {
        CenterPolicy::Trimmed => trimmed_mean(data, TrimSpec::default()),
        CenterPolicy::Filter => {
            let eps = method.eps_hat.min(MAX_FILTER_EPS);
            let opts = FilterOptions {
                threshold: cfg.filter_threshold,
                ..FilterOptions::default()
            };
            Ok(iterative_filter(data, eps, &opts)?.0)
        }
        CenterPolicy::Origin => Ok(Point::zeros(data.dim())),
    }
}

fn run_trial(cfg: &ExperimentConfig, method: &MethodSpec, sim: &Simulation, d: usize) -> TrialOutcome {
    let start = Instant::now();
    let mut out = TrialOutcome {
        excess: None,
        sigma_doublings: 0,
        bound: None,
        millis: 0,
        error: None,
    };
    let result = (|| -> Result<()> {
        let family = family_for(cfg, d)?;
        let total_dim = sim.corrupted.dim() as f64;
        let (family_kind, sigma0, z0) = match method.kind {
            MethodKind::Wdro => (MomentFamily::G2, f64::INFINITY, Vec::new()),
            MethodKind::OrwdroG2 | MethodKind::OrwdroGcov => {
                let (fam, base, e_default) = if method.kind == MethodKind::OrwdroG2 {
                    (MomentFamily::G2, total_dim.sqrt(), total_dim.sqrt() + cfg.rho)
                } else {
                    (MomentFamily::Gcov, 1.0, 1.0 + cfg.rho)
                };
                let sigma = match method.sigma {
                    SigmaPolicy::Auto => base + method.e_const.unwrap_or(e_default),
                    SigmaPolicy::Infinite => f64::INFINITY,
                    SigmaPolicy::Fixed(s) => s,
                };
                let z0 = if sigma.is_finite() {
                    center(&sim.corrupted, method, cfg)?.into_vec()
                } else {
                    Vec::new()
                };
                (fam, sigma, z0)
            }
        };
        let mut spec = AmbiguitySpec::new(cfg.p, method.eps_hat, method.rho_hat, family_kind, sigma0, z0);
        let fit = loop {
            match joint_fit(&family, &sim.corrupted, &spec) {
                Ok(f) => break f,
                Err(Error::Solve { .. }) if spec.sigma.is_finite() && out.sigma_doublings < MAX_SIGMA_DOUBLINGS => {
                    spec.sigma *= 2.0;
                    out.sigma_doublings += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let risk_hat = family.expected(&fit.theta, &sim.clean)?;
        let risk_star = family.expected(&sim.truth, &sim.clean)?;
        out.excess = Some(risk_hat - risk_star);

        let (sigma_g2, sigma_cov, k_feat) = population_constants(cfg, d, &sim.truth);
        let class = match method.kind {
            MethodKind::OrwdroGcov => ResilienceClass::Gcov {
                sigma: sigma_cov,
                dim: k_feat,
            },
            _ => ResilienceClass::G2 { sigma: sigma_g2 },
        };
        let seminorms = family.seminorms(&sim.truth, &sim.clean)?;
        out.bound = risk_bound(RiskBoundInputs {
            p: cfg.p,
            eps: method.eps_hat,
            rho: method.rho_hat,
            seminorms,
            smoothness: cfg.smoothness,
            class,
        })
        .ok();
        Ok(())
    })();
    if let Err(e) = result {
        out.error = Some(e.to_string());
    }
    if cfg.record_walltime {
        out.millis = start.elapsed().as_millis() as u64;
    }
    out
}

/// Stream id for (grid index, trial).
fn stream(g: usize, t: usize) -> u64 {
    ((g as u64) << 32) | t as u64
}

/// Runs every (grid value, trial) in parallel, then aggregates rows sorted by
/// grid value and method order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let exec = if cfg.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let jobs: Vec<(usize, usize)> = (0..cfg.grid_values.len())
        .flat_map(|g| (0..cfg.trials).map(move |t| (g, t)))
        .collect();
    let outcomes: Vec<Result<Vec<TrialOutcome>>> = par::map(exec, jobs, |(g, t)| {
        let (n, d) = cfg.size_at(cfg.grid_values[g]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream(g, t));
        let sim = simulate_trial(cfg, n, d, &mut rng)?;
        Ok(cfg.methods.iter().map(|m| run_trial(cfg, m, &sim, d)).collect())
    });
    let outcomes: Vec<Vec<TrialOutcome>> = outcomes.into_iter().collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..cfg.grid_values.len()).collect();
    order.sort_by_key(|&g| cfg.grid_values[g]);
    let mut rows = Vec::new();
    for g in order {
        let trials = &outcomes[g * cfg.trials..(g + 1) * cfg.trials];
        for (mi, method) in cfg.methods.iter().enumerate() {
            let per: Vec<&TrialOutcome> = trials.iter().map(|t| &t[mi]).collect();
            let excess: Vec<f64> = per.iter().filter_map(|o| o.excess).collect();
            let failed = per.len() - excess.len();
            let doubled = per.iter().filter(|o| o.sigma_doublings > 0).count();
            let mut status = if failed == 0 {
                "ok".to_string()
            } else {
                format!("failed={failed}/{}", per.len())
            };
            if doubled > 0 {
                write!(status, ";sigma_doubled={doubled}").unwrap();
            }
            if let Some(e) = per.iter().find_map(|o| o.error.as_ref()) {
                log::warn!("grid {} method {}: {e}", cfg.grid_values[g], method.label);
            }
            let (mean, q10, q90) = if excess.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream(g, cfg.trials + mi));
                let (lo, hi) = bootstrap_quantiles(&excess, cfg.bootstrap, 0.1, &mut rng)?;
                (excess.iter().sum::<f64>() / excess.len() as f64, lo, hi)
            };
            let bounds: Vec<f64> = per.iter().filter_map(|o| o.bound).collect();
            let bound = if bounds.len() == per.len() {
                Some(bounds.iter().sum::<f64>() / bounds.len() as f64)
            } else {
                None
            };
            rows.push((
                ResultRow {
                    grid: cfg.grid_values[g],
                    method: method.label.clone(),
                    mean,
                    q10,
                    q90,
                    bound: f64::NAN,
                    status,
                    walltime_ms: per.iter().map(|o| o.millis).sum(),
                    bound_respected: None,
                    excess,
                },
                bound,
            ));
        }
    }
    let bounds: Vec<Option<f64>> = rows.iter().map(|r| r.1).collect();
    let mut rows: Vec<ResultRow> = rows.into_iter().map(|r| r.0).collect();
    let mut it = bounds.into_iter();
    overlay_bounds(&mut rows, |_| it.next().flatten());
    Ok(rows)
}

pub fn write_results_csv(rows: &[ResultRow], w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["grid", "method", "mean", "q10", "q90", "bound", "status", "walltime_ms"])?;
    for r in rows {
        wr.write_record([
            r.grid.to_string(),
            r.method.clone(),
            r.mean.to_string(),
            r.q10.to_string(),
            r.q90.to_string(),
            r.bound.to_string(),
            r.status.clone(),
            r.walltime_ms.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// One block per method, separated by two blank lines (gnuplot `index`).
pub fn gnuplot_data(rows: &[ResultRow], cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let axis = match cfg.grid {
        GridAxis::N => "n",
        GridAxis::D => "d",
    };
    for (i, m) in cfg.methods.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        writeln!(s, "# method: {}", m.label).unwrap();
        writeln!(s, "# {axis} mean q10 q90 bound").unwrap();
        for r in rows.iter().filter(|r| r.method == m.label) {
            writeln!(s, "{} {} {} {} {}", r.grid, r.mean, r.q10, r.q90, r.bound).unwrap();
        }
    }
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    rng: &'static str,
    parallel_build: bool,
    rows: Vec<ManifestRow<'a>>,
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    grid: usize,
    method: &'a str,
    status: &'a str,
    bound_respected: Option<bool>,
    excess: &'a [f64],
}

pub fn manifest_json(rows: &[ResultRow], cfg: &ExperimentConfig) -> Result<String> {
    let m = Manifest {
        tool: "orwdro",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        rng: "ChaCha8Rng::seed_from_u64(seed), stream = grid_index << 32 | trial",
        parallel_build: Execution::parallel_available(),
        rows: rows
            .iter()
            .map(|r| ManifestRow {
                grid: r.grid,
                method: &r.method,
                status: &r.status,
                bound_respected: r.bound_respected,
                excess: &r.excess,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&m)?)
}

/// Writes `results.csv`, `results.dat` and `meta.json` into `dir`.
pub fn write_outputs(rows: &[ResultRow], cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_results_csv(rows, std::fs::File::create(dir.join("results.csv"))?)?;
    std::fs::write(dir.join("results.dat"), gnuplot_data(rows, cfg))?;
    std::fs::write(dir.join("meta.json"), manifest_json(rows, cfg)?)?;
    Ok(())
}
