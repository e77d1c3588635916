//! Robust centers for the moment class: coordinate-wise trimmed mean,
//! iterative filtering, and σ selection by doubling.

use nalgebra::DMatrix;

use crate::error::{check_range, Error, Result};
use crate::measures::{check_dim, sq_dist, top_eigen, DiscreteMeasure, Point, TransportMask};
use crate::par::{self, Execution};
use crate::reformulate::{build_inner_dual, AmbiguitySpec, SamplePieces};
use crate::robust_ot::trimmed_mean_1d;

/// Trim fraction per tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimSpec {
    pub gamma: f64,
}

impl Default for TrimSpec {
    fn default() -> Self {
        TrimSpec { gamma: 1.0 / 3.0 }
    }
}

/// Coordinate-wise γ-trimmed mean.
pub fn trimmed_mean(data: &DiscreteMeasure, spec: TrimSpec) -> Result<Point> {
    if data.len() < 3 {
        return Err(Error::Invalid(format!(
            "trimmed mean needs at least 3 samples, got {}",
            data.len()
        )));
    }
    check_range("gamma", spec.gamma, (0.0..0.5).contains(&spec.gamma), "[0, 1/2)")?;
    let coords = par::map_range(Execution::default(), data.dim(), |k| {
        trimmed_mean_1d(&data.marginal(k)?, spec.gamma)
    });
    Point::new(coords.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOptions {
    /// Stop once the top eigenvalue of the weighted covariance is at most this.
    pub threshold: f64,
    /// Drop the ε/120 fraction of points farthest from their nearest
    /// neighbour before filtering.
    pub pretrim: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            threshold: 9.0,
            pretrim: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Unnormalized weights; start at the data weights and only shrink.
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub lambda_max: f64,
    /// λmax at the start of every iteration.
    pub history: Vec<f64>,
}

impl FilterState {
    pub fn removed(&self, data: &DiscreteMeasure) -> f64 {
        data.weights().iter().zip(&self.weights).map(|(a, b)| a - b).sum()
    }
}

pub const MAX_FILTER_EPS: f64 = 1.0 / 12.0;

fn weighted_mean_cov(data: &DiscreteMeasure, w: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let d = data.dim();
    let total: f64 = w.iter().sum();
    let mut mean = vec![0.0; d];
    for (z, &wi) in data.support().iter().zip(w) {
        for k in 0..d {
            mean[k] += wi * z[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (z, &wi) in data.support().iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for k in 0..d {
            diff[k] = z[k] - mean[k];
        }
        for c in 0..d {
            let s = wi * diff[c] / total;
            for r in c..d {
                cov[(r, c)] += s * diff[r];
            }
        }
    }
    cov.fill_upper_triangle_with_lower_triangle();
    (mean, cov)
}

fn pretrim_weights(data: &DiscreteMeasure, eps: f64) -> Vec<f64> {
    let mut w = data.weights().to_vec();
    let n = data.len();
    let drop = (eps / 120.0 * n as f64).floor() as usize;
    if drop == 0 || n < 2 {
        return w;
    }
    let pts = data.support();
    let nn: Vec<f64> = par::map_range(Execution::default(), n, |i| {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist(pts[i].coords(), pts[j].coords()))
            .fold(f64::INFINITY, f64::min)
    });
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nn[b].total_cmp(&nn[a]));
    for &i in &order[..drop] {
        w[i] = 0.0;
    }
    w
}

/// Spectral filtering. Each round removes mass max(1/n, ε/8) from the points
/// with the largest squared projection on the top eigenvector; at most 2ε in
/// total is removed.
pub fn iterative_filter(data: &DiscreteMeasure, eps: f64, opts: &FilterOptions) -> Result<(Point, FilterState)> {
    if data.is_empty() {
        return Err(Error::Empty("data"));
    }
    check_range("eps", eps, (0.0..=MAX_FILTER_EPS).contains(&eps), "[0, 1/12]")?;
    check_range("threshold", opts.threshold, opts.threshold > 0.0, "(0, inf)")?;
    let n = data.len();
    let mut w = if opts.pretrim {
        pretrim_weights(data, eps)
    } else {
        data.weights().to_vec()
    };
    let unit = (1.0 / n as f64).max(eps / 8.0);
    let max_removed = 2.0 * eps;
    let mut removed = data.weights().iter().zip(&w).map(|(a, b)| a - b).sum::<f64>();
    let mut history = Vec::new();
    loop {
        let (mean, cov) = weighted_mean_cov(data, &w);
        let (lmax, v) = top_eigen(&cov);
        history.push(lmax);
        let done = lmax <= opts.threshold;
        if done || removed + unit > max_removed + 1e-12 {
            if !done {
                log::debug!("filter stopped on its removal budget with lambda_max = {lmax}");
            }
            let center = if removed == 0.0 { data.mean() } else { mean };
            let state = FilterState {
                weights: w,
                iterations: history.len(),
                lambda_max: lmax,
                history,
            };
            return Ok((Point::new(center)?, state));
        }
        let scores: Vec<f64> = data
            .support()
            .iter()
            .map(|z| {
                let proj: f64 = (0..z.dim()).map(|k| (z[k] - mean[k]) * v[k]).sum();
                proj * proj
            })
            .collect();
        let mut order: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut left = unit;
        for i in order {
            let take = w[i].min(left);
            w[i] -= take;
            left -= take;
            if left <= 0.0 {
                break;
            }
        }
        removed += unit - left;
        if w.iter().all(|&x| x <= 0.0) {
            return Err(Error::Invalid("filter removed all mass".into()));
        }
    }
}

pub fn iterative_filter_mean(data: &DiscreteMeasure, eps: f64) -> Result<Point> {
    Ok(iterative_filter(data, eps, &FilterOptions::default())?.0)
}

/// Smallest σ = σ_lo·2^i ≤ σ_hi for which the zero-loss inner dual solves,
/// i.e. the ambiguity set built by `make_spec(σ)` is nonempty.
pub fn tune_sigma(
    data: &DiscreteMeasure,
    mask: &TransportMask,
    sigma_lo: f64,
    sigma_hi: f64,
    make_spec: impl Fn(f64) -> AmbiguitySpec,
) -> Result<f64> {
    check_dim(mask.dim(), data.dim())?;
    check_range("sigma_lo", sigma_lo, sigma_lo > 0.0 && sigma_lo.is_finite(), "(0, inf)")?;
    if !(sigma_hi >= sigma_lo) {
        return Err(Error::Invalid(format!("empty sigma bracket [{sigma_lo}, {sigma_hi}]")));
    }
    let pieces = SamplePieces::uniform(mask.clone(), vec![(vec![0.0; mask.num_transported()], 0.0)], data.len())?;
    let mut sigma = sigma_lo;
    while sigma <= sigma_hi * (1.0 + 1e-12) {
        if sigma_feasible(&pieces, data, &make_spec(sigma))? {
            return Ok(sigma);
        }
        sigma *= 2.0;
    }
    Err(Error::Invalid(format!("no feasible sigma in [{sigma_lo}, {sigma_hi}]")))
}

/// Whether the zero-loss inner dual for `spec` reaches optimality.
pub fn sigma_feasible(pieces: &SamplePieces, data: &DiscreteMeasure, spec: &AmbiguitySpec) -> Result<bool> {
    match build_inner_dual(pieces, data, spec)?.solve() {
        Ok(_) => Ok(true),
        Err(Error::Solve { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{empirical, Order};
    use crate::reformulate::MomentFamily;

    fn line(xs: &[f64]) -> DiscreteMeasure {
        empirical(xs.iter().map(|&x| Point::new(vec![x]).unwrap()).collect()).unwrap()
    }

    #[test]
    fn trimmed_mean_examples() {
        let m = line(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!((trimmed_mean(&m, TrimSpec::default()).unwrap()[0] - 3.5).abs() < 1e-12);
        let sym = DiscreteMeasure::from_rows(
            vec![vec![1.0, -2.0], vec![3.0, 0.0], vec![2.0, -1.0], vec![5.0, 9.0]],
            vec![0.25; 4],
        )
        .unwrap();
        let t = trimmed_mean(&sym, TrimSpec { gamma: 0.25 }).unwrap();
        assert!((t[0] - 2.5).abs() < 1e-12 && (t[1] + 0.5).abs() < 1e-12);
        assert!(trimmed_mean(&line(&[1.0, 2.0]), TrimSpec::default()).is_err());
        assert!(trimmed_mean(&m, TrimSpec { gamma: 0.5 }).is_err());
    }

    #[test]
    fn filter_without_outliers_is_the_mean() {
        let m = line(&[0.1, -0.4, 0.3, 1.0, -1.2]);
        let (z, st) = iterative_filter(&m, 0.0, &FilterOptions::default()).unwrap();
        assert_eq!(z.coords(), m.mean().as_slice());
        assert_eq!(st.iterations, 1);
        assert!(iterative_filter_mean(&m, 0.1).is_err());
    }

    #[test]
    fn filter_removes_far_point() {
        let mut xs: Vec<f64> = (0..24).map(|i| (i as f64 - 11.5) / 12.0).collect();
        xs.push(1e3);
        xs.push(1e3);
        let m = line(&xs);
        let (z, st) = iterative_filter(&m, 1.0 / 12.0, &FilterOptions::default()).unwrap();
        assert!(z[0].abs() < 0.2, "{}", z[0]);
        assert!(st.removed(&m) <= 2.0 / 12.0 + 1e-12);
        assert!(st.history.windows(2).all(|h| h[1] <= h[0] + 1e-9));
    }

    #[test]
    fn tune_sigma_finds_moment() {
        // Second moment about 0 is exactly 4.
        let m = line(&[2.0, -2.0, 2.0, -2.0]);
        let make = |s| AmbiguitySpec::new(Order::Two, 0.0, 1e-3, MomentFamily::G2, s, vec![0.0]);
        let s = tune_sigma(&m, &TransportMask::all(1), 0.25, 64.0, make).unwrap();
        assert!(s == 2.0 || s == 4.0, "{s}");
        let s2 = tune_sigma(&m, &TransportMask::all(1), 0.125, 64.0, make).unwrap();
        assert_eq!(s, s2);
        assert!(tune_sigma(&m, &TransportMask::all(1), 0.25, 1.0, make).is_err());
    }
}
