//! Discrete probability measures on ℝᵈ.
//!
//! A [`DiscreteMeasure`] is a list of atoms with nonnegative weights summing
//! to one. Duplicate atoms are kept as separate entries: downstream programs
//! index one block of dual variables per sample, so atom identity matters.
//!
//! Some coordinates may be pinned (e.g. class labels): a [`TransportMask`]
//! marks which coordinates participate in the transport norm. Moving mass
//! between atoms whose pinned coordinates differ is infeasible.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

/// Tolerance under which weights are silently renormalized.
pub const WEIGHT_RENORM_TOL: f64 = 1e-9;
/// Slack used by [`centered_covariance_cap_check`].
pub const COV_CAP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(Point(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Point(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn translated(&self, v: &[f64]) -> Point {
        Point(self.0.iter().zip(v).map(|(a, b)| a + b).collect())
    }
}

impl std::ops::Index<usize> for Point {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    support: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure, renormalizing weights that are off by at most
    /// [`WEIGHT_RENORM_TOL`] and rejecting anything further off.
    pub fn new(support: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("measure support"));
        }
        if support.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                got: weights.len(),
            });
        }
        let dim = support[0].dim();
        for p in &support {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.dim(),
                });
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_RENORM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(DiscreteMeasure { support, weights })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let support = rows.into_iter().map(Point::new).collect::<Result<Vec<_>>>()?;
        Self::new(support, weights)
    }

    pub fn dirac(point: Point) -> Self {
        DiscreteMeasure {
            support: vec![point],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&Point, f64)> {
        self.support.iter().zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, w) in self.atoms() {
            for (mk, x) in m.iter_mut().zip(p.coords()) {
                *mk += w * x;
            }
        }
        m
    }

    /// Expectation of `f` under the measure.
    pub fn expect(&self, mut f: impl FnMut(&Point) -> f64) -> f64 {
        self.atoms().map(|(p, w)| w * f(p)).sum()
    }

    /// Pushforward of each atom through `f`, weights unchanged.
    pub fn map_points(&self, mut f: impl FnMut(&Point) -> Point) -> Result<Self> {
        Self::new(self.support.iter().map(&mut f).collect(), self.weights.clone())
    }

    /// One-dimensional marginal along coordinate `k`.
    pub fn marginal(&self, k: usize) -> Result<Self> {
        if k >= self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: k,
            });
        }
        self.map_points(|p| Point(vec![p[k]]))
    }

    pub fn translated(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        self.map_points(|p| p.translated(v))
    }
}

/// Uniform measure over the given points; duplicates are kept.
pub fn empirical(points: Vec<Point>) -> Result<DiscreteMeasure> {
    if points.is_empty() {
        return Err(Error::Empty("point list"));
    }
    let n = points.len();
    DiscreteMeasure::new(points, vec![1.0 / n as f64; n])
}

/// Σᵢ wᵢ‖zᵢ − z₀‖².
pub fn second_moment_about(m: &DiscreteMeasure, z0: &Point) -> Result<f64> {
    check_dim(m.dim(), z0.dim())?;
    Ok(m.expect(|p| sq_dist(p.coords(), z0.coords())))
}

/// Centered second-moment matrix M = Σ wᵢ(zᵢ−z₀)(zᵢ−z₀)ᵀ.
pub fn centered_second_moment(m: &DiscreteMeasure, z0: &Point) -> Result<DMatrix<f64>> {
    check_dim(m.dim(), z0.dim())?;
    let d = m.dim();
    let mut mat = DMatrix::zeros(d, d);
    for (p, w) in m.atoms() {
        let diff: Vec<f64> = p.coords().iter().zip(z0.coords()).map(|(a, b)| a - b).collect();
        for r in 0..d {
            for c in 0..d {
                mat[(r, c)] += w * diff[r] * diff[c];
            }
        }
    }
    Ok(mat)
}

/// Checks E[(Z−z₀)(Z−z₀)ᵀ] ⪯ σ²I. Returns the verdict and λmax.
pub fn centered_covariance_cap_check(m: &DiscreteMeasure, z0: &Point, sigma: f64) -> Result<(bool, f64)> {
    check_range("sigma", sigma, sigma > 0.0, "(0, inf)")?;
    let mat = centered_second_moment(m, z0)?;
    let lmax = top_eigen(&mat).0;
    Ok((lmax <= sigma * sigma + COV_CAP_SLACK, lmax))
}

/// Largest eigenvalue and a unit eigenvector of a symmetric matrix.
pub fn top_eigen(mat: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(mat.clone());
    let (idx, lmax) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    (lmax, eig.eigenvectors.column(idx).iter().copied().collect())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Which coordinates take part in the transport norm. Non-transported
/// coordinates carry infinite movement cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportMask {
    transported: Vec<bool>,
}

impl TransportMask {
    pub fn new(transported: Vec<bool>) -> Result<Self> {
        if !transported.iter().any(|&t| t) {
            return Err(Error::Invalid("mask must transport at least one coordinate".into()));
        }
        Ok(TransportMask { transported })
    }

    pub fn all(dim: usize) -> Self {
        TransportMask {
            transported: vec![true; dim],
        }
    }

    /// Transports the first `n_transported` coordinates, pins the rest.
    pub fn leading(dim: usize, n_transported: usize) -> Result<Self> {
        Self::new((0..dim).map(|k| k < n_transported).collect())
    }

    pub fn dim(&self) -> usize {
        self.transported.len()
    }

    pub fn is_transported(&self, k: usize) -> bool {
        self.transported[k]
    }

    pub fn flags(&self) -> &[bool] {
        &self.transported
    }

    pub fn transported_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| self.transported[k]).collect()
    }

    pub fn fixed_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| !self.transported[k]).collect()
    }

    pub fn num_transported(&self) -> usize {
        self.transported.iter().filter(|&&t| t).count()
    }

    pub fn is_full(&self) -> bool {
        self.transported.iter().all(|&t| t)
    }

    /// Splits a point into (transported block, fixed block).
    pub fn split(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::with_capacity(self.num_transported());
        let mut f = Vec::new();
        for (k, &x) in z.iter().enumerate() {
            if self.transported[k] {
                t.push(x);
            } else {
                f.push(x);
            }
        }
        (t, f)
    }

    /// Inverse of [`TransportMask::split`].
    pub fn join(&self, transported: &[f64], fixed: &[f64]) -> Vec<f64> {
        let (mut ti, mut fi) = (0, 0);
        (0..self.dim())
            .map(|k| {
                if self.transported[k] {
                    ti += 1;
                    transported[ti - 1]
                } else {
                    fi += 1;
                    fixed[fi - 1]
                }
            })
            .collect()
    }
}

/// Transport order p ∈ {1, 2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    One,
    Two,
}

impl Order {
    pub fn value(self) -> f64 {
        match self {
            Order::One => 1.0,
            Order::Two => 2.0,
        }
    }

    pub fn from_int(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Order::One),
            2 => Ok(Order::Two),
            _ => Err(Error::Unsupported(format!("transport order p = {p}"))),
        }
    }

    pub fn pow(self, x: f64) -> f64 {
        match self {
            Order::One => x,
            Order::Two => x * x,
        }
    }

    /// Inverse of [`Order::pow`] on [0, ∞); tiny negative solver noise maps to 0.
    pub fn root(self, x: f64) -> f64 {
        let x = x.max(0.0);
        match self {
            Order::One => x,
            Order::Two => x.sqrt(),
        }
    }
}

/// Ground cost ‖masked difference‖ᵖ, infinite across pinned-coordinate mismatch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCost {
    pub p: Order,
    pub mask: TransportMask,
}

impl GroundCost {
    pub fn euclidean(p: Order, dim: usize) -> Self {
        GroundCost {
            p,
            mask: TransportMask::all(dim),
        }
    }

    /// `None` when the pinned coordinates differ.
    pub fn cost(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        let mut sq = 0.0;
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            if self.mask.is_transported(k) {
                sq += (x - y) * (x - y);
            } else if x != y {
                return None;
            }
        }
        Some(match self.p {
            Order::One => sq.sqrt(),
            Order::Two => sq,
        })
    }
}

/// A dataset read from CSV: rows plus the transport mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub mask: TransportMask,
}

const MASK_PREFIX: &str = "# transported:";

impl Dataset {
    pub fn dim(&self) -> usize {
        self.mask.dim()
    }

    pub fn to_measure(&self) -> Result<DiscreteMeasure> {
        empirical(self.rows.iter().cloned().map(Point::new).collect::<Result<_>>()?)
    }

    pub fn from_measure(m: &DiscreteMeasure, mask: TransportMask) -> Self {
        Dataset {
            rows: m.support().iter().map(|p| p.coords().to_vec()).collect(),
            mask,
        }
    }

    /// Reads the CSV dataset format: one numeric row per sample, optionally
    /// preceded by a `# transported: 1,1,0` mask line. Other `#` lines are
    /// comments.
    pub fn read(reader: impl BufRead) -> Result<Self> {
        let (mask, rows) = read_rows(reader)?;
        let dim = rows.first().map(|r| r.len()).ok_or(Error::Empty("dataset rows"))?;
        let mask = match mask {
            Some(m) => {
                check_dim(dim, m.dim())?;
                m
            }
            None => TransportMask::all(dim),
        };
        Ok(Dataset { rows, mask })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        if !self.mask.is_full() {
            writeln!(w, "{} {}", MASK_PREFIX, mask_string(&self.mask))?;
        }
        let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for r in &self.rows {
            cw.write_record(r.iter().map(|x| format_float(*x)))?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }
}

/// Writes a weighted measure: the dataset format with an extra trailing
/// `weight` column announced by a `# weight column: last` comment.
pub fn write_weighted(m: &DiscreteMeasure, mask: &TransportMask, mut w: impl Write) -> Result<()> {
    if !mask.is_full() {
        writeln!(w, "{} {}", MASK_PREFIX, mask_string(mask))?;
    }
    writeln!(w, "# weight column: last")?;
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for (p, wt) in m.atoms() {
        let mut rec: Vec<String> = p.coords().iter().map(|x| format_float(*x)).collect();
        rec.push(format_float(wt));
        cw.write_record(rec)?;
    }
    cw.flush()?;
    Ok(())
}

/// Reads the output of [`write_weighted`].
pub fn read_weighted(reader: impl BufRead) -> Result<(DiscreteMeasure, TransportMask)> {
    let (mask, rows) = read_rows(reader)?;
    let mut pts = Vec::with_capacity(rows.len());
    let mut ws = Vec::with_capacity(rows.len());
    for mut r in rows {
        let w = r.pop().ok_or(Error::Empty("weighted row"))?;
        pts.push(Point::new(r)?);
        ws.push(w);
    }
    let m = DiscreteMeasure::new(pts, ws)?;
    let mask = mask.unwrap_or_else(|| TransportMask::all(m.dim()));
    check_dim(m.dim(), mask.dim())?;
    Ok((m, mask))
}

fn read_rows(reader: impl BufRead) -> Result<(Option<TransportMask>, Vec<Vec<f64>>)> {
    let mut mask = None;
    let mut body = String::new();
    let mut line_nos = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix(MASK_PREFIX) {
            let flags = rest
                .split(',')
                .map(|t| match t.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Parse {
                        line: i + 1,
                        msg: format!("mask entry {other:?} is not 0 or 1"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            mask = Some(TransportMask::new(flags)?);
        } else if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        } else {
            body.push_str(trimmed);
            body.push('\n');
            line_nos.push(i + 1);
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for (rec, &line) in rdr.records().zip(&line_nos) {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("{s:?} is not a finite number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok((mask, rows))
}

fn mask_string(mask: &TransportMask) -> String {
    mask.flags()
        .iter()
        .map(|&t| if t { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(",")
}

/// Shortest decimal that round-trips exactly.
fn format_float(x: f64) -> String {
    format!("{x:?}")
}
