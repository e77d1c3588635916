//! Shared helpers for the integration tests.

use nalgebra::{DMatrix, DVector};
use orwdro::{DiscreteMeasure, GroundCost};

/// Linear program `min cᵀx` s.t. `A_eq x = b_eq`, `A_le x ≤ b_le`, solved by
/// enumerating every basic solution. Equalities must be linearly independent.
pub struct TinyLp {
    pub c: Vec<f64>,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub le: Vec<(Vec<f64>, f64)>,
}

impl TinyLp {
    pub fn new(c: Vec<f64>) -> Self {
        let n = c.len();
        let le = (0..n)
            .map(|k| {
                let mut a = vec![0.0; n];
                a[k] = -1.0;
                (a, 0.0)
            })
            .collect();
        TinyLp { c, eq: Vec::new(), le }
    }

    pub fn solve(&self) -> Option<f64> {
        let n = self.c.len();
        let free = n - self.eq.len();
        let mut best: Option<f64> = None;
        for subset in combinations(self.le.len(), free) {
            let rows: Vec<&(Vec<f64>, f64)> = self.eq.iter().chain(subset.iter().map(|&k| &self.le[k])).collect();
            let a = DMatrix::from_fn(n, n, |i, j| rows[i].0[j]);
            let b = DVector::from_iterator(n, rows.iter().map(|r| r.1));
            let Some(x) = a.lu().solve(&b) else { continue };
            let dot = |row: &[f64]| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
            let feasible =
                self.eq.iter().all(|(r, b)| (dot(r) - b).abs() < 1e-9) && self.le.iter().all(|(r, b)| dot(r) <= b + 1e-9);
            if feasible {
                let v = dot(&self.c);
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
        }
        best
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub enum Kind {
    Exact,
    TwoSided(f64),
    OneSided(f64),
}

/// Enumeration oracle for the p-th power of each transport distance.
pub fn oracle(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &GroundCost, kind: Kind) -> f64 {
    let (n, m) = (mu.len(), nu.len());
    let mut c = Vec::new();
    for a in mu.support() {
        for b in nu.support() {
            c.push(cost.cost(a.coords(), b.coords()).unwrap());
        }
    }
    let row = |i: usize| (0..n * m).map(|v| if v / m == i { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let col = |j: usize| (0..n * m).map(|v| if v % m == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let mut lp = TinyLp::new(c);
    match kind {
        Kind::Exact => {
            // The last column constraint is implied by the rest.
            (0..n).for_each(|i| lp.eq.push((row(i), mu.weights()[i])));
            (0..m - 1).for_each(|j| lp.eq.push((col(j), nu.weights()[j])));
        }
        Kind::TwoSided(eps) => {
            lp.eq.push((vec![1.0; n * m], 1.0 - eps));
            (0..n).for_each(|i| lp.le.push((row(i), mu.weights()[i])));
            (0..m).for_each(|j| lp.le.push((col(j), nu.weights()[j])));
        }
        Kind::OneSided(eps) => {
            (0..m).for_each(|j| lp.eq.push((col(j), nu.weights()[j])));
            (0..n).for_each(|i| lp.le.push((row(i), mu.weights()[i] / (1.0 - eps))));
        }
    }
    lp.solve().expect("oracle LP is feasible")
}
