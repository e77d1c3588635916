//! Piecewise max-affine losses ℓ_θ(z) = max_j a_j(θ)ᵀ z_T + b_j(θ).
//!
//! Each coefficient is an [`AffineMap`] in θ whose matrix and vector may
//! depend affinely on the sample's pinned block z_F (the hinge loss reads the
//! label this way). For every fixed z_F the pieces are affine in θ, which is
//! what lets the reformulation keep θ as a decision variable.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{check_dim, DiscreteMeasure, TransportMask};

/// Piece-count cap for the L1 multiregression family (2^k pieces).
pub const MAX_MULTIREG_OUTPUTS: usize = 12;

/// θ ↦ (M₀ + Σ_f z_F[f] M_f) θ + (v₀ + Σ_f z_F[f] v_f).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub vector: DVector<f64>,
    /// One (matrix, vector) pair per pinned coordinate, possibly empty.
    pub fixed: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl AffineMap {
    pub fn constant(vector: DVector<f64>, theta_dim: usize) -> Self {
        AffineMap {
            matrix: DMatrix::zeros(vector.len(), theta_dim),
            vector,
            fixed: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.vector.len()
    }

    /// The map specialised to a pinned block: (matrix, vector).
    pub fn at(&self, z_fixed: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let mut m = self.matrix.clone();
        let mut v = self.vector.clone();
        for ((mf, vf), &zf) in self.fixed.iter().zip(z_fixed) {
            if zf != 0.0 {
                m += mf * zf;
                v += vf * zf;
            }
        }
        (m, v)
    }

    pub fn eval(&self, theta: &DVector<f64>, z_fixed: &[f64]) -> DVector<f64> {
        let (m, v) = self.at(z_fixed);
        m * theta + v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    /// a_j, one row per transported coordinate.
    pub slope: AffineMap,
    /// b_j, a single row.
    pub offset: AffineMap,
}

/// A piece specialised to a pinned block, still affine in θ:
/// a(θ) = slope θ + slope0, b(θ) = offsetᵀ θ + offset0.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaAffinePiece {
    pub slope: DMatrix<f64>,
    pub slope0: DVector<f64>,
    pub offset: DVector<f64>,
    pub offset0: f64,
}

impl ThetaAffinePiece {
    pub fn at(&self, theta: &DVector<f64>) -> (Vec<f64>, f64) {
        let a = &self.slope * theta + &self.slope0;
        (a.iter().copied().collect(), self.offset.dot(theta) + self.offset0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mad,
    Hinge,
    L1Multiregression,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossFamily {
    pub kind: LossKind,
    pub pieces: Vec<AffinePiece>,
    pub theta_dim: usize,
    pub mask: TransportMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeminormReport {
    pub lipschitz: f64,
    pub sobolev12: f64,
}

/// A piece linear in the whole sample z: ℓ_j(z) = (A θ + a)ᵀ z + bᵀθ + c,
/// with A of size d × t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPiece {
    pub a_matrix: Vec<Vec<f64>>,
    pub a_vector: Vec<f64>,
    #[serde(default)]
    pub b_vector: Vec<f64>,
    #[serde(default)]
    pub b_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CustomFile {
    theta_dim: usize,
    dim: usize,
    #[serde(default)]
    transported: Option<Vec<bool>>,
    pieces: Vec<LinearPiece>,
}

impl LossFamily {
    /// Builds a family from pieces linear in z, routing pinned rows into the
    /// offset so the transported slope stays a plain affine map of θ.
    pub fn from_linear_pieces(kind: LossKind, theta_dim: usize, mask: TransportMask, pieces: &[LinearPiece]) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Empty("loss pieces"));
        }
        let d = mask.dim();
        let transported = mask.transported_indices();
        let fixed = mask.fixed_indices();
        let mut out = Vec::with_capacity(pieces.len());
        for p in pieces {
            check_dim(d, p.a_vector.len())?;
            check_dim(d, p.a_matrix.len())?;
            for row in &p.a_matrix {
                check_dim(theta_dim, row.len())?;
            }
            let b_vec = if p.b_vector.is_empty() {
                vec![0.0; theta_dim]
            } else {
                check_dim(theta_dim, p.b_vector.len())?;
                p.b_vector.clone()
            };
            if p.a_matrix
                .iter()
                .flatten()
                .chain(&p.a_vector)
                .chain(&b_vec)
                .any(|x| !x.is_finite())
                || !p.b_constant.is_finite()
            {
                return Err(Error::NonFinite("loss piece"));
            }
            let slope = AffineMap {
                matrix: DMatrix::from_fn(transported.len(), theta_dim, |r, c| p.a_matrix[transported[r]][c]),
                vector: DVector::from_iterator(transported.len(), transported.iter().map(|&k| p.a_vector[k])),
                fixed: Vec::new(),
            };
            let offset = AffineMap {
                matrix: DMatrix::from_row_slice(1, theta_dim, &b_vec),
                vector: DVector::from_element(1, p.b_constant),
                fixed: fixed
                    .iter()
                    .map(|&k| {
                        (
                            DMatrix::from_row_slice(1, theta_dim, &p.a_matrix[k]),
                            DVector::from_element(1, p.a_vector[k]),
                        )
                    })
                    .collect(),
            };
            out.push(AffinePiece { slope, offset });
        }
        Ok(LossFamily {
            kind,
            pieces: out,
            theta_dim,
            mask,
        })
    }

    /// |θᵀx − y| on z = (x, y) with x ∈ ℝ^{dx}.
    pub fn mad(dx: usize, mask: TransportMask) -> Result<Self> {
        check_dim(dx + 1, mask.dim())?;
        let pieces = [1.0, -1.0].map(|s| {
            let mut a_matrix = vec![vec![0.0; dx]; dx + 1];
            for (k, row) in a_matrix.iter_mut().take(dx).enumerate() {
                row[k] = s;
            }
            let mut a_vector = vec![0.0; dx + 1];
            a_vector[dx] = -s;
            LinearPiece {
                a_matrix,
                a_vector,
                b_vector: Vec::new(),
                b_constant: 0.0,
            }
        });
        Self::from_linear_pieces(LossKind::Mad, dx, mask, &pieces)
    }

    /// max{0, 1 − y θᵀx} on z = (x, y); the label y is pinned.
    pub fn hinge(dx: usize) -> Result<Self> {
        let mask = TransportMask::leading(dx + 1, dx)?;
        let zero = AffinePiece {
            slope: AffineMap::constant(DVector::zeros(dx), dx),
            offset: AffineMap::constant(DVector::zeros(1), dx),
        };
        let margin = AffinePiece {
            slope: AffineMap {
                matrix: DMatrix::zeros(dx, dx),
                vector: DVector::zeros(dx),
                fixed: vec![(-DMatrix::identity(dx, dx), DVector::zeros(dx))],
            },
            offset: AffineMap::constant(DVector::from_element(1, 1.0), dx),
        };
        Ok(LossFamily {
            kind: LossKind::Hinge,
            pieces: vec![zero, margin],
            theta_dim: dx,
            mask,
        })
    }

    /// ‖Mx − y‖₁ = max_{α∈{±1}^k} αᵀ(Mx − y) on z = (x, y), y ∈ ℝᵏ.
    ///
    /// θ is M in row-major order (θ[r·dx + c] = M[r, c]). Piece s uses
    /// α_r = −1 exactly when bit r of s is set.
    pub fn l1_multiregression(dx: usize, k: usize, mask: TransportMask) -> Result<Self> {
        if k == 0 || k > MAX_MULTIREG_OUTPUTS {
            return Err(Error::OutOfRange {
                name: "k",
                value: k as f64,
                range: "[1, 12]",
            });
        }
        check_dim(dx + k, mask.dim())?;
        let t = k * dx;
        let pieces: Vec<LinearPiece> = (0..1usize << k)
            .map(|s| {
                let alpha: Vec<f64> = (0..k).map(|r| if s >> r & 1 == 1 { -1.0 } else { 1.0 }).collect();
                let mut a_matrix = vec![vec![0.0; t]; dx + k];
                for (c, row) in a_matrix.iter_mut().take(dx).enumerate() {
                    for (r, &al) in alpha.iter().enumerate() {
                        row[r * dx + c] = al;
                    }
                }
                let mut a_vector = vec![0.0; dx + k];
                for r in 0..k {
                    a_vector[dx + r] = -alpha[r];
                }
                LinearPiece {
                    a_matrix,
                    a_vector,
                    b_vector: Vec::new(),
                    b_constant: 0.0,
                }
            })
            .collect();
        Self::from_linear_pieces(LossKind::L1Multiregression, t, mask, &pieces)
    }

    /// Parses a custom loss:
    ///
    /// ```json
    /// {"theta_dim": 1, "dim": 2, "transported": [true, true],
    ///  "pieces": [{"a_matrix": [[1], [0]], "a_vector": [0, -1],
    ///              "b_vector": [0], "b_constant": 0}]}
    /// ```
    ///
    /// Piece j is (A θ + a)ᵀ z + bᵀθ + c; A has one row per coordinate of z.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: CustomFile = serde_json::from_str(text)?;
        let mask = match f.transported {
            Some(t) => {
                check_dim(f.dim, t.len())?;
                TransportMask::new(t)?
            }
            None => TransportMask::all(f.dim),
        };
        Self::from_linear_pieces(LossKind::Custom, f.theta_dim, mask, &f.pieces)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.mask.dim()
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_dim(self.theta_dim, theta.len())
    }

    /// (a_j, b_j) for each piece at θ and the given pinned block.
    pub fn pieces_at(&self, theta: &[f64], z_fixed: &[f64]) -> Result<Vec<(Vec<f64>, f64)>> {
        self.check_theta(theta)?;
        check_dim(self.mask.dim() - self.mask.num_transported(), z_fixed.len())?;
        let th = DVector::from_column_slice(theta);
        Ok(self
            .pieces
            .iter()
            .map(|p| {
                let a = p.slope.eval(&th, z_fixed);
                let b = p.offset.eval(&th, z_fixed)[0];
                (a.iter().copied().collect(), b)
            })
            .collect())
    }

    /// Pieces at a pinned block as affine functions of θ.
    pub fn theta_pieces(&self, z_fixed: &[f64]) -> Result<Vec<ThetaAffinePiece>> {
        check_dim(self.mask.dim() - self.mask.num_transported(), z_fixed.len())?;
        Ok(self
            .pieces
            .iter()
            .map(|p| {
                let (slope, slope0) = p.slope.at(z_fixed);
                let (off, off0) = p.offset.at(z_fixed);
                ThetaAffinePiece {
                    slope,
                    slope0,
                    offset: off.row(0).transpose(),
                    offset0: off0[0],
                }
            })
            .collect())
    }

    /// Index of the active piece (lowest index on ties) and the loss value.
    pub fn argmax_piece(&self, theta: &[f64], z: &[f64]) -> Result<(usize, f64)> {
        check_dim(self.dim(), z.len())?;
        let (zt, zf) = self.mask.split(z);
        let pieces = self.pieces_at(theta, &zf)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (j, (a, b)) in pieces.iter().enumerate() {
            let v = a.iter().zip(&zt).map(|(x, y)| x * y).sum::<f64>() + b;
            if v > best.1 {
                best = (j, v);
            }
        }
        Ok(best)
    }

    pub fn evaluate(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        Ok(self.argmax_piece(theta, z)?.1)
    }

    /// E_m[ℓ_θ].
    pub fn expected(&self, theta: &[f64], m: &DiscreteMeasure) -> Result<f64> {
        check_dim(self.dim(), m.dim())?;
        let mut total = 0.0;
        for (z, w) in m.atoms() {
            total += w * self.evaluate(theta, z.coords())?;
        }
        Ok(total)
    }

    /// Lipschitz constant over the transported block (max over pieces and
    /// the sample's pinned blocks) and the Ḣ^{1,2}(sample) seminorm using
    /// the active-piece gradient.
    pub fn seminorms(&self, theta: &[f64], sample: &DiscreteMeasure) -> Result<SeminormReport> {
        check_dim(self.dim(), sample.dim())?;
        let mut lip: f64 = 0.0;
        let mut sob = 0.0;
        for (z, w) in sample.atoms() {
            let (_, zf) = self.mask.split(z.coords());
            let pieces = self.pieces_at(theta, &zf)?;
            let norms: Vec<f64> = pieces
                .iter()
                .map(|(a, _)| a.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            lip = norms.iter().fold(lip, |m, &x| m.max(x));
            let (j, _) = self.argmax_piece(theta, z.coords())?;
            sob += w * norms[j] * norms[j];
        }
        Ok(SeminormReport {
            lipschitz: lip,
            sobolev12: sob.sqrt(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(d: usize) -> TransportMask {
        TransportMask::all(d)
    }

    #[test]
    fn mad_examples() {
        let f = LossFamily::mad(1, full(2)).unwrap();
        assert_eq!(f.evaluate(&[1.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(f.evaluate(&[1.0], &[2.0, 0.0]).unwrap(), 2.0);
        let p = f.pieces_at(&[3.0], &[]).unwrap();
        assert_eq!(p, vec![(vec![3.0, -1.0], 0.0), (vec![-3.0, 1.0], 0.0)]);
        let m = DiscreteMeasure::from_rows(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        let s = f.seminorms(&[1.0], &m).unwrap();
        assert!((s.lipschitz - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mad_with_pinned_label() {
        let f = LossFamily::mad(1, TransportMask::leading(2, 1).unwrap()).unwrap();
        let p = f.pieces_at(&[3.0], &[5.0]).unwrap();
        assert_eq!(p, vec![(vec![3.0], -5.0), (vec![-3.0], 5.0)]);
        assert_eq!(f.evaluate(&[3.0], &[1.0, 5.0]).unwrap(), 2.0);
    }

    #[test]
    fn hinge_examples() {
        let f = LossFamily::hinge(1).unwrap();
        assert_eq!(f.evaluate(&[0.0], &[3.0, -1.0]).unwrap(), 1.0);
        let p = f.pieces_at(&[2.0], &[-1.0]).unwrap();
        assert_eq!(p, vec![(vec![0.0], 0.0), (vec![2.0], 1.0)]);
        let m = DiscreteMeasure::from_rows(vec![vec![0.5, 1.0], vec![-2.0, -1.0]], vec![0.5, 0.5]).unwrap();
        let s = f.seminorms(&[0.0], &m).unwrap();
        assert_eq!(s.lipschitz, 0.0);
    }

    #[test]
    fn l1_multiregression_examples() {
        let f = LossFamily::l1_multiregression(1, 1, full(2)).unwrap();
        let p = f.pieces_at(&[1.0], &[]).unwrap();
        assert_eq!(p, vec![(vec![1.0, -1.0], 0.0), (vec![-1.0, 1.0], 0.0)]);
        let f = LossFamily::l1_multiregression(2, 3, full(5)).unwrap();
        assert_eq!(f.num_pieces(), 8);
        let theta = [1.0, 2.0, 0.0, -1.0, 0.5, 0.5];
        let z = [1.0, -1.0, 0.0, 0.0, 3.0];
        // Mx = (−1, 1, 0); y = (0, 0, 3) → ‖Mx − y‖₁ = 1 + 1 + 3.
        assert!((f.evaluate(&theta, &z).unwrap() - 5.0).abs() < 1e-12);
        assert!(LossFamily::l1_multiregression(1, 13, full(14)).is_err());
    }

    #[test]
    fn custom_json_round_trip() {
        let text = r#"{"theta_dim": 1, "dim": 2,
            "pieces": [{"a_matrix": [[1], [0]], "a_vector": [0, -1]},
                       {"a_matrix": [[-1], [0]], "a_vector": [0, 1]}]}"#;
        let f = LossFamily::from_json(text).unwrap();
        let mad = LossFamily::mad(1, full(2)).unwrap();
        for z in [[2.0, 0.0], [1.0, 4.0], [-3.0, 0.5]] {
            assert_eq!(f.evaluate(&[1.5], &z).unwrap(), mad.evaluate(&[1.5], &z).unwrap());
        }
        assert!(LossFamily::from_json(r#"{"theta_dim": 1, "dim": 2, "pieces": []}"#).is_err());
        assert!(LossFamily::from_json(
            r#"{"theta_dim": 2, "dim": 2, "pieces": [{"a_matrix": [[1], [0]], "a_vector": [0, -1]}]}"#
        )
        .is_err());
    }

    #[test]
    fn ties_pick_lowest_index() {
        let f = LossFamily::mad(1, full(2)).unwrap();
        assert_eq!(f.argmax_piece(&[1.0], &[1.0, 1.0]).unwrap().0, 0);
    }

    #[test]
    fn theta_pieces_agree_with_pieces_at() {
        let f = LossFamily::hinge(2).unwrap();
        let th = DVector::from_vec(vec![0.3, -1.2]);
        let direct = f.pieces_at(th.as_slice(), &[-1.0]).unwrap();
        let affine: Vec<_> = f.theta_pieces(&[-1.0]).unwrap().iter().map(|p| p.at(&th)).collect();
        assert_eq!(direct, affine);
    }

    #[test]
    fn dimension_errors() {
        let f = LossFamily::mad(2, full(3)).unwrap();
        assert!(f.evaluate(&[1.0], &[0.0, 0.0, 0.0]).is_err());
        assert!(f.evaluate(&[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(LossFamily::mad(2, full(2)).is_err());
    }
}
