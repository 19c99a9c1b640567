//! Dense and block tri-diagonal factorizations.
//!
//! The tri-diagonal recursion never forms an explicit inverse of a Schur
//! block: `R' M^{-1} R` is evaluated as `Y' Y` with `Y = U^{-1} R` and
//! `M = U U'`.

use nalgebra::SymmetricEigen;
use thiserror::Error;

use crate::model::Matrix;

/// Relative asymmetry tolerated by symmetric-input routines before the
/// input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Relative pivot floor for accepting a Cholesky pivot.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("block tri-diagonal matrix is not positive definite: Schur block {block} fails at pivot {pivot}")]
    BlockNotPositiveDefinite { block: usize, pivot: usize },
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("block dimensions are inconsistent: {0}")]
    DimensionMismatch(String),
}

/// Induced infinity norm (max absolute row sum).
pub fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Returns `(S + S')/2`, rejecting non-square, non-finite or visibly
/// asymmetric input.
pub fn symmetrize(s: &Matrix) -> Result<Matrix, LinalgError> {
    if !s.is_square() {
        return Err(LinalgError::NotSquare(s.nrows(), s.ncols()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let skew = max_abs(&(s - s.transpose()));
    let scale = max_abs(s).max(f64::MIN_POSITIVE);
    if skew > SYMMETRY_TOL * scale {
        return Err(LinalgError::Asymmetric(skew / scale));
    }
    Ok((s + s.transpose()) * 0.5)
}

/// Lower-triangular `L` with positive diagonal and `L L' = P`.
///
/// A pivot is accepted iff it exceeds `1e-12 * max(1, ||P||_inf)`.
pub fn cholesky_lower(p: &Matrix) -> Result<Matrix, LinalgError> {
    let p = symmetrize(p)?;
    let n = p.nrows();
    let floor = PIVOT_TOL * norm_inf(&p).max(1.0);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = p[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// Solves `L' X = B` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &Matrix, b: &Matrix) -> Matrix {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// Sorted eigenvalues of a symmetric matrix.
pub fn eigenvalues_sym(s: &Matrix) -> Result<Vec<f64>, LinalgError> {
    let s = symmetrize(s)?;
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Smallest eigenvalue; `+inf` for an empty matrix.
pub fn min_eigen_sym(s: &Matrix) -> Result<f64, LinalgError> {
    Ok(eigenvalues_sym(s)?
        .first()
        .copied()
        .unwrap_or(f64::INFINITY))
}

/// Symmetric block tri-diagonal matrix.
///
/// `upper[k]` sits at block position `(k, k+1)`; its transpose fills
/// `(k+1, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTriDiagonal {
    diag: Vec<Matrix>,
    upper: Vec<Matrix>,
}

impl BlockTriDiagonal {
    pub fn new(diag: Vec<Matrix>, upper: Vec<Matrix>) -> Result<Self, LinalgError> {
        if diag.is_empty() {
            return Err(LinalgError::DimensionMismatch("no diagonal blocks".into()));
        }
        if upper.len() + 1 != diag.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} diagonal blocks need {} coupling blocks, got {}",
                diag.len(),
                diag.len() - 1,
                upper.len()
            )));
        }
        let diag = diag.iter().map(symmetrize).collect::<Result<Vec<_>, _>>()?;
        for (k, r) in upper.iter().enumerate() {
            let expected = (diag[k].nrows(), diag[k + 1].nrows());
            if r.shape() != expected {
                return Err(LinalgError::DimensionMismatch(format!(
                    "coupling block {} is {:?}, expected {:?}",
                    k + 2,
                    r.shape(),
                    expected
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(LinalgError::NonFinite);
            }
        }
        Ok(Self { diag, upper })
    }

    pub fn diag_blocks(&self) -> &[Matrix] {
        &self.diag
    }

    pub fn upper_blocks(&self) -> &[Matrix] {
        &self.upper
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.diag.iter().map(|d| d.nrows()).collect()
    }

    pub fn to_dense(&self) -> Matrix {
        let sizes = self.block_sizes();
        let off = crate::model::offsets(&sizes);
        let n: usize = sizes.iter().sum();
        let mut out = Matrix::zeros(n, n);
        for (k, d) in self.diag.iter().enumerate() {
            out.view_mut((off[k], off[k]), d.shape()).copy_from(d);
        }
        for (k, r) in self.upper.iter().enumerate() {
            out.view_mut((off[k], off[k + 1]), r.shape()).copy_from(r);
            out.view_mut((off[k + 1], off[k]), (r.ncols(), r.nrows()))
                .copy_from(&r.transpose());
        }
        out
    }
}

/// Block Cholesky factor of a block tri-diagonal matrix.
///
/// `u[k]` are the diagonal factors, `v[k]` the sub-diagonal factors
/// (`v[0]` belongs to block row 1), and `m[k] = u[k] u[k]'` the Schur
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TriDiagFactor {
    pub u: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub m: Vec<Matrix>,
}

impl TriDiagFactor {
    /// The full lower-triangular factor `L` with `L L' = P`.
    pub fn to_dense_lower(&self) -> Matrix {
        let sizes: Vec<usize> = self.u.iter().map(|u| u.nrows()).collect();
        let off = crate::model::offsets(&sizes);
        let n: usize = sizes.iter().sum();
        let mut l = Matrix::zeros(n, n);
        for (k, u) in self.u.iter().enumerate() {
            l.view_mut((off[k], off[k]), u.shape()).copy_from(u);
        }
        for (k, v) in self.v.iter().enumerate() {
            l.view_mut((off[k + 1], off[k]), v.shape()).copy_from(v);
        }
        l
    }
}

/// Runs `M_1 = P_1`, `M_k = P_k - R_k' M_{k-1}^{-1} R_k`, factoring each
/// `M_k` as it goes.
///
/// Fails at the first Schur block without a Cholesky factor; the reported
/// block index is one-based.
pub fn tridiag_pd_sequence(p: &BlockTriDiagonal) -> Result<TriDiagFactor, LinalgError> {
    let count = p.diag.len();
    let mut u: Vec<Matrix> = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count.saturating_sub(1));
    let mut m = Vec::with_capacity(count);
    for k in 0..count {
        let mk = if k == 0 {
            p.diag[0].clone()
        } else {
            let y = solve_lower(&u[k - 1], &p.upper[k - 1]);
            let schur = &p.diag[k] - y.transpose() * &y;
            v.push(y.transpose());
            (&schur + schur.transpose()) * 0.5
        };
        let uk = cholesky_lower(&mk).map_err(|e| match e {
            LinalgError::NotPositiveDefinite { pivot, .. } => {
                LinalgError::BlockNotPositiveDefinite {
                    block: k + 1,
                    pivot,
                }
            }
            other => other,
        })?;
        u.push(uk);
        m.push(mk);
    }
    Ok(TriDiagFactor { u, v, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn cholesky_of_identity() {
        let i = Matrix::identity(3, 3);
        assert_eq!(cholesky_lower(&i).unwrap(), i);
    }

    #[test]
    fn cholesky_hand_example() {
        let p = m(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let l = cholesky_lower(&p).unwrap();
        assert_eq!(l, m(2, 2, &[2.0, 0.0, 1.0, 2.0]));
        assert_eq!(&l * l.transpose(), p);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // eigenvalues -1 and 3
        let err = cholesky_lower(&m(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap_err();
        assert!(matches!(
            err,
            LinalgError::NotPositiveDefinite { pivot: 1, .. }
        ));
    }

    #[test]
    fn cholesky_rejects_semidefinite_drift() {
        let p = m(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        assert!(cholesky_lower(&p).is_err());
    }

    #[test]
    fn asymmetric_input_is_an_error_but_roundoff_is_tolerated() {
        let bad = m(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(
            cholesky_lower(&bad),
            Err(LinalgError::Asymmetric(_))
        ));
        let ok = m(2, 2, &[2.0, 1.0, 1.0 + 1e-13, 2.0]);
        assert!(cholesky_lower(&ok).is_ok());
    }

    #[test]
    fn min_eigen_examples() {
        assert_eq!(min_eigen_sym(&Matrix::identity(4, 4)).unwrap(), 1.0);
        assert_eq!(
            min_eigen_sym(&m(2, 2, &[3.0, 0.0, 0.0, -2.0])).unwrap(),
            -2.0
        );
        // lambda^2 - 4 lambda + 3
        let l = min_eigen_sym(&m(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        assert!(matches!(
            min_eigen_sym(&s(f64::INFINITY)),
            Err(LinalgError::NonFinite)
        ));
    }

    #[test]
    fn tridiag_scalar_success() {
        let p = BlockTriDiagonal::new(vec![s(2.0), s(2.0)], vec![s(1.0)]).unwrap();
        let f = tridiag_pd_sequence(&p).unwrap();
        assert_eq!(f.m[0], s(2.0));
        assert!((f.m[1][(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn tridiag_decoupled_identities() {
        let p = BlockTriDiagonal::new(
            vec![
                Matrix::identity(2, 2),
                Matrix::identity(3, 3),
                Matrix::identity(1, 1),
            ],
            vec![Matrix::zeros(2, 3), Matrix::zeros(3, 1)],
        )
        .unwrap();
        let f = tridiag_pd_sequence(&p).unwrap();
        for mk in &f.m {
            assert_eq!(mk, &Matrix::identity(mk.nrows(), mk.nrows()));
        }
    }

    #[test]
    fn tridiag_scalar_failure_names_second_block() {
        let p = BlockTriDiagonal::new(vec![s(1.0), s(1.0)], vec![s(2.0)]).unwrap();
        let err = tridiag_pd_sequence(&p).unwrap_err();
        assert_eq!(
            err,
            LinalgError::BlockNotPositiveDefinite { block: 2, pivot: 0 }
        );
    }

    #[test]
    fn tridiag_rejects_bad_shapes() {
        assert!(BlockTriDiagonal::new(vec![s(1.0), Matrix::identity(2, 2)], vec![s(1.0)]).is_err());
        assert!(BlockTriDiagonal::new(vec![s(1.0), s(1.0)], vec![]).is_err());
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        (&g + g.transpose()) * 0.5
    }

    #[test]
    fn cholesky_is_unique_under_refactorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..8 {
            let g = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let p = &g * g.transpose() + Matrix::identity(n, n);
            let l = cholesky_lower(&p).unwrap();
            let again = cholesky_lower(&(&l * l.transpose())).unwrap();
            assert!(max_abs(&(&again - &l)) <= 1e-10 * max_abs(&l));
        }
    }

    #[test]
    fn dense_assembly_matches_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BlockTriDiagonal::new(
            vec![
                random_sym(&mut rng, 2),
                random_sym(&mut rng, 1),
                random_sym(&mut rng, 3),
            ],
            vec![m(2, 1, &[1.0, 2.0]), m(1, 3, &[3.0, 4.0, 5.0])],
        )
        .unwrap();
        let d = p.to_dense();
        assert_eq!(d, d.transpose());
        assert_eq!(d[(0, 2)], 1.0);
        assert_eq!(d[(2, 1)], 2.0);
        assert_eq!(d[(5, 2)], 5.0);
        assert_eq!(d[(0, 3)], 0.0);
    }
}
