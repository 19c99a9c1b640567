//! Matrix-valued affine functions of a decision vector, and the layout that
//! assigns scalar decision variables to matrix unknowns.

use std::ops::{Add, Neg, Sub};

use nalgebra::DVector;

use crate::model::Matrix;

/// `constant + sum_k theta[k] * coeff_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrix {
    constant: Matrix,
    terms: Vec<(usize, Matrix)>,
}

impl AffineMatrix {
    pub fn constant(m: Matrix) -> Self {
        Self {
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Matrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(Matrix::identity(n, n))
    }

    pub fn term(var: usize, coeff: Matrix) -> Self {
        let shape = coeff.shape();
        Self {
            constant: Matrix::zeros(shape.0, shape.1),
            terms: vec![(var, coeff)],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn constant_part(&self) -> &Matrix {
        &self.constant
    }

    pub fn terms(&self) -> &[(usize, Matrix)] {
        &self.terms
    }

    pub fn scale(mut self, k: f64) -> Self {
        self.constant *= k;
        for (_, c) in &mut self.terms {
            *c *= k;
        }
        self
    }

    /// `m * self`
    pub fn mul_left(&self, m: &Matrix) -> Self {
        Self {
            constant: m * &self.constant,
            terms: self.terms.iter().map(|(v, c)| (*v, m * c)).collect(),
        }
    }

    /// `self * m`
    pub fn mul_right(&self, m: &Matrix) -> Self {
        Self {
            constant: &self.constant * m,
            terms: self.terms.iter().map(|(v, c)| (*v, c * m)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|(v, c)| (*v, c.transpose()))
                .collect(),
        }
    }

    /// `self + self'`
    pub fn sym_part2(&self) -> Self {
        self.clone() + self.transpose()
    }

    pub fn eval(&self, theta: &[f64]) -> Matrix {
        let mut out = self.constant.clone();
        for (v, c) in &self.terms {
            out += c * theta[*v];
        }
        out
    }

    /// Merges repeated variables and drops zero coefficients.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|(v, _)| *v);
        let mut merged: Vec<(usize, Matrix)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match merged.last_mut() {
                Some((lv, lc)) if *lv == v => *lc += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|(_, c)| c.iter().any(|x| *x != 0.0));
        self.terms = merged;
        self
    }

    /// Assembles a block matrix from a rectangular grid of pieces.
    pub fn from_blocks(grid: &[Vec<AffineMatrix>]) -> Self {
        let heights: Vec<usize> = grid.iter().map(|row| row[0].shape().0).collect();
        let widths: Vec<usize> = grid[0].iter().map(|b| b.shape().1).collect();
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let mut out = Self::zeros(rows, cols);
        let mut r = 0;
        for (bi, row) in grid.iter().enumerate() {
            assert_eq!(row.len(), widths.len(), "ragged block grid");
            let mut c = 0;
            for (bj, piece) in row.iter().enumerate() {
                assert_eq!(
                    piece.shape(),
                    (heights[bi], widths[bj]),
                    "block ({bi},{bj})"
                );
                out.constant
                    .view_mut((r, c), piece.shape())
                    .copy_from(&piece.constant);
                for (v, coeff) in &piece.terms {
                    let mut full = Matrix::zeros(rows, cols);
                    full.view_mut((r, c), coeff.shape()).copy_from(coeff);
                    out.terms.push((*v, full));
                }
                c += widths[bj];
            }
            r += heights[bi];
        }
        out.compact()
    }

    /// Rows `(E, e)` of the linear system `E theta = e` equivalent to
    /// `self == 0`, one row per entry (row-major).
    pub fn equality_rows(&self, var_count: usize) -> (Matrix, DVector<f64>) {
        let (rows, cols) = self.shape();
        let mut e = Matrix::zeros(rows * cols, var_count);
        let mut rhs = DVector::zeros(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                rhs[k] = -self.constant[(i, j)];
                for (v, c) in &self.terms {
                    e[(k, *v)] += c[(i, j)];
                }
            }
        }
        (e, rhs)
    }
}

impl Add for AffineMatrix {
    type Output = AffineMatrix;
    fn add(mut self, rhs: AffineMatrix) -> AffineMatrix {
        assert_eq!(self.shape(), rhs.shape(), "affine shapes differ");
        self.constant += rhs.constant;
        self.terms.extend(rhs.terms);
        self
    }
}

impl Sub for AffineMatrix {
    type Output = AffineMatrix;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn sub(self, rhs: AffineMatrix) -> AffineMatrix {
        self + rhs.neg()
    }
}

impl Neg for AffineMatrix {
    type Output = AffineMatrix;
    fn neg(self) -> AffineMatrix {
        self.scale(-1.0)
    }
}

impl Add<&Matrix> for AffineMatrix {
    type Output = AffineMatrix;
    fn add(mut self, rhs: &Matrix) -> AffineMatrix {
        self.constant += rhs;
        self
    }
}

impl Sub<&Matrix> for AffineMatrix {
    type Output = AffineMatrix;
    fn sub(mut self, rhs: &Matrix) -> AffineMatrix {
        self.constant -= rhs;
        self
    }
}

/// Hands out consecutive decision-variable indices.
#[derive(Clone, Debug, Default)]
pub struct VarLayout {
    count: usize,
}

impl VarLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn take(&mut self, k: usize) -> usize {
        let at = self.count;
        self.count += k;
        at
    }

    pub fn scalar(&mut self) -> ScalarVar {
        ScalarVar(self.take(1))
    }

    pub fn symmetric(&mut self, n: usize) -> SymVar {
        SymVar {
            offset: self.take(n * (n + 1) / 2),
            n,
        }
    }

    pub fn general(&mut self, rows: usize, cols: usize) -> MatVar {
        MatVar {
            offset: self.take(rows * cols),
            rows,
            cols,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarVar(usize);

impl ScalarVar {
    pub fn index(self) -> usize {
        self.0
    }

    /// `theta * I_n`
    pub fn times_identity(self, n: usize) -> AffineMatrix {
        AffineMatrix::term(self.0, Matrix::identity(n, n))
    }

    pub fn value(self, theta: &[f64]) -> f64 {
        theta[self.0]
    }
}

/// Symmetric `n x n` unknown over the upper triangle. Off-diagonal
/// coordinates carry a `1/sqrt(2)` factor so that the coordinate map is an
/// isometry between the Euclidean and Frobenius norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymVar {
    offset: usize,
    n: usize,
}

impl SymVar {
    pub fn dim(self) -> usize {
        self.n
    }

    fn coords(self) -> impl Iterator<Item = (usize, usize, usize)> {
        let n = self.n;
        (0..n)
            .flat_map(move |i| (i..n).map(move |j| (i, j)))
            .enumerate()
            .map(move |(k, (i, j))| (self.offset + k, i, j))
    }

    pub fn expr(self) -> AffineMatrix {
        let n = self.n;
        let mut out = AffineMatrix::zeros(n, n);
        for (v, i, j) in self.coords() {
            let mut c = Matrix::zeros(n, n);
            if i == j {
                c[(i, i)] = 1.0;
            } else {
                c[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
                c[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
            }
            out.terms.push((v, c));
        }
        out
    }

    pub fn value(self, theta: &[f64]) -> Matrix {
        let mut q = Matrix::zeros(self.n, self.n);
        for (v, i, j) in self.coords() {
            if i == j {
                q[(i, i)] = theta[v];
            } else {
                let x = theta[v] * std::f64::consts::FRAC_1_SQRT_2;
                q[(i, j)] = x;
                q[(j, i)] = x;
            }
        }
        q
    }

    /// Writes the coordinates of symmetric `q` into `theta`.
    pub fn encode(self, q: &Matrix, theta: &mut [f64]) {
        for (v, i, j) in self.coords() {
            theta[v] = if i == j {
                q[(i, i)]
            } else {
                (q[(i, j)] + q[(j, i)]) * std::f64::consts::FRAC_1_SQRT_2
            };
        }
    }
}

/// Unconstrained `rows x cols` unknown, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatVar {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl MatVar {
    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn expr(self) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let mut c = Matrix::zeros(self.rows, self.cols);
                c[(i, j)] = 1.0;
                out.terms.push((self.offset + i * self.cols + j, c));
            }
        }
        out
    }

    pub fn value(self, theta: &[f64]) -> Matrix {
        Matrix::from_row_slice(
            self.rows,
            self.cols,
            &theta[self.offset..self.offset + self.rows * self.cols],
        )
    }

    pub fn encode(self, m: &Matrix, theta: &mut [f64]) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                theta[self.offset + i * self.cols + j] = m[(i, j)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_coordinates_are_an_isometry() {
        let mut layout = VarLayout::new();
        let q = layout.symmetric(3);
        let m = Matrix::from_row_slice(3, 3, &[2.0, 1.0, -1.0, 1.0, 3.0, 0.5, -1.0, 0.5, 4.0]);
        let mut theta = vec![0.0; layout.count()];
        q.encode(&m, &mut theta);
        assert_eq!(layout.count(), 6);
        let back = q.value(&theta);
        assert!((&back - &m).amax() < 1e-15);
        assert!((q.expr().eval(&theta) - &m).amax() < 1e-15);
        let norm2: f64 = theta.iter().map(|x| x * x).sum();
        assert!((norm2 - m.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn products_and_blocks_evaluate_consistently() {
        let mut layout = VarLayout::new();
        let k = layout.general(1, 2);
        let e = layout.scalar();
        let theta = [2.0, -1.0, 0.5];
        let b = Matrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let prod = k.expr().mul_left(&b); // 2x2
        let grid = AffineMatrix::from_blocks(&[
            vec![prod.clone(), e.times_identity(2)],
            vec![prod.transpose(), AffineMatrix::identity(2)],
        ]);
        let v = grid.eval(&theta);
        let kb = &b * k.value(&theta);
        assert_eq!(v.view((0, 0), (2, 2)), kb);
        assert_eq!(v.view((0, 2), (2, 2)), Matrix::identity(2, 2) * 0.5);
        assert_eq!(v.view((2, 0), (2, 2)), kb.transpose());
    }

    #[test]
    fn equality_rows_reproduce_the_expression() {
        let mut layout = VarLayout::new();
        let q = layout.symmetric(2);
        let b2 = Matrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let c = Matrix::from_row_slice(1, 2, &[3.0, 2.0]);
        let expr = q.expr().mul_right(&b2) - &c.transpose();
        let (e, rhs) = expr.equality_rows(layout.count());
        let theta = [1.0, 0.3, -2.0];
        let direct = expr.eval(&theta);
        let via_rows = &e * DVector::from_column_slice(&theta) - rhs;
        assert!((via_rows[0] - direct[(0, 0)]).abs() < 1e-15);
        assert!((via_rows[1] - direct[(1, 0)]).abs() < 1e-15);
    }
}
