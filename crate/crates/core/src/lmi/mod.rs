//! Affine semidefinite feasibility.
//!
//! Problems have the form
//!
//! ```text
//! find theta  s.t.  E theta = e,  theta_k >= lb_k,  Phi(theta) = Phi_0 + sum_k theta_k Phi_k > 0
//! ```
//!
//! where `Phi` is block diagonal and stored block by block. The solver
//! eliminates the equalities through an orthonormal null-space basis, then
//! maximizes the smallest eigenvalue of `Phi` with a log-det barrier
//! method. A small quadratic penalty on `theta` keeps the search bounded
//! when the margin can be increased without limit; it is relaxed in stages
//! until a point with the requested margin is found or the penalty reaches
//! its floor. Every returned point is re-certified from scratch.

mod affine;

pub use affine::{AffineMatrix, MatVar, ScalarVar, SymVar, VarLayout};

use nalgebra::{Cholesky, DVector, SymmetricEigen};
use thiserror::Error;

use crate::blockla::{max_abs, min_eigen_sym, norm_inf, symmetrize};
use crate::model::Matrix;

/// Tolerance on `||E theta - e||_inf`, relative to `max(1, ||e||_inf)`.
pub const EQ_TOL: f64 = 1e-9;

/// One diagonal block of `Phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmiBlock {
    pub constant: Matrix,
    pub coeffs: Vec<(usize, Matrix)>,
}

impl LmiBlock {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn eval(&self, theta: &[f64]) -> Matrix {
        let mut out = self.constant.clone();
        for (v, c) in &self.coeffs {
            out += c * theta[*v];
        }
        out
    }
}

impl From<AffineMatrix> for LmiBlock {
    fn from(expr: AffineMatrix) -> Self {
        let expr = expr.compact();
        LmiBlock {
            constant: expr.constant_part().clone(),
            coeffs: expr.terms().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineFeasibilityProblem {
    pub var_count: usize,
    pub blocks: Vec<LmiBlock>,
    pub eq_matrix: Matrix,
    pub eq_rhs: DVector<f64>,
    pub lower_bounds: Vec<Option<f64>>,
}

impl AffineFeasibilityProblem {
    pub fn new(var_count: usize) -> Self {
        Self {
            var_count,
            blocks: Vec::new(),
            eq_matrix: Matrix::zeros(0, var_count),
            eq_rhs: DVector::zeros(0),
            lower_bounds: vec![None; var_count],
        }
    }

    /// Adds the constraint `expr > 0`.
    pub fn require_positive(&mut self, expr: AffineMatrix) -> &mut Self {
        self.blocks.push(expr.into());
        self
    }

    /// Adds the constraint `expr == 0`.
    pub fn require_zero(&mut self, expr: &AffineMatrix) -> &mut Self {
        let (e, rhs) = expr.equality_rows(self.var_count);
        let rows = self.eq_matrix.nrows();
        let mut stacked = Matrix::zeros(rows + e.nrows(), self.var_count);
        stacked
            .view_mut((0, 0), (rows, self.var_count))
            .copy_from(&self.eq_matrix);
        stacked.view_mut((rows, 0), e.shape()).copy_from(&e);
        let mut rhs_all = DVector::zeros(rows + rhs.len());
        rhs_all.rows_mut(0, rows).copy_from(&self.eq_rhs);
        rhs_all.rows_mut(rows, rhs.len()).copy_from(&rhs);
        self.eq_matrix = stacked;
        self.eq_rhs = rhs_all;
        self
    }

    pub fn set_lower_bound(&mut self, var: usize, lb: f64) -> &mut Self {
        self.lower_bounds[var] = Some(lb);
        self
    }

    pub fn phi(&self, theta: &[f64]) -> Vec<Matrix> {
        self.blocks.iter().map(|b| b.eval(theta)).collect()
    }

    /// Smallest eigenvalue of `Phi(theta)` over all blocks.
    pub fn lambda_min(&self, theta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| min_eigen_sym(&b.eval(theta)).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eq_residual(&self, theta: &[f64]) -> f64 {
        if self.eq_matrix.nrows() == 0 {
            return 0.0;
        }
        let r = &self.eq_matrix * DVector::from_column_slice(theta) - &self.eq_rhs;
        r.amax()
    }

    pub fn eq_tolerance(&self) -> f64 {
        EQ_TOL * self.eq_rhs.amax().max(1.0)
    }

    /// `||Phi_0||_inf` of the block-diagonal constant term.
    pub fn constant_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| norm_inf(&b.constant))
            .fold(0.0, f64::max)
    }

    /// `1e-6 * max(1, ||Phi_0||_inf)`.
    pub fn default_margin(&self) -> f64 {
        1e-6 * self.constant_norm().max(1.0)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |msg: String| Err(SolveError::Malformed(msg));
        if self.eq_matrix.ncols() != self.var_count {
            return bad(format!(
                "equality matrix has {} columns for {} variables",
                self.eq_matrix.ncols(),
                self.var_count
            ));
        }
        if self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality matrix and right-hand side disagree".into());
        }
        if self.lower_bounds.len() != self.var_count {
            return bad("one optional lower bound per variable is required".into());
        }
        if self
            .eq_matrix
            .iter()
            .chain(self.eq_rhs.iter())
            .any(|v| !v.is_finite())
        {
            return bad("non-finite equality data".into());
        }
        for (k, block) in self.blocks.iter().enumerate() {
            let d = block.dim();
            if !block.constant.is_square() {
                return bad(format!("block {k} constant is not square"));
            }
            symmetrize(&block.constant)
                .map_err(|e| SolveError::Malformed(format!("block {k} constant: {e}")))?;
            for (v, c) in &block.coeffs {
                if *v >= self.var_count {
                    return bad(format!("block {k} refers to variable {v}"));
                }
                if c.shape() != (d, d) {
                    return bad(format!(
                        "block {k} coefficient of variable {v} has wrong shape"
                    ));
                }
                symmetrize(c).map_err(|e| {
                    SolveError::Malformed(format!("block {k} coefficient of variable {v}: {e}"))
                })?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasiblePoint {
    pub theta: Vec<f64>,
    pub lambda_min: f64,
    pub eq_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfeasibleReport {
    /// Best smallest eigenvalue of `Phi` seen at any point satisfying the
    /// equalities.
    pub best_lambda_min: f64,
    pub newton_steps: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SolveError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("infeasible: {} (best lambda_min {:e})", .0.reason, .0.best_lambda_min)]
    Infeasible(InfeasibleReport),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    /// Total Newton-step budget across all penalty stages.
    pub max_newton: usize,
    /// First weight of the quadratic penalty on `theta`.
    pub initial_penalty: f64,
    /// Smallest penalty weight tried before declaring infeasibility.
    pub min_penalty: f64,
    /// Barrier duality-gap target, relative to the normalized problem.
    pub gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_newton: 5000,
            initial_penalty: 1e-3,
            min_penalty: 1e-11,
            gap_tol: 1e-9,
        }
    }
}

pub fn solve_feasibility(
    prob: &AffineFeasibilityProblem,
    margin: f64,
) -> Result<FeasiblePoint, SolveError> {
    solve_feasibility_with(prob, margin, &SolverOptions::default())
}

pub fn solve_feasibility_with(
    prob: &AffineFeasibilityProblem,
    margin: f64,
    opts: &SolverOptions,
) -> Result<FeasiblePoint, SolveError> {
    prob.validate()?;
    if !(margin > 0.0) {
        return Err(SolveError::Malformed(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let reduced = Reduced::new(prob)?;
    let mut budget = opts.max_newton;
    let mut phi = DVector::zeros(reduced.dim());
    let mut best = f64::NEG_INFINITY;
    let mut penalty = opts.initial_penalty;
    while penalty >= opts.min_penalty {
        let outcome = reduced.maximize_margin(&phi, penalty, opts.gap_tol, &mut budget);
        phi = outcome;
        let theta = reduced.lift(&phi);
        let lambda = prob.lambda_min(&theta);
        best = best.max(lambda);
        let cert = certify_point(&theta, prob, margin);
        if cert.passed() {
            return Ok(FeasiblePoint {
                lambda_min: cert.lambda_min,
                eq_residual: cert.eq_residual,
                theta,
            });
        }
        if budget == 0 {
            break;
        }
        penalty *= 1e-2;
    }
    Err(SolveError::Infeasible(InfeasibleReport {
        best_lambda_min: best,
        newton_steps: opts.max_newton - budget,
        reason: if budget == 0 {
            "Newton budget exhausted".into()
        } else {
            format!("no point with lambda_min >= {margin:e}")
        },
    }))
}

/// Why a point failed certification.
#[derive(Clone, Debug, PartialEq)]
pub enum PointFailure {
    DimensionMismatch,
    MatrixNotPositive,
    EqualityResidual,
    BoundViolated(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCertificate {
    pub lambda_min: f64,
    pub eq_residual: f64,
    pub failures: Vec<PointFailure>,
}

impl PointCertificate {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Recomputes `lambda_min(Phi(theta))`, the equality residual and the
/// bounds, independently of how `theta` was produced.
pub fn certify_point(
    theta: &[f64],
    prob: &AffineFeasibilityProblem,
    margin: f64,
) -> PointCertificate {
    if theta.len() != prob.var_count {
        return PointCertificate {
            lambda_min: f64::NAN,
            eq_residual: f64::NAN,
            failures: vec![PointFailure::DimensionMismatch],
        };
    }
    let lambda_min = prob.lambda_min(theta);
    let eq_residual = prob.eq_residual(theta);
    let mut failures = Vec::new();
    if !(lambda_min >= margin) {
        failures.push(PointFailure::MatrixNotPositive);
    }
    if !(eq_residual <= prob.eq_tolerance()) {
        failures.push(PointFailure::EqualityResidual);
    }
    for (k, lb) in prob.lower_bounds.iter().enumerate() {
        if let Some(lb) = lb {
            if !(theta[k] >= *lb) {
                failures.push(PointFailure::BoundViolated(k));
            }
        }
    }
    PointCertificate {
        lambda_min,
        eq_residual,
        failures,
    }
}

/// Largest step `delta >= 0` along `direction` with
/// `lambda_min(Phi(theta + delta * direction)) >= margin`, found by
/// bracketing and bisection. Returns 0 if `theta` itself misses the margin.
pub fn max_step_along(
    prob: &AffineFeasibilityProblem,
    theta: &[f64],
    direction: &[f64],
    margin: f64,
) -> f64 {
    let at = |delta: f64| {
        let t: Vec<f64> = theta
            .iter()
            .zip(direction)
            .map(|(a, d)| a + delta * d)
            .collect();
        prob.lambda_min(&t) >= margin
    };
    if !at(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while at(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return lo;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// The problem restricted to the affine set `E theta = e`, with bounds
/// turned into 1x1 blocks and everything scaled by a common factor.
struct Reduced {
    theta_p: DVector<f64>,
    basis: Matrix,
    /// Per block: constant term and one coefficient per reduced variable.
    blocks: Vec<(Matrix, Vec<Matrix>)>,
}

impl Reduced {
    fn new(prob: &AffineFeasibilityProblem) -> Result<Self, SolveError> {
        let (theta_p, basis) = null_space_parametrization(&prob.eq_matrix, &prob.eq_rhs);
        let residual = prob.eq_residual(theta_p.as_slice());
        if !(residual <= prob.eq_tolerance()) {
            return Err(SolveError::Infeasible(InfeasibleReport {
                best_lambda_min: f64::NEG_INFINITY,
                newton_steps: 0,
                reason: format!("equality constraints are inconsistent (residual {residual:e})"),
            }));
        }
        let r = basis.ncols();
        let mut blocks = Vec::new();
        for block in &prob.blocks {
            let f0 = block.eval(theta_p.as_slice());
            let mut fj = vec![Matrix::zeros(block.dim(), block.dim()); r];
            for (v, c) in &block.coeffs {
                for (j, f) in fj.iter_mut().enumerate() {
                    let w = basis[(*v, j)];
                    if w != 0.0 {
                        *f += c * w;
                    }
                }
            }
            blocks.push((sym(&f0), fj.iter().map(sym).collect()));
        }
        for (k, lb) in prob.lower_bounds.iter().enumerate() {
            if let Some(lb) = lb {
                let f0 = Matrix::from_element(1, 1, theta_p[k] - lb);
                let fj: Vec<Matrix> = (0..r)
                    .map(|j| Matrix::from_element(1, 1, basis[(k, j)]))
                    .collect();
                blocks.push((f0, fj));
            }
        }
        let scale = blocks
            .iter()
            .map(|(f0, _)| norm_inf(f0))
            .fold(1.0, f64::max);
        for (f0, fj) in &mut blocks {
            *f0 /= scale;
            for f in fj.iter_mut() {
                *f /= scale;
            }
        }
        Ok(Self {
            theta_p,
            basis,
            blocks,
        })
    }

    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn lift(&self, phi: &DVector<f64>) -> Vec<f64> {
        (&self.theta_p + &self.basis * phi).as_slice().to_vec()
    }

    fn total_size(&self) -> usize {
        self.blocks.iter().map(|(f0, _)| f0.nrows()).sum()
    }

    fn eval_block(&self, k: usize, phi: &DVector<f64>, t: f64) -> Matrix {
        let (f0, fj) = &self.blocks[k];
        let mut g = f0.clone();
        for (j, f) in fj.iter().enumerate() {
            if phi[j] != 0.0 {
                g += f * phi[j];
            }
        }
        for i in 0..g.nrows() {
            g[(i, i)] -= t;
        }
        g
    }

    fn min_eig(&self, phi: &DVector<f64>) -> f64 {
        (0..self.blocks.len())
            .map(|k| min_eigen_sym(&self.eval_block(k, phi, 0.0)).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min)
    }

    /// Barrier value `-sum log det G_k`, or `None` outside the domain.
    fn barrier(&self, phi: &DVector<f64>, t: f64) -> Option<f64> {
        let mut acc = 0.0;
        for k in 0..self.blocks.len() {
            let chol = Cholesky::new(self.eval_block(k, phi, t))?;
            let l = chol.l_dirty();
            for i in 0..l.nrows() {
                acc -= 2.0 * l[(i, i)].ln();
            }
        }
        acc.is_finite().then_some(acc)
    }

    /// Path-following for `max t - penalty/2 |phi|^2  s.t.  F(phi) >= t I`.
    fn maximize_margin(
        &self,
        start: &DVector<f64>,
        penalty: f64,
        gap_tol: f64,
        budget: &mut usize,
    ) -> DVector<f64> {
        let r = self.dim();
        let mut phi = start.clone();
        let lam = self.min_eig(&phi);
        if !lam.is_finite() {
            return phi;
        }
        let mut t = lam - lam.abs().max(1.0);
        let m = self.total_size() as f64;
        let objective = |phi: &DVector<f64>, t: f64, s: f64| -> Option<f64> {
            let b = self.barrier(phi, t)?;
            Some(s * (-t + 0.5 * penalty * phi.norm_squared()) + b)
        };
        let mut s = 1.0;
        loop {
            // Newton centering at the current s
            for _ in 0..200 {
                if *budget == 0 {
                    return phi;
                }
                *budget -= 1;
                let Some((grad, hess)) = self.derivatives(&phi, t, s, penalty) else {
                    return phi;
                };
                let step = match Cholesky::new(hess.clone()) {
                    Some(c) => c.solve(&(-&grad)),
                    None => {
                        let damped = hess + Matrix::identity(r + 1, r + 1) * 1e-10;
                        match Cholesky::new(damped) {
                            Some(c) => c.solve(&(-&grad)),
                            None => return phi,
                        }
                    }
                };
                let decrement = -grad.dot(&step);
                if decrement * 0.5 < 1e-10 {
                    break;
                }
                let f0 = objective(&phi, t, s).expect("current iterate is interior");
                let mut alpha = 1.0;
                let mut moved = false;
                while alpha > 1e-14 {
                    let cand_phi = &phi + step.rows(0, r) * alpha;
                    let cand_t = t + step[r] * alpha;
                    if let Some(f) = objective(&cand_phi, cand_t, s) {
                        if f <= f0 - 0.25 * alpha * decrement {
                            phi = cand_phi;
                            t = cand_t;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if m / s < gap_tol {
                return phi;
            }
            s *= 10.0;
        }
    }

    fn derivatives(
        &self,
        phi: &DVector<f64>,
        t: f64,
        s: f64,
        penalty: f64,
    ) -> Option<(DVector<f64>, Matrix)> {
        let r = self.dim();
        let mut grad = DVector::zeros(r + 1);
        let mut hess = Matrix::zeros(r + 1, r + 1);
        for j in 0..r {
            grad[j] = s * penalty * phi[j];
            hess[(j, j)] = s * penalty;
        }
        grad[r] = -s;
        for (k, (_, fj)) in self.blocks.iter().enumerate() {
            let g = self.eval_block(k, phi, t);
            let l = Cholesky::new(g)?.l();
            let d = l.nrows();
            // whitened coefficients L^{-1} F_j L^{-T}
            let whiten = |f: &Matrix| {
                let y = l.solve_lower_triangular(f).expect("nonsingular factor");
                let z = l
                    .solve_lower_triangular(&y.transpose())
                    .expect("nonsingular factor");
                sym(&z)
            };
            let mut white: Vec<Option<Matrix>> = fj
                .iter()
                .map(|f| (max_abs(f) > 0.0).then(|| whiten(f)))
                .collect();
            white.push(Some(-whiten(&Matrix::identity(d, d))));
            for a in 0..=r {
                let Some(wa) = &white[a] else { continue };
                grad[a] -= wa.trace();
                for b in a..=r {
                    let Some(wb) = &white[b] else { continue };
                    let h = wa.dot(wb);
                    hess[(a, b)] += h;
                    if a != b {
                        hess[(b, a)] += h;
                    }
                }
            }
        }
        Some((grad, hess))
    }
}

fn sym(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Minimum-norm particular solution of `E theta = e` and an orthonormal
/// basis of the null space of `E`.
fn null_space_parametrization(e: &Matrix, rhs: &DVector<f64>) -> (DVector<f64>, Matrix) {
    let v = e.ncols();
    if e.nrows() == 0 || v == 0 {
        return (DVector::zeros(v), Matrix::identity(v, v));
    }
    let svd = e.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.max();
    let tol = smax * (e.nrows().max(v) as f64) * f64::EPSILON * 10.0;
    let mut theta_p = DVector::zeros(v);
    let mut row_space = Vec::new();
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv > tol {
            let coef = u.column(i).dot(rhs) / sv;
            theta_p += vt.row(i).transpose() * coef;
            row_space.push(vt.row(i).transpose());
        }
    }
    let mut projector = Matrix::identity(v, v);
    for r in &row_space {
        projector -= r * r.transpose();
    }
    let eig = SymmetricEigen::new(sym(&projector));
    let keep: Vec<usize> = (0..v).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let mut basis = Matrix::zeros(v, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    (theta_p, basis)
}
