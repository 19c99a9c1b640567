//! Sequential messenger-matrix design.
//!
//! Subsystem `i` only sees its own model, its couplings to `i-1`, and a
//! [`MessengerPacket`] from `i-1`. Step `i` first tries to certify the
//! uncontrolled subsystem; when that fails it synthesizes `K(i,i)`,
//! `K(i,i-1)` and `K(i-1,i)`. The closed-loop messenger matrix it produces
//! is the Schur complement
//!
//! ```text
//! M_i = S_i - X_i M_{i-1}^{-1} X_i'
//! S_i = -(A_i' Q_i + Q_i A_i) - (Hh(i,i) + Hh(i,i)') - eps_i I
//! X_i = Hh(i-1,i)' + Hh(i,i-1)
//! Hh(i,j) = Q_i (B1_i h(i,j) + B3_i K(i,j))
//! ```
//!
//! Positivity of every `M_i` is the block tri-diagonal Cholesky condition
//! on the centralized dissipation matrix, so the cascade is certified one
//! subsystem at a time.
//!
//! Inside the solver `M_i > 0` is posed as the two-block matrix
//! `[[S_i, X_i L^{-T}], [L^{-1} X_i', I]] > 0`, where `L L' = M_{i-1}`.
//! This is congruent to `[[S_i, X_i], [X_i', M_{i-1}]]`, keeps every
//! constraint affine and does not cap the achievable margin at the
//! smallest eigenvalue of `M_{i-1}`.

use thiserror::Error;

use crate::blockla::{cholesky_lower, max_abs, solve_lower, solve_lower_transposed, LinalgError};
use crate::lmi::{
    certify_point, max_step_along, solve_feasibility_with, AffineFeasibilityProblem, AffineMatrix,
    FeasiblePoint, MatVar, PointCertificate, ScalarVar, SolveError, SolverOptions, SymVar,
    VarLayout,
};
use crate::model::{validate_network, CascadeNetwork, Matrix, Subsystem, ValidationReport};

/// Floor on every `eps_i`.
pub const EPS_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    Verified,
    Synthesized,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Verified => "Verified",
            Route::Synthesized => "Synthesized",
        }
    }
}

/// What subsystem `i-1` hands to subsystem `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessengerPacket {
    /// Zero-based index of the sender.
    pub prev_index: usize,
    /// Closed-loop messenger matrix of the sender.
    pub m_prev: Matrix,
    /// `Q_{i-1} B1_{i-1} h(i-1,i)`.
    pub g_prev: Matrix,
    /// `Q_{i-1} B3_{i-1}`; lets subsystem `i` choose `K(i-1,i)`.
    pub t_prev: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Verify,
    SynthesisRelaxed,
    SynthesisGains,
}

/// Independent re-certification of one solver output.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveAudit {
    pub index: usize,
    pub stage: Stage,
    pub certificate: PointCertificate,
}

/// Result of designing one subsystem. `index` is zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignRecord {
    pub index: usize,
    pub q: Matrix,
    pub epsilon: f64,
    /// `K(i,i)`
    pub k_self: Option<Matrix>,
    /// `K(i,i-1)`
    pub k_to_prev: Option<Matrix>,
    /// `K(i-1,i)`, chosen at this step and applied by subsystem `i-1`.
    pub k_prev_to_self: Option<Matrix>,
    /// `K(i,i+1)`, chosen by subsystem `i+1` and attached afterwards.
    pub k_to_next: Option<Matrix>,
    pub m_cl: Matrix,
    pub route: Route,
    /// Certificates of every solver point used for this record. Not
    /// persisted.
    pub audit: Vec<SolveAudit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDesignState {
    pub net: CascadeNetwork,
    pub records: Vec<DesignRecord>,
    pub global_epsilon: f64,
}

impl NetworkDesignState {
    pub fn is_complete(&self) -> bool {
        self.records.len() == self.net.len()
            && self.records.iter().enumerate().all(|(i, r)| r.index == i)
    }

    pub fn routes(&self) -> Vec<Route> {
        self.records.iter().map(|r| r.route).collect()
    }

    pub fn audits(&self) -> impl Iterator<Item = &SolveAudit> {
        self.records.iter().flat_map(|r| r.audit.iter())
    }
}

/// How the bilinear product `Q_i B3_i K` is made affine in the first
/// synthesis stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelaxedForm {
    /// Works with `Y = Q^{-1}`, `W = K(i,i) Y`, `V = Y K(i-1,i)'` after a
    /// congruence by `diag(Y, I)`. Exact: every solution maps back to
    /// realizable gains.
    InverseStorage,
    /// Replaces `Q_i B3_i K` by free matrices `Z`. A relaxation: gains are
    /// recovered by least squares.
    GainProduct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignOptions {
    pub eps_min: f64,
    /// Positivity margin for every solve; `None` uses the problem's
    /// scale-aware default.
    pub margin: Option<f64>,
    pub relaxed_form: RelaxedForm,
    /// Re-solve for the gains with `Q_i` frozen after the first stage.
    pub refine_gains: bool,
    /// Residual allowed on `Q B3 K = Z` when `refine_gains` is off.
    pub gain_tol: f64,
    /// Raise `eps_i` to half its attainable supremum once feasible.
    pub push_epsilon: bool,
    pub solver: SolverOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            eps_min: EPS_MIN,
            margin: None,
            relaxed_form: RelaxedForm::InverseStorage,
            refine_gains: true,
            gain_tol: 1e-9,
            push_epsilon: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum DesignError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid network:\n{0}")]
    InvalidNetwork(ValidationReport),
    #[error("step {}: {reason}", .index + 1)]
    Infeasible { index: usize, reason: String },
    #[error("step {}: recovered gains miss Q B3 K = Z by {residual:e}", .index + 1)]
    GainRecoveryFailed { index: usize, residual: f64 },
    #[error("design failed at subsystem {}: verification: {verify}; synthesis: {synthesize}", .index + 1)]
    DesignFailed {
        index: usize,
        verify: String,
        synthesize: String,
    },
    #[error("step {}: solver rejected the problem: {message}", .index + 1)]
    Solver { index: usize, message: String },
}

impl DesignError {
    fn infeasible(index: usize, reason: impl Into<String>) -> Self {
        DesignError::Infeasible {
            index,
            reason: reason.into(),
        }
    }
}

/// Couplings seen by subsystem `i` plus the upstream packet, checked for
/// shape and prepared for the Schur form.
struct LocalView<'a> {
    index: usize,
    sub: &'a Subsystem,
    h_self: &'a Matrix,
    /// `A_i + B1_i h(i,i)`
    a_bar: Matrix,
    link: Option<Link<'a>>,
}

struct Link<'a> {
    packet: &'a MessengerPacket,
    h_prev: Matrix,
    /// Cholesky factor of `M_{i-1}`.
    chol: Matrix,
    /// `L^{-T}`
    chol_inv_t: Matrix,
}

impl<'a> LocalView<'a> {
    fn new(
        sub: &'a Subsystem,
        h_self: &'a Matrix,
        h_prev: Option<&'a Matrix>,
        packet: Option<&'a MessengerPacket>,
    ) -> Result<Self, DesignError> {
        let index = packet.map_or(0, |p| p.prev_index + 1);
        if let Some(v) = sub.violations(index).first() {
            return Err(DesignError::DimensionMismatch(v.to_string()));
        }
        let (n, p) = (sub.state_dim(), sub.coupling_dim());
        if h_self.shape() != (p, n) {
            return Err(DesignError::DimensionMismatch(format!(
                "h({0},{0}) is {1:?}, expected {2:?}",
                index + 1,
                h_self.shape(),
                (p, n)
            )));
        }
        let link = match packet {
            None => {
                if h_prev.is_some_and(|h| max_abs(h) != 0.0) {
                    return Err(DesignError::DimensionMismatch(
                        "coupling to a predecessor given without a messenger packet".into(),
                    ));
                }
                None
            }
            Some(pk) => {
                let n_prev = pk.m_prev.nrows();
                if !pk.m_prev.is_square()
                    || pk.g_prev.shape() != (n_prev, n)
                    || pk.t_prev.nrows() != n_prev
                {
                    return Err(DesignError::DimensionMismatch(format!(
                        "packet from subsystem {} does not fit a successor with {n} states",
                        pk.prev_index + 1
                    )));
                }
                let h_prev = match h_prev {
                    Some(h) if h.shape() != (p, n_prev) => {
                        return Err(DesignError::DimensionMismatch(format!(
                            "h({},{}) is {:?}, expected {:?}",
                            index + 1,
                            index,
                            h.shape(),
                            (p, n_prev)
                        )))
                    }
                    Some(h) => h.clone(),
                    None => Matrix::zeros(p, n_prev),
                };
                let chol = cholesky_lower(&pk.m_prev).map_err(|e| {
                    DesignError::infeasible(index, format!("received messenger matrix: {e}"))
                })?;
                let chol_inv_t = solve_lower_transposed(&chol, &Matrix::identity(n_prev, n_prev));
                Some(Link {
                    packet: pk,
                    h_prev,
                    chol,
                    chol_inv_t,
                })
            }
        };
        Ok(Self {
            index,
            sub,
            h_self,
            a_bar: &sub.a + &sub.b1 * h_self,
            link,
        })
    }

    fn n(&self) -> usize {
        self.sub.state_dim()
    }

    /// `S` alone, or `[[S, X L^{-T}], [.., I]]`.
    fn master(&self, s: &AffineMatrix, x: Option<&AffineMatrix>) -> AffineMatrix {
        match (&self.link, x) {
            (Some(link), Some(x)) => {
                let y = x.mul_right(&link.chol_inv_t);
                AffineMatrix::from_blocks(&[
                    vec![s.clone(), y.clone()],
                    vec![y.transpose(), AffineMatrix::identity(link.chol.nrows())],
                ])
            }
            _ => s.clone(),
        }
    }

    /// `S - X M_{i-1}^{-1} X'` via the packet's Cholesky factor.
    fn messenger(&self, s: &Matrix, x: Option<&Matrix>) -> Matrix {
        let m = match (&self.link, x) {
            (Some(link), Some(x)) => {
                let z = solve_lower(&link.chol, &x.transpose());
                s - z.transpose() * z
            }
            _ => s.clone(),
        };
        (&m + m.transpose()) * 0.5
    }

    /// `-(A_bar' Q + Q A_bar)` for symmetric unknown or fixed `Q`.
    fn lyapunov_term(&self, q: &AffineMatrix) -> AffineMatrix {
        -(q.mul_left(&self.a_bar.transpose()) + q.mul_right(&self.a_bar))
    }
}

fn margin_for(opts: &DesignOptions, prob: &AffineFeasibilityProblem) -> f64 {
    opts.margin.unwrap_or_else(|| prob.default_margin())
}

fn solve_audited(
    view: &LocalView<'_>,
    stage: Stage,
    prob: &AffineFeasibilityProblem,
    opts: &DesignOptions,
    audit: &mut Vec<SolveAudit>,
) -> Result<FeasiblePoint, DesignError> {
    let margin = margin_for(opts, prob);
    let point = solve_feasibility_with(prob, margin, &opts.solver).map_err(|e| match e {
        SolveError::Malformed(message) => DesignError::Solver {
            index: view.index,
            message,
        },
        SolveError::Infeasible(report) => DesignError::infeasible(
            view.index,
            format!("{stage:?}: best lambda_min {:.3e}", report.best_lambda_min),
        ),
    })?;
    let certificate = certify_point(&point.theta, prob, margin);
    let passed = certificate.passed();
    audit.push(SolveAudit {
        index: view.index,
        stage,
        certificate,
    });
    if !passed {
        return Err(DesignError::infeasible(
            view.index,
            format!("{stage:?}: point failed recertification"),
        ));
    }
    Ok(point)
}

/// Raises `eps` to half of its supremum along the `eps` axis, never
/// lowering it. The other half is left to the successors, whose
/// messenger matrices shrink as `M_{i-1}` does.
fn push_epsilon(
    prob: &AffineFeasibilityProblem,
    theta: &mut [f64],
    eps: ScalarVar,
    opts: &DesignOptions,
) {
    if !opts.push_epsilon {
        return;
    }
    let mut dir = vec![0.0; theta.len()];
    dir[eps.index()] = 1.0;
    let delta = max_step_along(prob, theta, &dir, margin_for(opts, prob));
    let current = theta[eps.index()];
    theta[eps.index()] = current.max(0.5 * (current + delta));
}

fn require_pd(index: usize, what: &str, m: &Matrix) -> Result<(), DesignError> {
    cholesky_lower(m)
        .map(|_| ())
        .map_err(|e: LinalgError| DesignError::infeasible(index, format!("{what}: {e}")))
}

struct VerifyProblem {
    prob: AffineFeasibilityProblem,
    q: SymVar,
    eps: ScalarVar,
    s: AffineMatrix,
    x: Option<AffineMatrix>,
}

fn verify_problem(view: &LocalView<'_>, opts: &DesignOptions) -> VerifyProblem {
    let n = view.n();
    let sub = view.sub;
    let mut layout = VarLayout::new();
    let q = layout.symmetric(n);
    let eps = layout.scalar();
    let qe = q.expr();
    let s = view.lyapunov_term(&qe) - eps.times_identity(n);
    let x = view.link.as_ref().map(|link| {
        AffineMatrix::constant(link.packet.g_prev.transpose())
            + qe.mul_right(&(&sub.b1 * &link.h_prev))
    });
    let mut prob = AffineFeasibilityProblem::new(layout.count());
    prob.require_positive(view.master(&s, x.as_ref()));
    prob.require_zero(&(qe.mul_right(&sub.b2) - &sub.c.transpose()));
    prob.set_lower_bound(eps.index(), opts.eps_min);
    VerifyProblem { prob, q, eps, s, x }
}

/// Certifies subsystem `i` with all gains zero.
pub fn local_verify(
    sub: &Subsystem,
    h_self: &Matrix,
    h_prev: Option<&Matrix>,
    packet: Option<&MessengerPacket>,
    opts: &DesignOptions,
) -> Result<DesignRecord, DesignError> {
    let view = LocalView::new(sub, h_self, h_prev, packet)?;
    let vp = verify_problem(&view, opts);
    let mut audit = Vec::new();
    let point = solve_audited(&view, Stage::Verify, &vp.prob, opts, &mut audit)?;
    let mut theta = point.theta;
    let q = vp.q.value(&theta);
    require_pd(view.index, "storage matrix", &q)?;
    push_epsilon(&vp.prob, &mut theta, vp.eps, opts);
    let m_cl = view.messenger(
        &vp.s.eval(&theta),
        vp.x.as_ref().map(|x| x.eval(&theta)).as_ref(),
    );
    require_pd(view.index, "messenger matrix", &m_cl)?;
    Ok(DesignRecord {
        index: view.index,
        q,
        epsilon: vp.eps.value(&theta),
        k_self: None,
        k_to_prev: None,
        k_prev_to_self: None,
        k_to_next: None,
        m_cl,
        route: Route::Verified,
        audit,
    })
}

/// Gains applied around subsystem `i`; `None` means zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalGains {
    pub k_self: Option<Matrix>,
    pub k_to_prev: Option<Matrix>,
    pub k_prev_to_self: Option<Matrix>,
}

/// Closed-loop messenger matrix of subsystem `i` at a given storage
/// matrix, `eps_i` and gains, without solving anything.
pub fn messenger_at(
    sub: &Subsystem,
    h_self: &Matrix,
    h_prev: Option<&Matrix>,
    packet: Option<&MessengerPacket>,
    q: &Matrix,
    epsilon: f64,
    gains: &LocalGains,
) -> Result<Matrix, DesignError> {
    let view = LocalView::new(sub, h_self, h_prev, packet)?;
    let gp = gain_problem(&view, q, &DesignOptions::default());
    let mut theta = vec![0.0; gp.prob.var_count];
    theta[gp.eps.index()] = epsilon;
    let check = |var: MatVar, k: &Matrix, name: &str| {
        if var.shape() == k.shape() {
            Ok(())
        } else {
            Err(DesignError::DimensionMismatch(format!(
                "{name} is {:?}, expected {:?}",
                k.shape(),
                var.shape()
            )))
        }
    };
    if let Some(k) = &gains.k_self {
        check(gp.k_self, k, "K(i,i)")?;
        gp.k_self.encode(k, &mut theta);
    }
    match gp.link_vars {
        Some((k_prev, k_up)) => {
            if let Some(k) = &gains.k_to_prev {
                check(k_prev, k, "K(i,i-1)")?;
                k_prev.encode(k, &mut theta);
            }
            if let Some(k) = &gains.k_prev_to_self {
                check(k_up, k, "K(i-1,i)")?;
                k_up.encode(k, &mut theta);
            }
        }
        None if gains.k_to_prev.is_some() || gains.k_prev_to_self.is_some() => {
            return Err(DesignError::DimensionMismatch(
                "gain towards a missing predecessor".into(),
            ))
        }
        None => {}
    }
    Ok(view.messenger(
        &gp.s.eval(&theta),
        gp.x.as_ref().map(|x| x.eval(&theta)).as_ref(),
    ))
}

/// Gains found by the first synthesis stage.
struct RelaxedSolution {
    q: Matrix,
    epsilon: f64,
    k_self: Matrix,
    k_to_prev: Option<Matrix>,
    k_prev_to_self: Option<Matrix>,
    /// Worst `Q B3 K - Z` residual for the product form.
    gain_residual: f64,
}

fn relaxed_inverse_storage(
    view: &LocalView<'_>,
    opts: &DesignOptions,
    audit: &mut Vec<SolveAudit>,
) -> Result<RelaxedSolution, DesignError> {
    let sub = view.sub;
    let (n, p) = (view.n(), sub.coupling_dim());
    let mut layout = VarLayout::new();
    let y = layout.symmetric(n);
    let delta = layout.scalar();
    let w = layout.general(p, n);
    let link_vars = view.link.as_ref().map(|link| {
        let p_prev = link.packet.t_prev.ncols();
        (
            layout.general(n, p_prev),
            layout.general(p, link.chol.nrows()),
        )
    });
    let ye = y.expr();
    let top_left = -(ye.mul_right(&view.a_bar.transpose()) + ye.mul_left(&view.a_bar))
        - w.expr().mul_left(&sub.b3).sym_part2();
    let master = match (&view.link, link_vars) {
        (Some(link), Some((v, k_prev))) => {
            let n_prev = link.chol.nrows();
            let cross = (ye.mul_right(&link.packet.g_prev.transpose())
                + v.expr().mul_right(&link.packet.t_prev.transpose())
                + k_prev.expr().mul_left(&sub.b3)
                + &(&sub.b1 * &link.h_prev))
                .mul_right(&link.chol_inv_t);
            AffineMatrix::from_blocks(&[
                vec![top_left, cross.clone(), ye.clone()],
                vec![
                    cross.transpose(),
                    AffineMatrix::identity(n_prev),
                    AffineMatrix::zeros(n_prev, n),
                ],
                vec![
                    ye.clone(),
                    AffineMatrix::zeros(n, n_prev),
                    delta.times_identity(n),
                ],
            ])
        }
        _ => AffineMatrix::from_blocks(&[
            vec![top_left, ye.clone()],
            vec![ye.clone(), delta.times_identity(n)],
        ]),
    };
    let mut prob = AffineFeasibilityProblem::new(layout.count());
    prob.require_positive(master);
    prob.require_positive(ye.clone());
    // delta <= 1/eps_min, scaled so the constant term stays O(1)
    prob.require_positive(AffineMatrix::identity(1) - delta.times_identity(1).scale(opts.eps_min));
    prob.require_zero(&(ye.mul_right(&sub.c.transpose()) - &sub.b2));
    let point = solve_audited(view, Stage::SynthesisRelaxed, &prob, opts, audit)?;
    let theta = &point.theta;

    let y_val = y.value(theta);
    let chol = cholesky_lower(&y_val)
        .map_err(|e| DesignError::infeasible(view.index, format!("inverse storage matrix: {e}")))?;
    let y_inv = solve_lower_transposed(&chol, &solve_lower(&chol, &Matrix::identity(n, n)));
    let q = project_storage(sub, &((&y_inv + y_inv.transpose()) * 0.5));
    let (k_to_prev, k_prev_to_self) = match link_vars {
        Some((v, k_prev)) => (
            Some(k_prev.value(theta)),
            Some(v.value(theta).transpose() * &q),
        ),
        None => (None, None),
    };
    Ok(RelaxedSolution {
        epsilon: 1.0 / delta.value(theta),
        k_self: w.value(theta) * &q,
        k_to_prev,
        k_prev_to_self,
        q,
        gain_residual: 0.0,
    })
}

fn relaxed_gain_product(
    view: &LocalView<'_>,
    opts: &DesignOptions,
    audit: &mut Vec<SolveAudit>,
) -> Result<RelaxedSolution, DesignError> {
    let sub = view.sub;
    let n = view.n();
    let mut layout = VarLayout::new();
    let q = layout.symmetric(n);
    let eps = layout.scalar();
    let z_self = layout.general(n, n);
    let link_vars = view.link.as_ref().map(|link| {
        let p_prev = link.packet.t_prev.ncols();
        (
            layout.general(n, link.chol.nrows()),
            layout.general(p_prev, n),
        )
    });
    let qe = q.expr();
    let s = view.lyapunov_term(&qe) - z_self.expr().sym_part2() - eps.times_identity(n);
    let x = view
        .link
        .as_ref()
        .zip(link_vars)
        .map(|(link, (z_prev, k_up))| {
            (AffineMatrix::constant(link.packet.g_prev.clone())
                + k_up.expr().mul_left(&link.packet.t_prev))
            .transpose()
                + qe.mul_right(&(&sub.b1 * &link.h_prev))
                + z_prev.expr()
        });
    let mut prob = AffineFeasibilityProblem::new(layout.count());
    prob.require_positive(view.master(&s, x.as_ref()));
    prob.require_positive(qe.clone());
    prob.require_zero(&(qe.mul_right(&sub.b2) - &sub.c.transpose()));
    prob.set_lower_bound(eps.index(), opts.eps_min);
    let point = solve_audited(view, Stage::SynthesisRelaxed, &prob, opts, audit)?;
    let theta = &point.theta;

    let q_val = q.value(theta);
    let (k_self, mut residual) = recover_gains(&q_val, &sub.b3, &z_self.value(theta));
    let (k_to_prev, k_prev_to_self) = match link_vars {
        Some((z_prev, k_up)) => {
            let (k, r) = recover_gains(&q_val, &sub.b3, &z_prev.value(theta));
            residual = residual.max(r);
            (Some(k), Some(k_up.value(theta)))
        }
        None => (None, None),
    };
    Ok(RelaxedSolution {
        q: q_val,
        epsilon: eps.value(theta),
        k_self,
        k_to_prev,
        k_prev_to_self,
        gain_residual: residual,
    })
}

/// Nearest symmetric `Q` (Frobenius) with `Q B2 = C'`.
fn project_storage(sub: &Subsystem, q: &Matrix) -> Matrix {
    let n = q.nrows();
    let mut layout = VarLayout::new();
    let qv = layout.symmetric(n);
    let mut prob = AffineFeasibilityProblem::new(layout.count());
    prob.require_zero(&(qv.expr().mul_right(&sub.b2) - &sub.c.transpose()));
    let mut theta = vec![0.0; layout.count()];
    qv.encode(q, &mut theta);
    let e = &prob.eq_matrix;
    if e.nrows() == 0 {
        return q.clone();
    }
    let x = nalgebra::DVector::from_column_slice(&theta);
    let r = e * &x - &prob.eq_rhs;
    let Ok(corr) = e.clone().svd(true, true).solve(&r, 1e-14) else {
        return q.clone();
    };
    qv.value((x - corr).as_slice())
}

struct GainProblem {
    prob: AffineFeasibilityProblem,
    eps: ScalarVar,
    k_self: MatVar,
    link_vars: Option<(MatVar, MatVar)>,
    s: AffineMatrix,
    x: Option<AffineMatrix>,
}

/// Positivity of the messenger matrix with `Q_i` frozen: affine in
/// `eps_i`, `K(i,i)`, `K(i,i-1)`, `K(i-1,i)`.
fn gain_problem(view: &LocalView<'_>, q: &Matrix, opts: &DesignOptions) -> GainProblem {
    let sub = view.sub;
    let (n, p) = (view.n(), sub.coupling_dim());
    let mut layout = VarLayout::new();
    let eps = layout.scalar();
    let k_self = layout.general(p, n);
    let link_vars = view.link.as_ref().map(|link| {
        let p_prev = link.packet.t_prev.ncols();
        (
            layout.general(p, link.chol.nrows()),
            layout.general(p_prev, n),
        )
    });
    let qb3 = q * &sub.b3;
    let h_self_hat =
        AffineMatrix::constant(q * &sub.b1 * view.h_self) + k_self.expr().mul_left(&qb3);
    let lyap = -(AffineMatrix::constant(sub.a.transpose() * q + q * &sub.a));
    let s = lyap - h_self_hat.sym_part2() - eps.times_identity(n);
    let x = view
        .link
        .as_ref()
        .zip(link_vars)
        .map(|(link, (k_prev, k_up))| {
            (AffineMatrix::constant(link.packet.g_prev.clone())
                + k_up.expr().mul_left(&link.packet.t_prev))
            .transpose()
                + AffineMatrix::constant(q * &sub.b1 * &link.h_prev)
                + k_prev.expr().mul_left(&qb3)
        });
    let mut prob = AffineFeasibilityProblem::new(layout.count());
    prob.require_positive(view.master(&s, x.as_ref()));
    prob.set_lower_bound(eps.index(), opts.eps_min);
    GainProblem {
        prob,
        eps,
        k_self,
        link_vars,
        s,
        x,
    }
}

/// Designs `K(i,i)`, `K(i,i-1)` and `K(i-1,i)` so that the closed-loop
/// messenger matrix of subsystem `i` is positive definite.
pub fn local_synthesize(
    sub: &Subsystem,
    h_self: &Matrix,
    h_prev: Option<&Matrix>,
    packet: Option<&MessengerPacket>,
    opts: &DesignOptions,
) -> Result<DesignRecord, DesignError> {
    let view = LocalView::new(sub, h_self, h_prev, packet)?;
    let mut audit = Vec::new();
    let relaxed = match opts.relaxed_form {
        RelaxedForm::InverseStorage => relaxed_inverse_storage(&view, opts, &mut audit)?,
        RelaxedForm::GainProduct => relaxed_gain_product(&view, opts, &mut audit)?,
    };
    require_pd(view.index, "storage matrix", &relaxed.q)?;
    let gp = gain_problem(&view, &relaxed.q, opts);

    let mut theta = if opts.refine_gains {
        solve_audited(&view, Stage::SynthesisGains, &gp.prob, opts, &mut audit)?.theta
    } else {
        if relaxed.gain_residual > opts.gain_tol {
            return Err(DesignError::GainRecoveryFailed {
                index: view.index,
                residual: relaxed.gain_residual,
            });
        }
        let mut theta = vec![0.0; gp.prob.var_count];
        theta[gp.eps.index()] = relaxed.epsilon;
        gp.k_self.encode(&relaxed.k_self, &mut theta);
        if let (Some((k_prev, k_up)), Some(a), Some(b)) =
            (gp.link_vars, &relaxed.k_to_prev, &relaxed.k_prev_to_self)
        {
            k_prev.encode(a, &mut theta);
            k_up.encode(b, &mut theta);
        }
        let margin = margin_for(opts, &gp.prob);
        let certificate = certify_point(&theta, &gp.prob, margin);
        let passed = certificate.passed();
        audit.push(SolveAudit {
            index: view.index,
            stage: Stage::SynthesisGains,
            certificate,
        });
        if !passed {
            return Err(DesignError::infeasible(
                view.index,
                "recovered gains fail the messenger condition",
            ));
        }
        theta
    };
    push_epsilon(&gp.prob, &mut theta, gp.eps, opts);
    let m_cl = view.messenger(
        &gp.s.eval(&theta),
        gp.x.as_ref().map(|x| x.eval(&theta)).as_ref(),
    );
    require_pd(view.index, "messenger matrix", &m_cl)?;
    let (k_to_prev, k_prev_to_self) = match gp.link_vars {
        Some((k_prev, k_up)) => (Some(k_prev.value(&theta)), Some(k_up.value(&theta))),
        None => (None, None),
    };
    Ok(DesignRecord {
        index: view.index,
        q: relaxed.q,
        epsilon: gp.eps.value(&theta),
        k_self: Some(gp.k_self.value(&theta)),
        k_to_prev,
        k_prev_to_self,
        k_to_next: None,
        m_cl,
        route: Route::Synthesized,
        audit,
    })
}

/// Least-squares `K` with `(Q B3) K = Z`, and `||Q B3 K - Z||` (max entry).
pub fn recover_gains(q: &Matrix, b3: &Matrix, z: &Matrix) -> (Matrix, f64) {
    let qb3 = q * b3;
    let k = qb3
        .clone()
        .svd(true, true)
        .solve(z, 1e-14)
        .unwrap_or_else(|_| Matrix::zeros(b3.ncols(), z.ncols()));
    let residual = max_abs(&(&qb3 * &k - z));
    (k, residual)
}

/// Packet for the successor, or `None` at the tail of the cascade.
pub fn build_packet(
    record: &DesignRecord,
    sub: &Subsystem,
    h_next: Option<&Matrix>,
) -> Result<Option<MessengerPacket>, DesignError> {
    let Some(h) = h_next else {
        return Ok(None);
    };
    if h.nrows() != sub.coupling_dim() || record.q.nrows() != sub.state_dim() {
        return Err(DesignError::DimensionMismatch(format!(
            "h({},{}) has {} rows, subsystem has {} coupling inputs",
            record.index + 1,
            record.index + 2,
            h.nrows(),
            sub.coupling_dim()
        )));
    }
    Ok(Some(MessengerPacket {
        prev_index: record.index,
        m_prev: record.m_cl.clone(),
        g_prev: &record.q * &sub.b1 * h,
        t_prev: &record.q * &sub.b3,
    }))
}

/// One step of the sequential design: verify, else synthesize.
pub fn design_step(
    sub: &Subsystem,
    h_self: &Matrix,
    h_prev: Option<&Matrix>,
    packet: Option<&MessengerPacket>,
    opts: &DesignOptions,
) -> Result<DesignRecord, DesignError> {
    let verify_err = match local_verify(sub, h_self, h_prev, packet, opts) {
        Ok(record) => return Ok(record),
        Err(e @ DesignError::DimensionMismatch(_)) => return Err(e),
        Err(e) => e,
    };
    match local_synthesize(sub, h_self, h_prev, packet, opts) {
        Ok(record) => Ok(record),
        Err(e @ DesignError::DimensionMismatch(_)) => Err(e),
        Err(e) => Err(DesignError::DesignFailed {
            index: packet.map_or(0, |p| p.prev_index + 1),
            verify: verify_err.to_string(),
            synthesize: e.to_string(),
        }),
    }
}

fn global_epsilon(records: &[DesignRecord]) -> f64 {
    records
        .iter()
        .map(|r| r.epsilon)
        .fold(f64::INFINITY, f64::min)
}

/// Runs the sequential design over the whole cascade in index order.
pub fn run_cascade_design(
    net: &CascadeNetwork,
    opts: &DesignOptions,
) -> Result<NetworkDesignState, DesignError> {
    let report = validate_network(net);
    if !report.is_ok() {
        return Err(DesignError::InvalidNetwork(report));
    }
    let mut records: Vec<DesignRecord> = Vec::with_capacity(net.len());
    for (i, sub) in net.subsystems.iter().enumerate() {
        let h_self = net.coupling(i, i);
        let (packet, h_prev) = if i == 0 {
            (None, None)
        } else {
            let h_next = net.coupling(i - 1, i);
            let packet = build_packet(&records[i - 1], &net.subsystems[i - 1], Some(&h_next))?;
            (packet, Some(net.coupling(i, i - 1)))
        };
        let record = design_step(sub, &h_self, h_prev.as_ref(), packet.as_ref(), opts)?;
        if i > 0 {
            records[i - 1].k_to_next = record.k_prev_to_self.clone();
        }
        records.push(record);
    }
    Ok(NetworkDesignState {
        net: net.clone(),
        global_epsilon: global_epsilon(&records),
        records,
    })
}

/// Appends a subsystem to a designed cascade, designing only the new
/// subsystem and the new coupling gains.
///
/// `h_self = h(N+1,N+1)`, `h_to_prev = h(N+1,N)`, `h_from_prev = h(N,N+1)`.
pub fn add_subsystem(
    state: &NetworkDesignState,
    new_sub: Subsystem,
    h_self: Matrix,
    h_to_prev: Matrix,
    h_from_prev: Matrix,
    opts: &DesignOptions,
) -> Result<NetworkDesignState, DesignError> {
    if !state.is_complete() {
        return Err(DesignError::DimensionMismatch(format!(
            "design state covers {} of {} subsystems",
            state.records.len(),
            state.net.len()
        )));
    }
    let n_old = state.net.len();
    let (n, p) = (new_sub.state_dim(), new_sub.coupling_dim());
    let mut net = state.net.clone();
    if n_old > 0 {
        let prev = &state.net.subsystems[n_old - 1];
        if h_to_prev.shape() != (p, prev.state_dim()) {
            return Err(DesignError::DimensionMismatch(format!(
                "h({},{}) is {:?}, expected {:?}",
                n_old + 1,
                n_old,
                h_to_prev.shape(),
                (p, prev.state_dim())
            )));
        }
        if h_from_prev.shape() != (prev.coupling_dim(), n) {
            return Err(DesignError::DimensionMismatch(format!(
                "h({},{}) is {:?}, expected {:?}",
                n_old,
                n_old + 1,
                h_from_prev.shape(),
                (prev.coupling_dim(), n)
            )));
        }
    }
    net.subsystems.push(new_sub);
    net.set_coupling(n_old, n_old, h_self.clone());
    if n_old > 0 {
        net.set_coupling(n_old, n_old - 1, h_to_prev.clone());
        net.set_coupling(n_old - 1, n_old, h_from_prev.clone());
    }
    let report = validate_network(&net);
    if !report.is_ok() {
        return Err(DesignError::DimensionMismatch(report.to_string()));
    }
    let mut records = state.records.clone();
    let (packet, h_prev) = if n_old == 0 {
        (None, None)
    } else {
        let packet = build_packet(
            &records[n_old - 1],
            &net.subsystems[n_old - 1],
            Some(&h_from_prev),
        )?;
        (packet, Some(&h_to_prev))
    };
    let record = design_step(
        &net.subsystems[n_old],
        &h_self,
        h_prev,
        packet.as_ref(),
        opts,
    )?;
    if n_old > 0 {
        records[n_old - 1].k_to_next = record.k_prev_to_self.clone();
    }
    records.push(record);
    Ok(NetworkDesignState {
        net,
        global_epsilon: global_epsilon(&records),
        records,
    })
}
