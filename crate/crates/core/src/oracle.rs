//! Centralized ground truth for a designed cascade.
//!
//! Nothing here reuses the sequential machinery: the closed loop is
//! assembled globally, the dissipation matrix
//! `W = -Acl' Q - Q Acl - eps I` is checked with a dense symmetric
//! eigensolver, and storage inequalities are tested on simulated
//! trajectories.

use std::io::{self, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blockla::{cholesky_lower, min_eigen_sym, norm_inf, BlockTriDiagonal};
use crate::model::{assemble_global, block_diag, offsets, Matrix};
use crate::protocol::NetworkDesignState;

/// Relative symmetry tolerance on `W` before the eigenvalue test.
pub const W_SYMMETRY_TOL: f64 = 1e-12;

/// Default simulation horizon and step.
pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum OracleError {
    #[error("incomplete design state: {0}")]
    IncompleteState(String),
    #[error("gain K({},{}) differs between the records that carry it", .to + 1, .from + 1)]
    InconsistentGains { to: usize, from: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("simulation produced a non-finite value at t = {time}")]
    NonFinite { time: f64 },
}

/// `x' = Acl x + B2 w`, `y = C x`, with storage `V = x' Q x / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopSystem {
    pub acl: Matrix,
    pub k: Matrix,
    pub b2: Matrix,
    pub c: Matrix,
    /// Block-diagonal storage matrix.
    pub q: Matrix,
    /// `min eps_i`.
    pub epsilon: f64,
    pub epsilons: Vec<f64>,
    pub state_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
}

impl ClosedLoopSystem {
    pub fn state_dim(&self) -> usize {
        self.acl.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn q_block(&self, i: usize) -> Matrix {
        let off = offsets(&self.state_dims);
        let n = self.state_dims[i];
        self.q.view((off[i], off[i]), (n, n)).into_owned()
    }

    fn block(&self, m: &Matrix, row_dims: &[usize], i: usize, j: usize) -> Matrix {
        let r = offsets(row_dims);
        let c = offsets(&self.state_dims);
        m.view((r[i], c[j]), (row_dims[i], self.state_dims[j]))
            .into_owned()
    }

    /// `W` with a uniform `eps`.
    pub fn w_matrix(&self) -> Matrix {
        let n = self.state_dim();
        -(self.acl.transpose() * &self.q)
            - &self.q * &self.acl
            - Matrix::identity(n, n) * self.epsilon
    }

    /// `W` with each diagonal block shifted by its own `eps_i`, in block
    /// tri-diagonal form.
    pub fn w_tridiagonal(&self) -> BlockTriDiagonal {
        let mut w = -(self.acl.transpose() * &self.q) - &self.q * &self.acl;
        let off = offsets(&self.state_dims);
        for (i, (&n, &e)) in self.state_dims.iter().zip(&self.epsilons).enumerate() {
            for k in 0..n {
                w[(off[i] + k, off[i] + k)] -= e;
            }
        }
        let w = (&w + w.transpose()) * 0.5;
        let count = self.state_dims.len();
        let diag = (0..count)
            .map(|i| self.block(&w, &self.state_dims, i, i))
            .collect();
        let upper = (1..count)
            .map(|i| self.block(&w, &self.state_dims, i - 1, i))
            .collect();
        BlockTriDiagonal::new(diag, upper).expect("blocks cut from a square matrix")
    }
}

/// Builds the closed loop from a complete design state. Absent gains are
/// zero blocks.
pub fn assemble_closed_loop(state: &NetworkDesignState) -> Result<ClosedLoopSystem, OracleError> {
    let net = &state.net;
    if !state.is_complete() {
        return Err(OracleError::IncompleteState(format!(
            "{} records for {} subsystems",
            state.records.len(),
            net.len()
        )));
    }
    let global = assemble_global(net).map_err(|e| OracleError::IncompleteState(e.to_string()))?;
    let rows = offsets(&global.coupling_dims);
    let cols = offsets(&global.state_dims);
    let mut k = Matrix::zeros(global.b3.ncols(), global.a.ncols());
    let mut place = |to: usize, from: usize, g: &Matrix| -> Result<(), OracleError> {
        let shape = (global.coupling_dims[to], global.state_dims[from]);
        if g.shape() != shape {
            return Err(OracleError::IncompleteState(format!(
                "K({},{}) is {:?}, expected {:?}",
                to + 1,
                from + 1,
                g.shape(),
                shape
            )));
        }
        k.view_mut((rows[to], cols[from]), shape).copy_from(g);
        Ok(())
    };
    for (i, rec) in state.records.iter().enumerate() {
        if let Some(g) = &rec.k_self {
            place(i, i, g)?;
        }
        if let Some(g) = &rec.k_to_prev {
            if i == 0 {
                return Err(OracleError::IncompleteState(
                    "first record carries K(1,0)".into(),
                ));
            }
            place(i, i - 1, g)?;
        }
        let downstream = state
            .records
            .get(i + 1)
            .and_then(|r| r.k_prev_to_self.as_ref());
        match (&rec.k_to_next, downstream) {
            (Some(a), Some(b)) if a != b => {
                return Err(OracleError::InconsistentGains { to: i, from: i + 1 })
            }
            (Some(g), _) | (None, Some(g)) => {
                if i + 1 >= state.records.len() {
                    return Err(OracleError::IncompleteState(format!(
                        "record {} carries a gain towards a missing successor",
                        i + 1
                    )));
                }
                place(i, i + 1, g)?;
            }
            (None, None) => {}
        }
    }
    for (i, rec) in state.records.iter().enumerate() {
        if rec.q.shape() != (global.state_dims[i], global.state_dims[i]) {
            return Err(OracleError::IncompleteState(format!(
                "Q_{} is {:?}, expected {n}x{n}",
                i + 1,
                rec.q.shape(),
                n = global.state_dims[i]
            )));
        }
    }
    let epsilons: Vec<f64> = state.records.iter().map(|r| r.epsilon).collect();
    let acl = &global.a + &global.b1 * &global.h + &global.b3 * &k;
    Ok(ClosedLoopSystem {
        acl,
        k,
        b2: global.b2,
        c: global.c,
        q: block_diag(state.records.iter().map(|r| &r.q)),
        epsilon: epsilons.iter().copied().fold(f64::INFINITY, f64::min),
        epsilons,
        state_dims: global.state_dims,
        output_dims: global.output_dims,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckFailure {
    /// `lambda_min(W)` below `-margin`.
    MatrixNotPositive,
    /// Some `Q_i B2_i - C_i'` too large.
    EqualityResidual,
    /// `Q_i` (one-based) has no Cholesky factor.
    StorageNotPositive(usize),
    /// `W` is not symmetric to the relative tolerance.
    Asymmetric,
    NonFinite,
}

impl CheckFailure {
    pub fn name(&self) -> &'static str {
        match self {
            CheckFailure::MatrixNotPositive => "MatrixNotPositive",
            CheckFailure::EqualityResidual => "EqualityResidual",
            CheckFailure::StorageNotPositive(_) => "StorageNotPositive",
            CheckFailure::Asymmetric => "Asymmetric",
            CheckFailure::NonFinite => "NonFinite",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub w_min_eig: f64,
    pub w_norm: f64,
    pub eq_residual: f64,
    pub margin: f64,
    pub eq_tolerance: f64,
    pub failures: Vec<CheckFailure>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for Certificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "verdict: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        writeln!(
            f,
            "w_min_eig: {:e} (margin {:e})",
            self.w_min_eig, self.margin
        )?;
        write!(
            f,
            "eq_residual: {:e} (tolerance {:e})",
            self.eq_residual, self.eq_tolerance
        )?;
        for failure in &self.failures {
            match failure {
                CheckFailure::StorageNotPositive(i) => {
                    write!(f, "\nreason: StorageNotPositive (Q_{i})")?
                }
                other => write!(f, "\nreason: {}", other.name())?,
            }
        }
        Ok(())
    }
}

pub fn default_margin(w: &Matrix) -> f64 {
    1e-8 * norm_inf(w).max(1.0)
}

/// Brute-force passivity check with the default margin.
pub fn centralized_sp_check(cl: &ClosedLoopSystem) -> Certificate {
    centralized_sp_check_with(cl, &CheckOptions::default())
}

/// Overrides for the default positivity margin and equality tolerance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckOptions {
    pub margin: Option<f64>,
    pub eq_tolerance: Option<f64>,
}

/// Passes iff `lambda_min(W) >= -margin`, every `Q_i B2_i = C_i'` to
/// `1e-8 max(1, ||C||)`, and every `Q_i` is positive definite.
pub fn centralized_sp_check_with(cl: &ClosedLoopSystem, opts: &CheckOptions) -> Certificate {
    let mut failures = Vec::new();
    let w = cl.w_matrix();
    let w_norm = norm_inf(&w);
    let margin = opts.margin.unwrap_or_else(|| default_margin(&w));

    let w_min_eig = if w.iter().all(|v| v.is_finite()) {
        let asym = norm_inf(&(&w - w.transpose()));
        if asym > W_SYMMETRY_TOL * w_norm.max(1.0) {
            failures.push(CheckFailure::Asymmetric);
        }
        min_eigen_sym(&((&w + w.transpose()) * 0.5)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    if w_min_eig.is_nan() {
        failures.push(CheckFailure::NonFinite);
    } else if w_min_eig < -margin {
        failures.push(CheckFailure::MatrixNotPositive);
    }

    let row_off = offsets(&cl.output_dims);
    let col_off = offsets(&cl.state_dims);
    let mut eq_residual: f64 = 0.0;
    for i in 0..cl.state_dims.len() {
        let (n, m) = (cl.state_dims[i], cl.output_dims[i]);
        let q = cl.q_block(i);
        let b2 = cl.b2.view((col_off[i], row_off[i]), (n, m)).into_owned();
        let c = cl.c.view((row_off[i], col_off[i]), (m, n)).into_owned();
        eq_residual = eq_residual.max(norm_inf(&(&q * &b2 - c.transpose())));
        let q_sym = (&q + q.transpose()) * 0.5;
        if cholesky_lower(&q_sym).is_err() {
            failures.push(CheckFailure::StorageNotPositive(i + 1));
        }
    }
    let eq_tolerance = opts
        .eq_tolerance
        .unwrap_or_else(|| 1e-8 * norm_inf(&cl.c).max(1.0));
    if !(eq_residual <= eq_tolerance) {
        failures.push(CheckFailure::EqualityResidual);
    }
    Certificate {
        w_min_eig,
        w_norm,
        eq_residual,
        margin,
        eq_tolerance,
        failures,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tone {
    pub amplitude: f64,
    /// rad/s
    pub frequency: f64,
    pub phase: f64,
}

/// Disturbance `w(t)`, one sum of tones per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Disturbance {
    pub channels: Vec<Vec<Tone>>,
}

impl Disturbance {
    pub const TONES: usize = 5;
    pub const BAND: (f64, f64) = (0.1, 10.0);

    pub fn zero(channels: usize) -> Self {
        Self {
            channels: vec![Vec::new(); channels],
        }
    }

    /// Five unit-amplitude tones per channel with frequencies uniform in
    /// the band and uniform phases, reproducible from `seed`.
    pub fn from_seed(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = (0..channels)
            .map(|_| {
                (0..Self::TONES)
                    .map(|_| Tone {
                        amplitude: 1.0,
                        frequency: rng.gen_range(Self::BAND.0..=Self::BAND.1),
                        phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    })
                    .collect()
            })
            .collect();
        Self { channels }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.channels.len(),
            self.channels.iter().map(|tones| {
                tones
                    .iter()
                    .map(|k| k.amplitude * (k.frequency * t + k.phase).sin())
                    .sum::<f64>()
            }),
        )
    }
}

/// Sampled closed-loop response.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    /// `V(x(t)) = x' Q x / 2`
    pub v: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Header `t,x1..xn,y1..ym,w1..wm,V`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.x.first().map_or(0, |x| x.len());
        let m = self.y.first().map_or(0, |y| y.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|k| format!("x{k}")));
        header.extend((1..=m).map(|k| format!("y{k}")));
        header.extend((1..=m).map(|k| format!("w{k}")));
        header.push("V".into());
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.t[k])
                .chain(self.x[k].iter().copied())
                .chain(self.y[k].iter().copied())
                .chain(self.w[k].iter().copied())
                .chain(std::iter::once(self.v[k]))
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Classic fixed-step fourth-order Runge–Kutta on `x' = Acl x + B2 w(t)`.
pub fn simulate_lti(
    cl: &ClosedLoopSystem,
    disturbance: &Disturbance,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory, OracleError> {
    if !(dt > 0.0 && horizon >= dt && horizon.is_finite()) {
        return Err(OracleError::InvalidArgument(format!(
            "need dt > 0 and T >= dt, got dt = {dt}, T = {horizon}"
        )));
    }
    let n = cl.state_dim();
    if x0.len() != n || disturbance.channels.len() != cl.b2.ncols() {
        return Err(OracleError::InvalidArgument(format!(
            "x0 has {} entries and w has {} channels; system has {n} states and {} inputs",
            x0.len(),
            disturbance.channels.len(),
            cl.b2.ncols()
        )));
    }
    let steps = (horizon / dt).round() as usize;
    let f = |t: f64, x: &DVector<f64>| &cl.acl * x + &cl.b2 * disturbance.eval(t);
    let storage = |x: &DVector<f64>| 0.5 * x.dot(&(&cl.q * x));

    let mut traj = Trajectory {
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        y: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps + 1),
        v: Vec::with_capacity(steps + 1),
    };
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { time: t });
        }
        traj.t.push(t);
        traj.y.push(&cl.c * &x);
        traj.w.push(disturbance.eval(t));
        traj.v.push(storage(&x));
        if k == steps {
            traj.x.push(x);
            break;
        }
        let k1 = f(t, &x);
        let k2 = f(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)));
        let k3 = f(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)));
        let k4 = f(t + dt, &(&x + &k3 * dt));
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        traj.x.push(std::mem::replace(&mut x, next));
    }
    Ok(traj)
}

/// `min_t [ int_{t0}^{t} (w'y - eps x'x) - (V(x(t)) - V(x(t0))) ]` over the
/// grid, trapezoid rule. The first grid point contributes 0.
pub fn dissipation_margin(traj: &Trajectory, epsilon: f64) -> f64 {
    let Some(&v0) = traj.v.first() else {
        return 0.0;
    };
    let supply = |k: usize| traj.w[k].dot(&traj.y[k]) - epsilon * traj.x[k].norm_squared();
    let mut integral = 0.0;
    let mut worst: f64 = 0.0;
    for k in 1..traj.len() {
        integral += 0.5 * (traj.t[k] - traj.t[k - 1]) * (supply(k) + supply(k - 1));
        worst = worst.min(integral - (traj.v[k] - v0));
    }
    worst
}

/// One disturbance trial from rest.
///
/// With `V = x'Qx/2`, `W >= 0` gives `V' <= w'y - (eps/2) x'x`, so the
/// supply is charged at half the certified `eps`.
pub fn dissipation_trial(
    cl: &ClosedLoopSystem,
    seed: u64,
    horizon: f64,
    dt: f64,
) -> Result<(Trajectory, f64), OracleError> {
    let w = Disturbance::from_seed(seed, cl.b2.ncols());
    let x0 = DVector::zeros(cl.state_dim());
    let traj = simulate_lti(cl, &w, &x0, horizon, dt)?;
    let margin = dissipation_margin(&traj, 0.5 * cl.epsilon);
    Ok((traj, margin))
}
