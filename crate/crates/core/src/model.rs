//! Subsystems, couplings and the assembled cascade.
//!
//! Indices are zero-based inside the library. File formats and reports
//! convert to one-based numbering at the boundary.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

/// One member of the cascade:
///
/// ```text
/// x' = A x + B1 v + B2 w + B3 u
/// y  = C x
/// ```
///
/// with state `x` of size n, coupling input `v` and control `u` of size p,
/// disturbance `w` and output `y` of size m.
#[derive(Clone, Debug, PartialEq)]
pub struct Subsystem {
    pub a: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
    pub b3: Matrix,
    pub c: Matrix,
}

impl Subsystem {
    pub fn new(a: Matrix, b1: Matrix, b2: Matrix, b3: Matrix, c: Matrix) -> Self {
        Self { a, b1, b2, b3, c }
    }

    /// Single-state, single-channel subsystem.
    pub fn scalar(a: f64, b1: f64, b2: f64, b3: f64, c: f64) -> Self {
        let s = |v| Matrix::from_element(1, 1, v);
        Self::new(s(a), s(b1), s(b2), s(b3), s(c))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn coupling_dim(&self) -> usize {
        self.b1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Structural problems of this subsystem alone, tagged with `index`.
    pub fn violations(&self, index: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.a.nrows();
        let p = self.b1.ncols();
        let m = self.c.nrows();
        for (name, mat) in self.named() {
            if mat.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite {
                    subsystem: index,
                    matrix: name,
                });
            }
        }
        let mut expect = |name: &'static str, mat: &Matrix, rows: usize, cols: usize| {
            if mat.shape() != (rows, cols) {
                out.push(Violation::DimensionMismatch {
                    subsystem: index,
                    matrix: name,
                    expected: (rows, cols),
                    found: mat.shape(),
                });
            }
        };
        expect("A", &self.a, n, n);
        expect("B1", &self.b1, n, p);
        expect("B2", &self.b2, n, m);
        expect("B3", &self.b3, n, p);
        expect("C", &self.c, m, n);
        out
    }

    fn named(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("A", &self.a),
            ("B1", &self.b1),
            ("B2", &self.b2),
            ("B3", &self.b3),
            ("C", &self.c),
        ]
    }
}

/// Coupling gain `h(to, from)`: contribution of `x_from` to the coupling
/// input `v_to`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    pub to: usize,
    pub from: usize,
    pub h: Matrix,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum Violation {
    #[error("network has no subsystems")]
    EmptyNetwork,
    #[error("subsystem {}: {matrix} is {}x{}, expected {}x{}", .subsystem + 1, .found.0, .found.1, .expected.0, .expected.1)]
    DimensionMismatch {
        subsystem: usize,
        matrix: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("subsystem {}: {matrix} has non-finite entries", .subsystem + 1)]
    NonFinite {
        subsystem: usize,
        matrix: &'static str,
    },
    #[error("NonCascadeCoupling: h({},{}) links non-adjacent subsystems", .to + 1, .from + 1)]
    NonCascadeCoupling { to: usize, from: usize },
    #[error("coupling h({},{}) refers to a subsystem outside 1..={count}", .to + 1, .from + 1)]
    CouplingOutOfRange {
        to: usize,
        from: usize,
        count: usize,
    },
    #[error("coupling h({},{}) is {}x{}, expected {}x{}", .to + 1, .from + 1, .found.0, .found.1, .expected.0, .expected.1)]
    CouplingShape {
        to: usize,
        from: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("coupling h({},{}) has non-finite entries", .to + 1, .from + 1)]
    CouplingNonFinite { to: usize, from: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network:\n{0}")]
    InvalidNetwork(ValidationReport),
}

/// Ordered subsystems plus the tri-diagonal coupling blocks.
///
/// Couplings are keyed by `(to, from)`. Blocks that are not stored but lie
/// inside the cascade band are read as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CascadeNetwork {
    pub subsystems: Vec<Subsystem>,
    pub couplings: BTreeMap<(usize, usize), CouplingBlock>,
}

impl CascadeNetwork {
    pub fn new(subsystems: Vec<Subsystem>) -> Self {
        Self {
            subsystems,
            couplings: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn set_coupling(&mut self, to: usize, from: usize, h: Matrix) {
        self.couplings
            .insert((to, from), CouplingBlock { to, from, h });
    }

    pub fn with_coupling(mut self, to: usize, from: usize, h: Matrix) -> Self {
        self.set_coupling(to, from, h);
        self
    }

    /// Stored coupling, if any.
    pub fn stored_coupling(&self, to: usize, from: usize) -> Option<&Matrix> {
        self.couplings.get(&(to, from)).map(|b| &b.h)
    }

    /// `h(to, from)`, zero-filled when absent.
    pub fn coupling(&self, to: usize, from: usize) -> Matrix {
        match self.stored_coupling(to, from) {
            Some(h) => h.clone(),
            None => Matrix::zeros(
                self.subsystems[to].coupling_dim(),
                self.subsystems[from].state_dim(),
            ),
        }
    }

    pub fn state_dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(Subsystem::state_dim).collect()
    }
}

pub fn validate_network(net: &CascadeNetwork) -> ValidationReport {
    let mut violations = Vec::new();
    if net.is_empty() {
        violations.push(Violation::EmptyNetwork);
    }
    for (i, sub) in net.subsystems.iter().enumerate() {
        violations.extend(sub.violations(i));
    }
    let count = net.len();
    for (&(to, from), block) in &net.couplings {
        debug_assert_eq!((block.to, block.from), (to, from));
        if to >= count || from >= count {
            violations.push(Violation::CouplingOutOfRange { to, from, count });
            continue;
        }
        if to.abs_diff(from) > 1 {
            violations.push(Violation::NonCascadeCoupling { to, from });
            continue;
        }
        let expected = (
            net.subsystems[to].coupling_dim(),
            net.subsystems[from].state_dim(),
        );
        if block.h.shape() != expected {
            violations.push(Violation::CouplingShape {
                to,
                from,
                expected,
                found: block.h.shape(),
            });
        }
        if block.h.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::CouplingNonFinite { to, from });
        }
    }
    ValidationReport { violations }
}

/// Stacked interconnected system `x' = A x + B1 v + B2 w + B3 u`, `v = H x`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSystem {
    pub a: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
    pub b3: Matrix,
    pub c: Matrix,
    pub h: Matrix,
    pub state_dims: Vec<usize>,
    pub coupling_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
}

impl GlobalSystem {
    /// Block `(i, j)` of `H`.
    pub fn h_block(&self, i: usize, j: usize) -> Matrix {
        let rows = offsets(&self.coupling_dims);
        let cols = offsets(&self.state_dims);
        self.h
            .view(
                (rows[i], cols[j]),
                (self.coupling_dims[i], self.state_dims[j]),
            )
            .into_owned()
    }
}

pub(crate) fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .iter()
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

pub(crate) fn block_diag<'a, I>(blocks: I) -> Matrix
where
    I: IntoIterator<Item = &'a Matrix> + Clone,
{
    let (rows, cols) = blocks
        .clone()
        .into_iter()
        .fold((0, 0), |(r, c), b| (r + b.nrows(), c + b.ncols()));
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn assemble_global(net: &CascadeNetwork) -> Result<GlobalSystem, ModelError> {
    let report = validate_network(net);
    if !report.is_ok() {
        return Err(ModelError::InvalidNetwork(report));
    }
    let subs = &net.subsystems;
    let state_dims = net.state_dims();
    let coupling_dims: Vec<usize> = subs.iter().map(Subsystem::coupling_dim).collect();
    let output_dims: Vec<usize> = subs.iter().map(Subsystem::output_dim).collect();

    let row_off = offsets(&coupling_dims);
    let col_off = offsets(&state_dims);
    let mut h = Matrix::zeros(coupling_dims.iter().sum(), state_dims.iter().sum());
    for block in net.couplings.values() {
        h.view_mut((row_off[block.to], col_off[block.from]), block.h.shape())
            .copy_from(&block.h);
    }

    Ok(GlobalSystem {
        a: block_diag(subs.iter().map(|s| &s.a)),
        b1: block_diag(subs.iter().map(|s| &s.b1)),
        b2: block_diag(subs.iter().map(|s| &s.b2)),
        b3: block_diag(subs.iter().map(|s| &s.b3)),
        c: block_diag(subs.iter().map(|s| &s.c)),
        h,
        state_dims,
        coupling_dims,
        output_dims,
    })
}
