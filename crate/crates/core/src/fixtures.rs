//! The four-subsystem cascade used throughout the tests, plus helpers to
//! grow it one subsystem at a time.

use crate::model::{CascadeNetwork, Matrix, Subsystem};

fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, data)
}

fn s(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

pub fn example_subsystems() -> Vec<Subsystem> {
    vec![
        Subsystem::new(
            m(2, 2, &[-9.0, 1.0, 5.0, 7.0]),
            m(2, 1, &[1.0, 1.0]),
            m(2, 1, &[1.0, 0.5]),
            m(2, 1, &[1.0, 1.0]),
            m(1, 2, &[3.0, 2.0]),
        ),
        Subsystem::scalar(3.0, 1.0, 1.0, 1.0, 1.0),
        Subsystem::scalar(-1.0, 1.0, 1.0, 1.0, 1.0),
        Subsystem::new(
            m(2, 2, &[2.0, 1.0, 3.0, 0.8]),
            m(2, 1, &[1.2, 0.8]),
            m(2, 1, &[0.5, -0.2]),
            m(2, 1, &[1.2, 0.8]),
            m(1, 2, &[2.1, 0.6]),
        ),
    ]
}

/// All coupling blocks `(to, from, h)` of the final four-subsystem cascade,
/// zero-based.
pub fn example_couplings() -> Vec<(usize, usize, Matrix)> {
    vec![
        (0, 0, m(1, 2, &[0.5, -0.7])),
        (0, 1, s(0.1)),
        (1, 0, m(1, 2, &[1.0, -0.5])),
        (1, 1, s(0.5)),
        (1, 2, s(-0.1)),
        (2, 1, s(-0.7)),
        (2, 2, s(0.2)),
        (2, 3, m(1, 2, &[0.2, 0.2])),
        (3, 2, s(-0.9)),
        (3, 3, m(1, 2, &[1.1, 0.4])),
    ]
}

/// The first `count` subsystems with every coupling among them.
pub fn example_network_prefix(count: usize) -> CascadeNetwork {
    let subs: Vec<Subsystem> = example_subsystems().into_iter().take(count).collect();
    let mut net = CascadeNetwork::new(subs);
    for (to, from, h) in example_couplings() {
        if to < count && from < count {
            net.set_coupling(to, from, h);
        }
    }
    net
}

pub fn example_network() -> CascadeNetwork {
    example_network_prefix(4)
}

/// Material needed to append subsystem `index` (zero-based, `index >= 1`)
/// to the prefix of length `index`: the subsystem, `h(new,new)`,
/// `h(new,prev)` and `h(prev,new)`.
pub fn example_addition(index: usize) -> (Subsystem, Matrix, Matrix, Matrix) {
    let sub = example_subsystems().swap_remove(index);
    let find = |to: usize, from: usize| {
        example_couplings()
            .into_iter()
            .find(|(t, f, _)| *t == to && *f == from)
            .map(|(_, _, h)| h)
            .expect("coupling present in fixture")
    };
    (
        sub,
        find(index, index),
        find(index, index - 1),
        find(index - 1, index),
    )
}
