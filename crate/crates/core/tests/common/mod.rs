#![allow(dead_code)]

use cascade_passivity::blockla::BlockTriDiagonal;
use cascade_passivity::lmi::{AffineFeasibilityProblem, AffineMatrix};
use cascade_passivity::model::{CascadeNetwork, Matrix, Subsystem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.gen_range(-1.0..1.0))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Matrix {
    let g = random_matrix(rng, n, n, scale);
    (&g + g.transpose()) * 0.5
}

/// `G G' + floor I`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Matrix {
    let g = random_matrix(rng, n, n, 1.0);
    &g * g.transpose() + Matrix::identity(n, n) * floor
}

/// Random symmetric block tri-diagonal matrix with `count` blocks of size
/// 1..=4, shifted so its smallest eigenvalue is `target` (positive or
/// negative).
pub fn random_tridiagonal(rng: &mut ChaCha8Rng, count: usize, target: f64) -> BlockTriDiagonal {
    let sizes: Vec<usize> = (0..count).map(|_| rng.gen_range(1..=4)).collect();
    let mut diag: Vec<Matrix> = sizes
        .iter()
        .map(|&n| random_symmetric(rng, n, 2.0))
        .collect();
    let upper: Vec<Matrix> = (1..count)
        .map(|k| random_matrix(rng, sizes[k - 1], sizes[k], 1.0))
        .collect();
    let dense = BlockTriDiagonal::new(diag.clone(), upper.clone())
        .unwrap()
        .to_dense();
    let lmin = cascade_passivity::blockla::min_eigen_sym(&dense).unwrap();
    for d in &mut diag {
        let n = d.nrows();
        *d += Matrix::identity(n, n) * (target - lmin);
    }
    BlockTriDiagonal::new(diag, upper).unwrap()
}

/// A problem with a planted point whose `lambda_min` is at least
/// `10 * default_margin`, together with the planted point.
pub fn planted_problem(rng: &mut ChaCha8Rng) -> (AffineFeasibilityProblem, Vec<f64>) {
    loop {
        let vars = rng.gen_range(1..=10);
        let block_count = rng.gen_range(1..=3);
        let total_dim = rng.gen_range(block_count..=20);
        let mut sizes = vec![1; block_count];
        for _ in block_count..total_dim {
            let k = rng.gen_range(0..block_count);
            sizes[k] += 1;
        }
        let theta_star: Vec<f64> = (0..vars).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let slack = 10f64.powf(rng.gen_range(-3.0..0.0));

        let mut prob = AffineFeasibilityProblem::new(vars);
        for &n in &sizes {
            // Phi(theta*) = R D R' with smallest eigenvalue `slack`
            let mut expr = AffineMatrix::zeros(n, n);
            let mut at_star = Matrix::zeros(n, n);
            for (j, &t) in theta_star.iter().enumerate() {
                let f = random_symmetric(rng, n, 1.0);
                at_star += &f * t;
                expr = expr + AffineMatrix::term(j, f);
            }
            let target = random_pd(rng, n, 0.0) * 0.5 + Matrix::identity(n, n) * slack;
            let lmin = cascade_passivity::blockla::min_eigen_sym(&target).unwrap();
            let target = target + Matrix::identity(n, n) * (slack - lmin);
            prob.require_positive(expr + &(target - at_star));
        }
        let eq_count = rng.gen_range(0..=vars.saturating_sub(1).min(3));
        if eq_count > 0 {
            let mut expr = AffineMatrix::zeros(eq_count, 1);
            let mut rhs = Matrix::zeros(eq_count, 1);
            for (j, &t) in theta_star.iter().enumerate() {
                let e = random_matrix(rng, eq_count, 1, 1.0);
                rhs += &e * t;
                expr = expr + AffineMatrix::term(j, e);
            }
            prob.require_zero(&(expr - &rhs));
        }
        if prob.lambda_min(&theta_star) >= 10.0 * prob.default_margin() {
            return (prob, theta_star);
        }
    }
}

/// Random cascade in which every `Q_i B2_i = C_i'` has a positive
/// definite solution and `B3_i` has full column rank. Each `A_i` is
/// shifted by `-shift I`.
pub fn random_cascade(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    max_dim: usize,
    shift: f64,
) -> CascadeNetwork {
    let count = rng.gen_range(1..=max_n);
    let subs: Vec<Subsystem> = (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_dim);
            let p = rng.gen_range(1..=n);
            let m = rng.gen_range(1..=n);
            let a = random_matrix(rng, n, n, 2.0) - Matrix::identity(n, n) * shift;
            let b1 = random_matrix(rng, n, p, 1.0);
            let b3 = loop {
                let b = random_matrix(rng, n, p, 1.0);
                if b.clone().svd(false, false).singular_values.min() > 0.1 {
                    break b;
                }
            };
            let c = random_matrix(rng, m, n, 1.0);
            let q0 = random_pd(rng, n, 0.5);
            let b2 = q0.try_inverse().unwrap() * c.transpose();
            Subsystem::new(a, b1, b2, b3, c)
        })
        .collect();
    let mut net = CascadeNetwork::new(subs);
    for i in 0..count {
        for j in i.saturating_sub(1)..(i + 2).min(count) {
            let (p, n) = (
                net.subsystems[i].coupling_dim(),
                net.subsystems[j].state_dim(),
            );
            if rng.gen_bool(0.8) {
                net.set_coupling(i, j, random_matrix(rng, p, n, 1.0));
            }
        }
    }
    net
}
