mod common;

use cascade_passivity::blockla::{
    cholesky_lower, min_eigen_sym, norm_inf, tridiag_pd_sequence, BlockTriDiagonal,
};
use common::*;
use proptest::prelude::*;

fn check_equivalence(p: &BlockTriDiagonal) -> Result<(), TestCaseError> {
    let dense = p.to_dense();
    let lmin = min_eigen_sym(&dense).unwrap();
    let norm = norm_inf(&dense);
    match tridiag_pd_sequence(p) {
        Ok(f) => {
            prop_assert!(
                lmin > 0.0,
                "sequence succeeded on an indefinite matrix (lambda_min {lmin:e})"
            );
            let l = f.to_dense_lower();
            let err = norm_inf(&(&l * l.transpose() - &dense));
            prop_assert!(err <= 1e-9 * norm, "||LL' - P|| = {err:e}");
            // the factor is the Cholesky factor
            let direct = cholesky_lower(&dense).unwrap();
            prop_assert!(norm_inf(&(l - direct)) <= 1e-8 * norm.sqrt().max(1.0));
        }
        Err(_) => prop_assert!(
            lmin < 0.0,
            "sequence failed on a definite matrix (lambda_min {lmin:e})"
        ),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sequence_agrees_with_eigenvalues(seed in any::<u64>(), count in 1usize..=10, definite in any::<bool>(), gap in -3.0f64..0.0) {
        let mut rng = rng(seed);
        let target = if definite { 10f64.powf(gap) } else { -(10f64.powf(gap)) };
        let p = random_tridiagonal(&mut rng, count, target);
        check_equivalence(&p)?;
    }
}
