mod common;

use cascade_passivity::blockla::{cholesky_lower, max_abs, tridiag_pd_sequence};
use cascade_passivity::fixtures::{example_addition, example_network, example_network_prefix};
use cascade_passivity::model::{CascadeNetwork, Matrix, Subsystem};
use cascade_passivity::oracle::{assemble_closed_loop, centralized_sp_check};
use cascade_passivity::protocol::*;
use common::*;

fn design(net: &CascadeNetwork) -> NetworkDesignState {
    run_cascade_design(net, &DesignOptions::default()).expect("design succeeds")
}

fn assert_schur_consistent(state: &NetworkDesignState) {
    let cl = assemble_closed_loop(state).unwrap();
    let factor = tridiag_pd_sequence(&cl.w_tridiagonal()).expect("closed-loop W factors");
    for (m, rec) in factor.m.iter().zip(&state.records) {
        let rel = max_abs(&(m - &rec.m_cl)) / max_abs(m).max(1e-300);
        assert!(
            rel <= 1e-8,
            "subsystem {}: messenger differs from Schur block by {rel:e}",
            rec.index + 1
        );
    }
}

fn assert_record_invariants(state: &NetworkDesignState) {
    let eps_min = state
        .records
        .iter()
        .map(|r| r.epsilon)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(state.global_epsilon, eps_min);
    for rec in &state.records {
        assert!(cholesky_lower(&rec.m_cl).is_ok());
        assert!(cholesky_lower(&rec.q).is_ok());
        assert!(rec.epsilon >= EPS_MIN);
        if rec.route == Route::Verified {
            assert!(
                rec.k_self.is_none() && rec.k_to_prev.is_none() && rec.k_prev_to_self.is_none()
            );
        }
        assert!(rec.audit.iter().all(|a| a.certificate.passed()));
    }
}

#[test]
fn example_cascade_routes_and_invariants() {
    let state = design(&example_network());
    use Route::*;
    assert_eq!(
        state.routes(),
        vec![Synthesized, Synthesized, Verified, Synthesized]
    );
    assert_record_invariants(&state);
    assert_schur_consistent(&state);
    assert!(centralized_sp_check(&assemble_closed_loop(&state).unwrap()).passed());
}

#[test]
fn example_first_subsystem_is_not_verifiable() {
    let net = example_network();
    let opts = DesignOptions::default();
    let err = local_verify(&net.subsystems[0], &net.coupling(0, 0), None, None, &opts).unwrap_err();
    assert!(
        matches!(err, DesignError::Infeasible { index: 0, .. }),
        "{err}"
    );
}

#[test]
fn example_third_subsystem_verifies_with_packet() {
    let state = design(&example_network_prefix(2));
    let net = example_network_prefix(3);
    let packet = build_packet(
        &state.records[1],
        &net.subsystems[1],
        Some(&net.coupling(1, 2)),
    )
    .unwrap()
    .unwrap();
    let rec = local_verify(
        &net.subsystems[2],
        &net.coupling(2, 2),
        Some(&net.coupling(2, 1)),
        Some(&packet),
        &DesignOptions::default(),
    )
    .unwrap();
    assert_eq!(rec.route, Route::Verified);
    assert_eq!(rec.index, 2);
}

#[test]
fn adding_second_example_subsystem_keeps_first_record() {
    let first = design(&example_network_prefix(1));
    let (sub, hs, hp, hf) = example_addition(1);
    let grown = add_subsystem(&first, sub, hs, hp, hf, &DesignOptions::default()).unwrap();
    let (old, new) = (&first.records[0], &grown.records[0]);
    assert_eq!(
        (&old.q, old.epsilon, &old.m_cl, &old.k_self),
        (&new.q, new.epsilon, &new.m_cl, &new.k_self)
    );
    let rec = &grown.records[1];
    assert_eq!(rec.route, Route::Synthesized);
    assert!(rec.k_self.is_some() && rec.k_to_prev.is_some() && rec.k_prev_to_self.is_some());
    assert_eq!(new.k_to_next, rec.k_prev_to_self);
    assert!(centralized_sp_check(&assemble_closed_loop(&grown).unwrap()).passed());
}

#[test]
fn adding_through_the_example_cascade_matches_batch_design() {
    let batch = design(&example_network());
    let mut state = design(&example_network_prefix(1));
    for k in 1..4 {
        let before = state.clone();
        let (sub, hs, hp, hf) = example_addition(k);
        state = add_subsystem(&state, sub, hs, hp, hf, &DesignOptions::default()).unwrap();
        for i in 0..k - 1 {
            assert_eq!(
                state.records[i],
                before.records[i],
                "record {} changed",
                i + 1
            );
        }
        let (a, b) = (&before.records[k - 1], &state.records[k - 1]);
        assert_eq!(
            (&a.q, a.epsilon, &a.m_cl, &a.k_self, &a.k_to_prev),
            (&b.q, b.epsilon, &b.m_cl, &b.k_self, &b.k_to_prev)
        );
    }
    assert_eq!(state.net, batch.net);
    assert_eq!(state.records, batch.records);
}

#[test]
fn adding_decoupled_stable_scalar_is_verified() {
    let state = design(&example_network());
    let sub = Subsystem::scalar(-1.0, 1.0, 1.0, 1.0, 1.0);
    let grown = add_subsystem(
        &state,
        sub,
        Matrix::zeros(1, 1),
        Matrix::zeros(1, 2),
        Matrix::zeros(1, 1),
        &DesignOptions::default(),
    )
    .unwrap();
    assert_eq!(&grown.records[..4], &state.records[..]);
    let rec = &grown.records[4];
    assert_eq!(rec.route, Route::Verified);
    assert!(rec.k_self.is_none() && rec.k_to_prev.is_none() && rec.k_prev_to_self.is_none());
}

#[test]
fn adding_with_wrong_coupling_width_is_rejected() {
    let state = design(&example_network());
    let sub = Subsystem::scalar(-1.0, 1.0, 1.0, 1.0, 1.0);
    let err = add_subsystem(
        &state,
        sub,
        Matrix::zeros(1, 1),
        Matrix::zeros(1, 3),
        Matrix::zeros(1, 1),
        &DesignOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, DesignError::DimensionMismatch(_)), "{err}");
}

#[test]
fn design_is_deterministic() {
    assert_eq!(design(&example_network()), design(&example_network()));
}

#[test]
fn random_cascades_satisfy_invariants() {
    let mut rng = rng(4242);
    let mut successes = 0;
    for _ in 0..40 {
        let net = random_cascade(&mut rng, 5, 3, 0.0);
        let Ok(state) = run_cascade_design(&net, &DesignOptions::default()) else {
            continue;
        };
        successes += 1;
        assert_record_invariants(&state);
        assert_schur_consistent(&state);
        let cert = centralized_sp_check(&assemble_closed_loop(&state).unwrap());
        assert!(cert.passed(), "{cert}");
    }
    println!("random cascades designed: {successes}/40");
    assert!(successes > 0);
}

#[test]
fn product_form_also_designs_example_cascade() {
    let opts = DesignOptions {
        relaxed_form: RelaxedForm::GainProduct,
        ..Default::default()
    };
    let state = run_cascade_design(&example_network(), &opts).unwrap();
    assert_record_invariants(&state);
    assert!(centralized_sp_check(&assemble_closed_loop(&state).unwrap()).passed());
}
