//! Randomized property suites for the numerical pipeline and the oracle
//! maps: cocycle law, estimator invariances, power-law recovery, inverse
//! identities and the Gronwall bound.

use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;

use conjugacy_lab::conjugacy::{gronwall_check, ScenarioSystem};
use conjugacy_lab::dynamics::{transition_matrix, TimeMatrixField};
use conjugacy_lab::oracles::{
    oracle_g_11, oracle_g_29, oracle_h_11, oracle_h_29, Example11Params,
};
use conjugacy_lab::regularity::{
    default_scales, estimate_lipschitz, fit_holder_exponent, sample_modulus, scalar_map,
    ModulusSample,
};

fn wavy_field() -> TimeMatrixField {
    TimeMatrixField::new(1, 1.4, |t: f64| DMatrix::from_element(1, 1, -1.0 - 0.4 * t.cos()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transition_cocycle(t in -2.0f64..2.0, r in -2.0f64..2.0, s in -2.0f64..2.0) {
        let a = wavy_field();
        let u_ts = transition_matrix(&a, t, s, 1e-3).unwrap();
        let u_tr = transition_matrix(&a, t, r, 1e-3).unwrap();
        let u_rs = transition_matrix(&a, r, s, 1e-3).unwrap();
        prop_assert!((&u_ts - &u_tr * &u_rs).norm() <= 1e-8);
    }

    #[test]
    fn gronwall_bound_random_pairs(
        x0 in -2.0f64..2.0,
        x0bar in -2.0f64..2.0,
        t1 in 0.0f64..3.0,
    ) {
        let sys = ScenarioSystem::example_11(0.1).unwrap();
        let check = gronwall_check(&sys, 0.0, &dvector![x0], &dvector![x0bar], t1, 1e-3).unwrap();
        prop_assert!(check.pass, "lhs {} > rhs {}", check.lhs, check.rhs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lipschitz_estimate_reorder_invariant(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let p = Example11Params::new(0.1).unwrap();
        let map = scalar_map(move |x| oracle_h_11(p, x));
        let dirs = vec![dvector![1.0]];
        let sample = sample_modulus(&map, &dvector![0.4], &default_scales(), &dirs).unwrap();
        let reference = estimate_lipschitz(&sample).unwrap();
        let mut pairs = sample.pairs.clone();
        pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = ModulusSample { pairs, ..sample };
        prop_assert_eq!(estimate_lipschitz(&shuffled).unwrap(), reference);
    }

    #[test]
    fn holder_fit_recovers_power_laws(idx in 0usize..4) {
        let p = [0.3, 0.5, 0.9, 1.0][idx];
        let map = scalar_map(move |y: f64| y.abs().powf(p));
        let dirs = vec![dvector![1.0]];
        let sample = sample_modulus(&map, &dvector![0.0], &default_scales(), &dirs).unwrap();
        let (q, r2) = fit_holder_exponent(&sample).unwrap();
        prop_assert!((q - p).abs() <= 0.01, "p = {p}, fitted {q}");
        prop_assert!(r2 > 0.999);
    }

    #[test]
    fn oracle_pairs_invert(eps in 0.01f64..0.32, x in -3.0f64..3.0) {
        let p = Example11Params::new(eps).unwrap();
        prop_assert!((oracle_g_11(p, oracle_h_11(p, x)) - x).abs() <= 1e-9);
    }

    #[test]
    fn oracle_29_pair_inverts(eps in 0.01f64..0.99, x in -3.0f64..3.0) {
        prop_assert!((oracle_g_29(eps, oracle_h_29(eps, x)) - x).abs() <= 1e-9);
    }

    #[test]
    fn oracle_h_is_monotone(eps in 0.01f64..0.32, a in -3.0f64..3.0, gap in 1e-6f64..1.0) {
        let p = Example11Params::new(eps).unwrap();
        prop_assert!(oracle_h_11(p, a + gap) > oracle_h_11(p, a));
    }

    #[test]
    fn oracle_h_contracts_distances(eps in 0.01f64..0.32, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // |H'| <= 1 globally, so H is 1-Lipschitz.
        let p = Example11Params::new(eps).unwrap();
        prop_assert!((oracle_h_11(p, a) - oracle_h_11(p, b)).abs() <= (a - b).abs() + 1e-12);
    }
}

// Holder continuity of the oracle inverse with the derived constants:
// the induction-style bound transported to the limit map.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_g_satisfies_holder_bound(y in -2.0f64..2.0, gap in 1e-9f64..0.999) {
        use conjugacy_lab::assumptions::{compute_regularity_constants, ContractionCertificate};
        let cert = ContractionCertificate::new(1.0, 1.0).unwrap();
        let c = *compute_regularity_constants(&cert, 0.1, 0.3)
            .admissible()
            .unwrap();
        let p = Example11Params::new(0.1).unwrap();
        let lhs = (oracle_g_11(p, y + gap) - oracle_g_11(p, y)).abs();
        prop_assert!(lhs <= c.p2 * gap.powf(c.q) + 1e-12, "gap {gap}: {lhs}");
    }
}

#[test]
fn directions_probe_only_unit_vectors() {
    let dirs = conjugacy_lab::regularity::default_directions(4, 4, 42);
    assert_eq!(dirs.len(), 8);
    for d in &dirs {
        assert!((d.norm() - 1.0).abs() < 1e-12);
        assert_eq!(d.len(), 4);
    }
}

#[test]
fn modulus_sample_multidimensional() {
    // A diagonal affine map probed along mixed directions: gaps stay
    // within the operator-norm bound.
    let m = DMatrix::from_diagonal(&dvector![1.0, 3.0]);
    let map = |x: &DVector<f64>| Ok(&m * x);
    let dirs = conjugacy_lab::regularity::default_directions(2, 4, 7);
    let sample = sample_modulus(&map, &dvector![0.3, -0.2], &default_scales(), &dirs).unwrap();
    let lip = estimate_lipschitz(&sample).unwrap();
    assert!(lip <= 3.0 + 1e-9);
    assert!(lip >= 1.0);
}
