mod common;

use common::oracles::{grid_integral, logdet_jacobian_error, numeric_logdet, random_flow, round_trip_errors};
use common::uniform;
use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_logdet_matches_numeric_jacobian() {
    let err = logdet_jacobian_error(&random_flow(1, 2, 0.5));
    assert!(err < 1e-6, "logdet error {err:e}");
}

#[test]
fn log_prob_matches_change_of_variables() {
    let model = random_flow(3, 4, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(20, 2, -3.0, 3.0, &mut rng);
    let lp = model.log_prob(&x).unwrap();
    let (z, _) = model.inverse(&x).unwrap();
    let prior = model.prior.log_prob(&z).unwrap();
    for (i, row) in x.rows().into_iter().enumerate() {
        let numeric = numeric_logdet(|p| model.inverse(p).unwrap().0, [row[0], row[1]]);
        assert!((lp[i] - (prior[i] + numeric)).abs() < 1e-6);
    }
}

#[test]
fn density_integrates_to_one() {
    for seed in [5, 6] {
        let model = random_flow(seed, 4, 0.3);
        let mass = grid_integral(&model, 12.0, 600);
        assert!((0.98..=1.02).contains(&mass), "seed {seed}: mass {mass}");
    }
}

#[test]
fn round_trip_on_many_points() {
    let (err, anti) = round_trip_errors(&random_flow(7, 6, 0.5));
    assert!(err < 1e-9, "round trip error {err:e}");
    assert!(anti < 1e-9, "logdet antisymmetry error {anti:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bijective_with_antisymmetric_logdet(
        seed in 0u64..1000,
        layers in (1usize..4).prop_map(|k| 2 * k),
        z0 in -3.0f64..3.0,
        z1 in -3.0f64..3.0,
    ) {
        let model = random_flow(seed, layers, 0.5);
        let z = array![[z0, z1]];
        let (x, fwd) = model.forward(&z).unwrap();
        let (back, inv) = model.inverse(&x).unwrap();
        prop_assert!((&back - &z).iter().all(|v| v.abs() < 1e-9));
        prop_assert!((fwd[0] + inv[0]).abs() < 1e-9);
    }

    #[test]
    fn log_scale_stays_clamped(seed in 0u64..1000, x0 in -50.0f64..50.0, x1 in -50.0f64..50.0) {
        let model = random_flow(seed, 2, 3.0);
        let (_, logdet) = model.forward(&array![[x0, x1]]).unwrap();
        // One moved coordinate per layer, each bounded by the clamp.
        prop_assert!(logdet[0].abs() <= 2.0 * model.scale_clamp() + 1e-12);
    }
}
