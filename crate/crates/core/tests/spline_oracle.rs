//! Basis-function correctness: partition of unity over dense samples of the
//! layer domain, agreement with the independent recursive Cox-de Boor route,
//! and range/convexity properties of the schedule.

use proptest::prelude::*;
use sptx_core::bspline::{
    basis_row, basis_row_recursive, clamped_uniform_knots, AlphaMode, AlphaSchedule,
};

#[test]
fn partition_of_unity_and_oracle_agreement() {
    let n_layers = 6;
    for degree in [1usize, 2, 3] {
        let n_ctrl = 8;
        let knots = clamped_uniform_knots(n_ctrl, degree, n_layers).unwrap();
        for step in 0..=1000 {
            let l = 1.0 + (n_layers as f64 - 1.0) * step as f64 / 1000.0;
            let row = basis_row(l, degree, &knots, n_ctrl).unwrap();
            let sum: f64 = row.iter().sum();
            assert!(
                (sum - 1.0).abs() < 1e-9,
                "degree {degree}: partition of unity violated at l={l}: sum={sum}"
            );
            assert!(row.iter().all(|&v| v >= 0.0));
            let oracle = basis_row_recursive(l, degree, &knots, n_ctrl).unwrap();
            for (i, (a, b)) in row.iter().zip(&oracle).enumerate() {
                assert!(
                    (a - b).abs() < 1e-9,
                    "degree {degree}, l={l}, basis {i}: local {a} vs recursive {b}"
                );
            }
        }
    }
}

#[test]
fn degree_matches_small_control_counts() {
    // Smallest legal N per degree still sums to one everywhere.
    for degree in [1usize, 2, 3] {
        let n_ctrl = degree + 1;
        let knots = clamped_uniform_knots(n_ctrl, degree, 4).unwrap();
        for step in 0..=100 {
            let l = 1.0 + 3.0 * step as f64 / 100.0;
            let sum: f64 = basis_row(l, degree, &knots, n_ctrl).unwrap().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    // Clamped alpha is in [0, 1] elementwise for arbitrary finite controls
    // and biases.
    #[test]
    fn alpha_stays_in_unit_interval(
        controls in proptest::collection::vec(-50.0f64..50.0, 8),
        biases in proptest::collection::vec(-50.0f64..50.0, 6),
        layer in 1usize..=6,
    ) {
        let mut sched =
            AlphaSchedule::<f64>::with_constant(AlphaMode::Scalar, 8, 3, 6, 1, 0.0).unwrap();
        for (v, c) in sched.control.data_mut().iter_mut().zip(&controls) {
            *v = *c;
        }
        for (v, b) in sched.bias.data_mut().iter_mut().zip(&biases) {
            *v = *b;
        }
        let alpha = sched.alpha_at(layer).unwrap()[0];
        prop_assert!((0.0..=1.0).contains(&alpha));
    }

    #[test]
    fn partition_of_unity_random_degree_and_count(
        degree in 1usize..=3,
        extra in 0usize..6,
        t in 0.0f64..1.0,
    ) {
        let n_ctrl = degree + 1 + extra;
        let n_layers = 6;
        let knots = clamped_uniform_knots(n_ctrl, degree, n_layers).unwrap();
        let l = 1.0 + (n_layers as f64 - 1.0) * t;
        let row = basis_row(l, degree, &knots, n_ctrl).unwrap();
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
