mod common;

use common::{random_instance, random_simplex_field, rng};
use rwprop_core::lattice::LabelField;
use rwprop_core::loss::{cross_entropy_loss, dense_cross_entropy, uncertainty_weights, weighted_loss, WeightedLoss};
use rwprop_core::oracle::marginalization_check;
use rwprop_core::{propagate_labels, BoundaryField, GridLattice, SparseLabels};

#[test]
fn expected_dense_loss_equals_propagated_cross_entropy() {
    let mut r = rng(50);
    for case in 0..50 {
        let inst = random_instance(&mut r, 1..=3, &[2], 4, 2.0);
        let q = random_simplex_field(&mut r, inst.lattice.num_pixels(), 2);
        let (lhs, rhs) = marginalization_check(&inst.lattice, &inst.labels, &inst.boundary, &q).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10, "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn marginalization_with_everything_labeled_is_the_dense_loss() {
    let lat = GridLattice::new(2, 2).unwrap();
    let truth = [0, 1, 1, 0];
    let labels = SparseLabels::new(2, truth.iter().copied().enumerate()).unwrap();
    let q = LabelField::new(2, vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5, 0.2, 0.8]).unwrap();
    let (lhs, rhs) = marginalization_check(&lat, &labels, &BoundaryField::zeros(&lat), &q).unwrap();
    let dense = dense_cross_entropy(&truth, &q).unwrap();
    assert_eq!(lhs, dense);
    assert_eq!(rhs, dense);
}

#[test]
fn marginalization_single_unlabeled_pixel() {
    let lat = GridLattice::new(3, 1).unwrap();
    let labels = SparseLabels::new(2, [(0, 0), (2, 1)]).unwrap();
    let b = BoundaryField::new(vec![0.0, 0.4, 0.0]).unwrap();
    let q = LabelField::new(2, vec![0.6, 0.4, 0.25, 0.75, 0.1, 0.9]).unwrap();
    let (lhs, rhs) = marginalization_check(&lat, &labels, &b, &q).unwrap();
    assert!((lhs - rhs).abs() <= 1e-12);
}

#[test]
fn marginalization_rejects_oversized_instances() {
    let lat = GridLattice::new(4, 3).unwrap();
    let labels = SparseLabels::new(2, [(0, 0)]).unwrap();
    let q = LabelField::uniform(12, 2);
    assert!(marginalization_check(&lat, &labels, &BoundaryField::zeros(&lat), &q).is_err());
}

#[test]
fn zero_alpha_reduces_to_propagated_cross_entropy() {
    let mut r = rng(3);
    for _ in 0..20 {
        let inst = random_instance(&mut r, 2..=5, &[2, 3], 4, 2.0);
        let prop = propagate_labels(&inst.lattice, &inst.labels, &inst.boundary).unwrap();
        let q = random_simplex_field(&mut r, inst.lattice.num_pixels(), inst.labels.num_classes());
        let weighted = weighted_loss(&prop.p, &q, 0.0, false).unwrap();
        let ce = cross_entropy_loss(&prop.p, &q).unwrap();
        for (a, b) in weighted.per_pixel.iter().zip(&ce.per_pixel) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert!(weighted.weights.iter().all(|w| *w == 1.0));
    }
}

#[test]
fn weights_closed_forms() {
    let delta = LabelField::one_hot(3, &[0, 2, 1]).unwrap();
    for alpha in [0.0, 0.5, 1.0, 7.0] {
        assert!(uncertainty_weights(&delta, alpha, &[]).unwrap().iter().all(|w| *w == 1.0));
    }
    for k in 2..=5usize {
        let uniform = LabelField::uniform(2, k);
        for alpha in [0.5, 1.0, 2.0] {
            let w = uncertainty_weights(&uniform, alpha, &[]).unwrap();
            let expected = (-alpha * (k as f64).ln()).exp();
            for v in w {
                assert!((v - expected).abs() <= 1e-15, "K={k} alpha={alpha}: {v} vs {expected}");
            }
        }
    }
    let w = uncertainty_weights(&LabelField::uniform(1, 3), 2.0, &[]).unwrap();
    assert!((w[0] - 1.0 / 9.0).abs() <= 1e-15);
}

#[test]
fn one_hot_propagation_gives_dense_loss() {
    let truth = [1, 0, 2, 2, 1];
    let p = LabelField::one_hot(3, &truth).unwrap();
    let mut r = rng(17);
    let q = random_simplex_field(&mut r, 5, 3);
    let weighted = weighted_loss(&p, &q, 0.0, false).unwrap();
    assert_eq!(weighted.total, dense_cross_entropy(&truth, &q).unwrap());
}

#[test]
fn total_matches_independent_summation() {
    let mut r = rng(21);
    let p = random_simplex_field(&mut r, 9, 3);
    let q = random_simplex_field(&mut r, 9, 3);
    let report = cross_entropy_loss(&p, &q).unwrap();
    let mut oracle = 0.0;
    for i in 0..9 {
        for l in 0..3 {
            oracle -= p.pixel(i)[l] * q.pixel(i)[l].ln();
        }
    }
    assert!((report.total - oracle).abs() <= 1e-12);
    let sum: f64 = report.per_pixel.iter().sum();
    assert!((report.total - sum).abs() <= 1e-9);
}

#[test]
fn unreached_pixels_carry_zero_weight() {
    let p = LabelField::new(2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
    let q = LabelField::new(2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let report = WeightedLoss::default().evaluate(&p, &q, &[0]).unwrap();
    assert_eq!(report.weights[0], 0.0);
    assert!((report.per_pixel[0] - std::f64::consts::LN_2).abs() <= 1e-15);
    assert_eq!(report.weights[1], 1.0);
}
