mod common;

use common::{max_rel_err, random_instance, random_simplex_field, rng, Instance};
use rand::Rng;
use rwprop_core::adjoint::{backprop_boundary, grad_p_from_loss};
use rwprop_core::lattice::LabelField;
use rwprop_core::loss::WeightedLoss;
use rwprop_core::oracle::finite_diff_boundary_grad;
use rwprop_core::propagate::{assemble_system, PartitionField, Propagation};
use rwprop_core::solver::SolverOptions;
use rwprop_core::trainer::{forward, gradients, LinkFunction, TrainConfig, TrainState};
use rwprop_core::{propagate_labels, BoundaryField, GridLattice, SparseLabels};

// Finite differences of a loss of order one carry roundoff near 1e-10 in
// absolute terms, so entries below 1% of the largest are compared against
// that scale rather than their own magnitude.
const FLOOR_FRACTION: f64 = 1e-2;

fn two_class_instance(r: &mut rand_chacha::ChaCha8Rng) -> Instance {
    loop {
        let inst = random_instance(r, 2..=6, &[2, 3], 4, 2.0);
        let mut classes: Vec<usize> = inst.labels.entries().iter().map(|e| e.1).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() >= 2 && inst.labels.len() < inst.lattice.num_pixels() {
            return inst;
        }
    }
}

fn adjoint_grad(inst: &Instance, q: &LabelField, loss: WeightedLoss) -> Vec<f64> {
    let prepared = assemble_system(&inst.lattice, &inst.labels, &inst.boundary)
        .unwrap()
        .prepare(&SolverOptions::default())
        .unwrap();
    let prop = prepared.propagate().unwrap();
    let report = loss.evaluate(&prop.p, q, &prop.unreached).unwrap();
    let dz = grad_p_from_loss(&prop, &report.dl_dp).unwrap();
    backprop_boundary(&prepared, &prop.z, &dz).unwrap().into_values()
}

#[test]
fn boundary_gradient_matches_finite_differences() {
    let mut r = rng(31);
    let loss = WeightedLoss::new(1.0, true);
    for case in 0..20 {
        let inst = two_class_instance(&mut r);
        let q = random_simplex_field(&mut r, inst.lattice.num_pixels(), inst.labels.num_classes());
        let analytic = adjoint_grad(&inst, &q, loss);
        let fd = finite_diff_boundary_grad(
            |b| {
                let p = propagate_labels(&inst.lattice, &inst.labels, b)?;
                Ok(loss.evaluate(&p.p, &q, &p.unreached)?.total)
            },
            &inst.boundary,
            1e-5,
        )
        .unwrap();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0, "case {case}: degenerate instance");
        let (err, at) = max_rel_err(&analytic, &fd, FLOOR_FRACTION * scale);
        assert!(err < 1e-5, "case {case}: rel err {err:e} at pixel {at}: {} vs {}", analytic[at], fd[at]);
        for &(pix, _) in inst.labels.entries() {
            assert_eq!(analytic[pix], 0.0);
            assert_eq!(fd[pix], 0.0);
        }
    }
}

#[test]
fn normalization_chain_matches_finite_differences() {
    let mut r = rng(8);
    let (n, k) = (5, 3);
    let z: Vec<f64> = (0..n * k).map(|_| r.random_range(0.01..1.0)).collect();
    let g: Vec<f64> = (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |z: &[f64]| -> f64 {
        let prop = Propagation::from_partition(PartitionField::new(k, z.to_vec()).unwrap());
        prop.p.as_slice().iter().zip(&g).map(|(p, g)| p * g).sum()
    };
    let prop = Propagation::from_partition(PartitionField::new(k, z.clone()).unwrap());
    let analytic = grad_p_from_loss(&prop, &g).unwrap();
    let h = 1e-6;
    let fd: Vec<f64> = (0..n * k)
        .map(|i| {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[i] += h;
            dn[i] -= h;
            (objective(&up) - objective(&dn)) / (2.0 * h)
        })
        .collect();
    let (err, _) = max_rel_err(&analytic, &fd, 1e-8);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn transposed_solve_is_the_adjoint() {
    let mut r = rng(12);
    for _ in 0..10 {
        let inst = random_instance(&mut r, 2..=5, &[2], 4, 2.0);
        let n = inst.lattice.num_pixels();
        let prepared = assemble_system(&inst.lattice, &inst.labels, &inst.boundary)
            .unwrap()
            .prepare(&SolverOptions::default())
            .unwrap();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = prepared.solver().solve(&v).unwrap().x;
        let y = prepared.solver().solve_transpose(&w).unwrap().x;
        let lhs: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-8, "{lhs} vs {rhs}");
    }
}

fn total_loss(state: &TrainState, lat: &GridLattice, labels: &SparseLabels, cfg: &TrainConfig) -> f64 {
    forward(state, lat, labels, cfg).unwrap().loss.total
}

#[test]
fn trainer_gradients_match_finite_differences() {
    let mut r = rng(4);
    for link in [LinkFunction::Softplus, LinkFunction::Exp] {
        for case in 0..4 {
            let inst = two_class_instance(&mut r);
            let (lat, labels) = (&inst.lattice, &inst.labels);
            let (n, k) = (lat.num_pixels(), labels.num_classes());
            let cfg = TrainConfig {
                link,
                flow_through_weights: true,
                ..Default::default()
            };
            let state = TrainState {
                boundary: rwprop_core::trainer::BoundaryParams {
                    phi: (0..n).map(|_| r.random_range(-1.5..0.5)).collect(),
                },
                predictor: rwprop_core::trainer::PredictorParams {
                    num_classes: k,
                    theta: (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect(),
                },
            };
            let pass = forward(&state, lat, labels, &cfg).unwrap();
            let grads = gradients(&pass, &state, &cfg).unwrap();
            let h = 1e-5;
            let fd_phi: Vec<f64> = (0..n)
                .map(|i| {
                    let (mut up, mut dn) = (state.clone(), state.clone());
                    up.boundary.phi[i] += h;
                    dn.boundary.phi[i] -= h;
                    (total_loss(&up, lat, labels, &cfg) - total_loss(&dn, lat, labels, &cfg)) / (2.0 * h)
                })
                .collect();
            let fd_theta: Vec<f64> = (0..n * k)
                .map(|i| {
                    let (mut up, mut dn) = (state.clone(), state.clone());
                    up.predictor.theta[i] += h;
                    dn.predictor.theta[i] -= h;
                    (total_loss(&up, lat, labels, &cfg) - total_loss(&dn, lat, labels, &cfg)) / (2.0 * h)
                })
                .collect();
            for (name, a, f) in [("phi", &grads.phi, &fd_phi), ("theta", &grads.theta, &fd_theta)] {
                let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let (err, at) = max_rel_err(a, f, FLOOR_FRACTION * scale);
                assert!(err < 1e-5, "{link:?} case {case} {name}: {err:e} at {at}: {} vs {}", a[at], f[at]);
            }
        }
    }
}

#[test]
fn walls_at_the_clamp_receive_no_phi_gradient() {
    let lat = GridLattice::new(4, 1).unwrap();
    let labels = SparseLabels::new(2, [(0, 0), (3, 1)]).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::initial(4, 2);
    state.boundary.phi[1] = 80.0;
    let pass = forward(&state, &lat, &labels, &cfg).unwrap();
    assert_eq!(pass.boundary.values()[1], rwprop_core::B_MAX);
    let grads = gradients(&pass, &state, &cfg).unwrap();
    assert_eq!(grads.phi[1], 0.0);
    assert!(grads.phi[2] != 0.0);
}

#[test]
fn gradient_is_zero_when_only_one_class_is_present() {
    let lat = GridLattice::new(3, 3).unwrap();
    let labels = SparseLabels::new(2, [(0, 1), (8, 1)]).unwrap();
    let inst = Instance {
        lattice: lat,
        labels,
        boundary: BoundaryField::new(vec![0.7; 9]).unwrap(),
    };
    let q = LabelField::uniform(9, 2);
    let g = adjoint_grad(&inst, &q, WeightedLoss::new(1.0, true));
    assert!(g.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn gradient_stays_accurate_behind_a_deep_wall() {
    // Partition sums behind the wall are around 1e-120, so dL/dZ is huge
    // there while the gradient with respect to B stays moderate.
    let lat = GridLattice::new(12, 2).unwrap();
    let labels = SparseLabels::new(2, [(0, 0), (12, 1), (5, 1)]).unwrap();
    let mut b = vec![0.3; 24];
    for x in 6..11 {
        b[x] = 45.0 + 0.1 * x as f64;
        b[12 + x] = 44.0;
    }
    let inst = Instance {
        lattice: lat,
        labels,
        boundary: BoundaryField::new(b).unwrap(),
    };
    let mut r = rng(1);
    let q = random_simplex_field(&mut r, 24, 2);
    let loss = WeightedLoss::new(1.0, true);
    let analytic = adjoint_grad(&inst, &q, loss);
    assert!(analytic.iter().all(|v| v.is_finite()));
    let fd = finite_diff_boundary_grad(
        |b| {
            let p = propagate_labels(&inst.lattice, &inst.labels, b)?;
            Ok(loss.evaluate(&p.p, &q, &p.unreached)?.total)
        },
        &inst.boundary,
        1e-5,
    )
    .unwrap();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (err, at) = max_rel_err(&analytic, &fd, FLOOR_FRACTION * scale);
    assert!(err < 1e-5, "rel err {err:e} at pixel {at}: {} vs {}", analytic[at], fd[at]);
}
