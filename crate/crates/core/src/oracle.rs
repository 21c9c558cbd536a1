//! Independent reference computations used to check the fast paths.
//!
//! Nothing here shares code with the sparse assembly or the adjoint: the
//! random walker simulates paths directly, the dense solver rebuilds the
//! system from pixel coordinates and factors it with partial pivoting, and
//! the gradient check only evaluates the loss.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), seeded per start pixel
//! with `seed + pixel`, so estimates do not depend on thread scheduling and
//! reproduce across platforms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{BoundaryField, GridLattice, LabelField, SparseLabels};
use crate::loss::{cross_entropy_loss, Q_FLOOR};
use crate::propagate::{propagate_labels, PartitionField, Propagation};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000;

/// Largest lattice the dense solver accepts.
pub const DENSE_MAX_PIXELS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub num_classes: usize,
    /// Class frequencies among walks that hit a label; all zero where none did.
    pub probs: Vec<f64>,
    /// Binomial standard error of each frequency.
    pub stderr: Vec<f64>,
    /// Fraction of walks per start pixel that died or hit the step cap.
    pub deaths: Vec<f64>,
    /// Number of walks per start pixel that hit a label.
    pub hits: Vec<u64>,
}

/// Simulates `walks_per_pixel` absorbing random walks from every pixel.
///
/// At an unlabeled pixel `x` a walk survives with probability `e^{-B(x)}`
/// and then moves to one of the four lattice directions uniformly; leaving
/// the grid kills it. The first labeled pixel reached ends the walk.
pub fn mc_hitting_probabilities(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
    walks_per_pixel: u64,
    max_steps: u64,
    seed: u64,
) -> Result<McEstimate> {
    if walks_per_pixel == 0 {
        return Err(Error::InvalidParameter("walksPerPixel must be at least 1".into()));
    }
    if boundary.len() != lattice.num_pixels() {
        return Err(Error::ShapeMismatch("boundary does not match lattice".into()));
    }
    let classes = labels.per_pixel(lattice)?;
    let k = labels.num_classes();
    let (w, h) = (lattice.width() as i64, lattice.height() as i64);
    let survive: Vec<f64> = boundary.values().iter().map(|b| (-b).exp()).collect();

    let per_pixel: Vec<(Vec<u64>, u64)> = (0..lattice.num_pixels())
        .into_par_iter()
        .map(|start| {
            let mut counts = vec![0u64; k];
            if let Some(c) = classes[start] {
                counts[c] = walks_per_pixel;
                return (counts, 0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(start as u64));
            let mut lost = 0u64;
            for _ in 0..walks_per_pixel {
                let (mut x, mut y) = (start as i64 % w, start as i64 / w);
                let mut steps = 0u64;
                let hit = loop {
                    let here = (y * w + x) as usize;
                    if let Some(c) = classes[here] {
                        break Some(c);
                    }
                    if steps >= max_steps || rng.random::<f64>() >= survive[here] {
                        break None;
                    }
                    match rng.random_range(0..4u8) {
                        0 => y -= 1,
                        1 => y += 1,
                        2 => x -= 1,
                        _ => x += 1,
                    }
                    steps += 1;
                    if x < 0 || y < 0 || x >= w || y >= h {
                        break None;
                    }
                };
                match hit {
                    Some(c) => counts[c] += 1,
                    None => lost += 1,
                }
            }
            (counts, lost)
        })
        .collect();

    let n = lattice.num_pixels();
    let mut est = McEstimate {
        num_classes: k,
        probs: vec![0.0; n * k],
        stderr: vec![0.0; n * k],
        deaths: Vec::with_capacity(n),
        hits: Vec::with_capacity(n),
    };
    for (i, (counts, lost)) in per_pixel.into_iter().enumerate() {
        let hits: u64 = counts.iter().sum();
        est.hits.push(hits);
        est.deaths.push(lost as f64 / walks_per_pixel as f64);
        if hits == 0 {
            continue;
        }
        for (l, c) in counts.into_iter().enumerate() {
            let p = c as f64 / hits as f64;
            est.probs[i * k + l] = p;
            est.stderr[i * k + l] = (p * (1.0 - p) / hits as f64).sqrt();
        }
    }
    Ok(est)
}

/// Worst standardized deviation between a Monte-Carlo estimate and a
/// reference distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub z: f64,
    pub pixel: usize,
    pub class: usize,
    pub estimate: f64,
    pub reference: f64,
}

/// The standard error is taken under the reference distribution,
/// `sqrt(p (1 - p) / hits)`, so entries the walker never samples (tiny `p`)
/// are judged fairly. Pixels without hits are skipped.
pub fn max_z_score(est: &McEstimate, reference: &LabelField) -> Result<ZScore> {
    let k = est.num_classes;
    if reference.num_classes() != k || reference.as_slice().len() != est.probs.len() {
        return Err(Error::ShapeMismatch("estimate and reference differ in shape".into()));
    }
    let mut worst = ZScore {
        z: 0.0,
        pixel: 0,
        class: 0,
        estimate: f64::NAN,
        reference: f64::NAN,
    };
    for (i, &hits) in est.hits.iter().enumerate() {
        if hits == 0 {
            continue;
        }
        for l in 0..k {
            let p = reference.pixel(i)[l];
            let p_hat = est.probs[i * k + l];
            let diff = (p_hat - p).abs();
            let se = (p * (1.0 - p) / hits as f64).max(0.0).sqrt();
            let z = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                diff / se
            };
            if z > worst.z || worst.estimate.is_nan() {
                worst = ZScore {
                    z,
                    pixel: i,
                    class: l,
                    estimate: p_hat,
                    reference: p,
                };
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensePartition {
    pub z: PartitionField,
    /// The dense matrix could not be factored; `z` is all zeros.
    pub singular: bool,
}

/// Builds the full dense system from pixel coordinates and solves all labels
/// by LU with partial pivoting.
pub fn dense_solve_partition(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
) -> Result<DensePartition> {
    let n = lattice.num_pixels();
    if n > DENSE_MAX_PIXELS {
        return Err(Error::InvalidParameter(format!(
            "dense oracle limited to {DENSE_MAX_PIXELS} pixels, got {n}"
        )));
    }
    if boundary.len() != n {
        return Err(Error::ShapeMismatch("boundary does not match lattice".into()));
    }
    let classes = labels.per_pixel(lattice)?;
    let k = labels.num_classes();
    let (w, h) = (lattice.width(), lattice.height());
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, k);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if let Some(c) = classes[i] {
                a[(i, i)] = 1.0;
                b[(i, c)] = 1.0;
                continue;
            }
            // 4 e^{B} Z_i = sum of in-grid neighbor Z.
            a[(i, i)] = 4.0 * boundary.values()[i].exp();
            let offsets: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
            for (dx, dy) in offsets {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    a[(i, ny as usize * w + nx as usize)] = -1.0;
                }
            }
        }
    }
    let solved = a.lu().solve(&b);
    let (z, singular) = match solved {
        Some(sol) => {
            let mut z = vec![0.0; n * k];
            for i in 0..n {
                for l in 0..k {
                    z[i * k + l] = sol[(i, l)];
                }
            }
            (z, false)
        }
        None => (vec![0.0; n * k], true),
    };
    Ok(DensePartition {
        z: PartitionField::from_raw_unchecked(k, z),
        singular,
    })
}

/// Dense-oracle propagated distributions.
pub fn dense_propagate(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
) -> Result<Propagation> {
    let dense = dense_solve_partition(lattice, labels, boundary)?;
    Ok(Propagation::from_partition(dense.z))
}

/// Central differences of `loss` with respect to each boundary score.
///
/// Where a central step would leave `[0, B_MAX]` a second-order one-sided
/// stencil is used instead.
pub fn finite_diff_boundary_grad<F>(loss: F, boundary: &BoundaryField, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&BoundaryField) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let base = boundary.values();
    let eval = |i: usize, offset: f64| -> Result<f64> {
        let mut v = base.to_vec();
        v[i] += offset;
        loss(&BoundaryField::new(v)?)
    };
    let mut grad = Vec::with_capacity(base.len());
    for (i, &b) in base.iter().enumerate() {
        let g = if b - step >= 0.0 && b + step <= crate::lattice::B_MAX {
            (eval(i, step)? - eval(i, -step)?) / (2.0 * step)
        } else {
            let dir = if b - step < 0.0 { 1.0 } else { -1.0 };
            let f0 = eval(i, 0.0)?;
            let f1 = eval(i, dir * step)?;
            let f2 = eval(i, dir * 2.0 * step)?;
            dir * (4.0 * (f1 - f0) - (f2 - f0)) / (2.0 * step)
        };
        grad.push(g);
    }
    Ok(grad)
}

/// Denominator floor of [`gradient_rel_error`], as a fraction of the
/// largest reference entry.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// Worst entrywise relative error between a computed gradient and a
/// finite-difference reference, with its index.
///
/// The denominator is `max(|a|, |b|, REL_ERROR_FLOOR * max_j |b_j|)`: finite
/// differences carry an absolute roundoff of roughly `eps * |L| / step`, so
/// entries far below the gradient's own scale are compared against that
/// scale. An all-zero reference with an all-zero gradient has error 0.
pub fn gradient_rel_error(computed: &[f64], reference: &[f64]) -> Result<(f64, usize)> {
    if computed.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, reference {}",
            computed.len(),
            reference.len()
        )));
    }
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = REL_ERROR_FLOOR * scale;
    let mut worst = (0.0, 0);
    for (i, (a, b)) in computed.iter().zip(reference).enumerate() {
        let diff = (a - b).abs();
        if diff == 0.0 {
            continue;
        }
        let den = a.abs().max(b.abs()).max(floor);
        let e = if diff.is_nan() { f64::INFINITY } else { diff / den };
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(worst)
}

/// Expected dense cross-entropy under the propagated per-pixel marginals,
/// by explicit enumeration of every dense labeling (`lhs`), next to the
/// propagated cross-entropy `sum_x H(P(x), Q(x))` (`rhs`).
pub fn marginalization_check(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
    q: &LabelField,
) -> Result<(f64, f64)> {
    let k = labels.num_classes();
    if lattice.width() > 3 || lattice.height() > 3 || k > 2 {
        return Err(Error::InvalidParameter(
            "enumeration limited to 3x3 lattices with at most 2 classes".into(),
        ));
    }
    let (labeled, unlabeled) = lattice.partition(labels)?;
    if unlabeled.len() > 9 {
        return Err(Error::InvalidParameter("at most 9 unlabeled pixels".into()));
    }
    if q.num_classes() != k || q.num_pixels() != lattice.num_pixels() {
        return Err(Error::ShapeMismatch("Q does not match lattice and labels".into()));
    }
    let prop = propagate_labels(lattice, labels, boundary)?;
    let classes = labels.per_pixel(lattice)?;
    let neg_log_q = |x: usize, c: usize| -q.pixel(x)[c].max(Q_FLOOR).ln();

    let fixed: f64 = labeled
        .iter()
        .map(|&x| neg_log_q(x, classes[x].expect("labeled")))
        .sum();
    let mut lhs = 0.0;
    let total = k.pow(unlabeled.len() as u32);
    let mut assignment = vec![0usize; unlabeled.len()];
    for code in 0..total {
        let mut rest = code;
        for slot in assignment.iter_mut() {
            *slot = rest % k;
            rest /= k;
        }
        let mut weight = 1.0;
        let mut dense_loss = fixed;
        for (&x, &c) in unlabeled.iter().zip(&assignment) {
            weight *= prop.p.pixel(x)[c];
            dense_loss += neg_log_q(x, c);
        }
        lhs += weight * dense_loss;
    }
    let rhs = cross_entropy_loss(&prop.p, q)?.total;
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_scale_floor() {
        let (e, i) = gradient_rel_error(&[1.0, 1e-9], &[1.0, 0.0]).unwrap();
        assert_eq!(i, 1);
        assert!((e - 1e-7).abs() < 1e-20);
        assert_eq!(gradient_rel_error(&[0.0; 3], &[0.0; 3]).unwrap().0, 0.0);
        assert_eq!(gradient_rel_error(&[2.0], &[1.0]).unwrap(), (0.5, 0));
        assert!(gradient_rel_error(&[f64::NAN], &[1.0]).unwrap().0.is_infinite());
        assert!(gradient_rel_error(&[1.0], &[]).is_err());
    }

    #[test]
    fn dense_two_pixel_fixture_is_exact() {
        let lat = GridLattice::new(2, 1).unwrap();
        let labels = SparseLabels::new(1, [(0, 0)]).unwrap();
        let d = dense_solve_partition(&lat, &labels, &BoundaryField::zeros(&lat)).unwrap();
        assert!(!d.singular);
        assert_eq!(d.z.as_slice(), &[1.0, 0.25]);
    }

    #[test]
    fn dense_all_labeled_gives_indicators() {
        let lat = GridLattice::new(3, 2).unwrap();
        let labels = SparseLabels::new(3, (0..6).map(|i| (i, i % 3))).unwrap();
        let d = dense_solve_partition(&lat, &labels, &BoundaryField::zeros(&lat)).unwrap();
        for i in 0..6 {
            for l in 0..3 {
                assert_eq!(d.z.get(i, l), if l == i % 3 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dense_rejects_large_lattices() {
        let lat = GridLattice::new(65, 64).unwrap();
        let labels = SparseLabels::new(1, [(0, 0)]).unwrap();
        assert!(dense_solve_partition(&lat, &labels, &BoundaryField::zeros(&lat)).is_err());
    }

    #[test]
    fn mc_single_class_is_exact() {
        let lat = GridLattice::new(3, 3).unwrap();
        let labels = SparseLabels::new(1, [(4, 0)]).unwrap();
        let est = mc_hitting_probabilities(&lat, &labels, &BoundaryField::zeros(&lat), 500, DEFAULT_MAX_STEPS, 3)
            .unwrap();
        for i in 0..9 {
            assert_eq!(est.probs[i], 1.0);
            assert_eq!(est.stderr[i], 0.0);
        }
        assert_eq!(est.deaths[4], 0.0);
        assert!(est.deaths[0] > 0.0);
    }

    #[test]
    fn mc_symmetric_chain() {
        let lat = GridLattice::new(3, 1).unwrap();
        let labels = SparseLabels::new(2, [(0, 0), (2, 1)]).unwrap();
        let b = BoundaryField::new(vec![0.0, 0.7, 0.0]).unwrap();
        let est = mc_hitting_probabilities(&lat, &labels, &b, 100_000, DEFAULT_MAX_STEPS, 11).unwrap();
        let p = est.probs[2];
        assert!((p - 0.5).abs() <= 3.0 * est.stderr[2], "{p} ± {}", est.stderr[2]);
    }

    #[test]
    fn mc_is_deterministic_and_rejects_zero_walks() {
        let lat = GridLattice::new(3, 2).unwrap();
        let labels = SparseLabels::new(2, [(0, 0), (5, 1)]).unwrap();
        let b = BoundaryField::new(vec![0.3; 6]).unwrap();
        let a = mc_hitting_probabilities(&lat, &labels, &b, 1000, 100, 9).unwrap();
        let c = mc_hitting_probabilities(&lat, &labels, &b, 1000, 100, 9).unwrap();
        assert_eq!(a, c);
        assert!(mc_hitting_probabilities(&lat, &labels, &b, 0, 100, 9).is_err());
    }

    #[test]
    fn step_cap_discards_walks() {
        let lat = GridLattice::new(5, 1).unwrap();
        let labels = SparseLabels::new(1, [(0, 0)]).unwrap();
        let est = mc_hitting_probabilities(&lat, &labels, &BoundaryField::zeros(&lat), 200, 1, 1).unwrap();
        // From pixel 4 no walk reaches the label within one step.
        assert_eq!(est.hits[4], 0);
        assert_eq!(est.deaths[4], 1.0);
    }

    #[test]
    fn finite_differences_of_constant_loss_vanish() {
        let b = BoundaryField::new(vec![0.0, 1.0, 2.0]).unwrap();
        let g = finite_diff_boundary_grad(|_| Ok(4.2), &b, 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_boundary_grad(|_| Ok(0.0), &b, 0.0).is_err());
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let b = BoundaryField::new(vec![0.0, 1.0, 49.99999]).unwrap();
        let loss = |f: &BoundaryField| Ok(f.values().iter().map(|v| v * v).sum::<f64>());
        let g = finite_diff_boundary_grad(loss, &b, 1e-4).unwrap();
        for (gi, bi) in g.iter().zip(b.values()) {
            assert!((gi - 2.0 * bi).abs() < 1e-6, "{gi} vs {}", 2.0 * bi);
        }
    }

    #[test]
    fn marginalization_all_labeled_is_dense_loss() {
        let lat = GridLattice::new(2, 2).unwrap();
        let labels = SparseLabels::new(2, [(0, 0), (1, 1), (2, 1), (3, 0)]).unwrap();
        let q = LabelField::new(2, vec![0.7, 0.3, 0.4, 0.6, 0.2, 0.8, 0.9, 0.1]).unwrap();
        let (lhs, rhs) = marginalization_check(&lat, &labels, &BoundaryField::zeros(&lat), &q).unwrap();
        let dense = crate::loss::dense_cross_entropy(&[0, 1, 1, 0], &q).unwrap();
        assert_eq!(lhs, dense);
        assert!((rhs - dense).abs() < 1e-15);
    }

    #[test]
    fn marginalization_single_unlabeled_pixel() {
        let lat = GridLattice::new(3, 1).unwrap();
        let labels = SparseLabels::new(2, [(0, 0), (2, 1)]).unwrap();
        let b = BoundaryField::new(vec![0.0, 0.4, 0.0]).unwrap();
        let q = LabelField::new(2, vec![0.6, 0.4, 0.35, 0.65, 0.2, 0.8]).unwrap();
        let (lhs, rhs) = marginalization_check(&lat, &labels, &b, &q).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn marginalization_rejects_large_instances() {
        let lat = GridLattice::new(4, 1).unwrap();
        let labels = SparseLabels::new(2, [(0, 0)]).unwrap();
        let q = LabelField::uniform(4, 2);
        assert!(marginalization_check(&lat, &labels, &BoundaryField::zeros(&lat), &q).is_err());
        let lat = GridLattice::new(2, 1).unwrap();
        let labels = SparseLabels::new(3, [(0, 0)]).unwrap();
        let q = LabelField::uniform(2, 3);
        assert!(marginalization_check(&lat, &labels, &BoundaryField::zeros(&lat), &q).is_err());
    }
}
