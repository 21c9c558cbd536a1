#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwprop_core::lattice::LabelField;
use rwprop_core::{BoundaryField, GridLattice, SparseLabels};

pub struct Instance {
    pub lattice: GridLattice,
    pub labels: SparseLabels,
    pub boundary: BoundaryField,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lattice side lengths in `sides`, labels drawn without replacement,
/// boundary scores uniform in `[0, b_max)`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    sides: std::ops::RangeInclusive<usize>,
    classes: &[usize],
    max_labeled: usize,
    b_max: f64,
) -> Instance {
    let w = rng.random_range(sides.clone());
    let h = rng.random_range(sides);
    let k = classes[rng.random_range(0..classes.len())];
    let lattice = GridLattice::new(w, h).unwrap();
    let n = w * h;
    let m = rng.random_range(1..=max_labeled.min(n));
    let entries: Vec<(usize, usize)> = sample(rng, n, m)
        .into_iter()
        .map(|p| (p, rng.random_range(0..k)))
        .collect();
    let labels = SparseLabels::new(k, entries).unwrap();
    let boundary = BoundaryField::new((0..n).map(|_| rng.random_range(0.0..b_max)).collect()).unwrap();
    Instance {
        lattice,
        labels,
        boundary,
    }
}

pub fn random_simplex_field(rng: &mut ChaCha8Rng, num_pixels: usize, k: usize) -> LabelField {
    let mut rows = Vec::with_capacity(num_pixels * k);
    for _ in 0..num_pixels {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        rows.extend(raw.into_iter().map(|v| v / s));
    }
    LabelField::new(k, rows).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`, maximized over entries; returns the
/// worst value and its index.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |acc, (i, e)| if e > acc.0 { (e, i) } else { acc })
}
