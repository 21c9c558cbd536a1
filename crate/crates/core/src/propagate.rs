//! Random-walk label propagation.
//!
//! For every label `l` the partition values `Z(x, l)` satisfy
//!
//! ```text
//! 4 e^{B(x)} Z(x, l) - sum_{x' ~ x} Z(x', l) = 0     x unlabeled
//! Z(x, l) = [label(x) == l]                          x labeled
//! ```
//!
//! with `Z = 0` off the grid. All labels share the matrix; only the
//! right-hand side changes. The propagated distribution is `Z` normalized
//! over labels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{BoundaryField, GridLattice, LabelField, SparseLabels};
use crate::solver::{CsrMatrix, LinearSolver, SolverOptions};

/// Pixels whose partition values sum to at most this are treated as
/// unreachable from every label.
pub const EPS_REACH: f64 = 1e-300;

/// Solver output in `[-NEGATIVE_CLAMP, 0)` is rounded to zero; anything more
/// negative is an error.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Interior,
    Absorbing { class: usize },
}

/// The assembled system `A z_l = b_l`, one row per pixel.
#[derive(Debug, Clone)]
pub struct RwSystem {
    lattice: GridLattice,
    num_classes: usize,
    matrix: CsrMatrix,
    /// `C_i = 4 e^{B(x_i)}` on interior rows, 1 on absorbing rows.
    coefficients: Vec<f64>,
    kinds: Vec<RowKind>,
}

pub fn assemble_system(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
) -> Result<RwSystem> {
    boundary.check_shape(lattice)?;
    let classes = labels.per_pixel(lattice)?;
    if labels.is_empty() {
        return Err(Error::NoAbsorbingPixels);
    }
    let n = lattice.num_pixels();
    let mut rows = Vec::with_capacity(n);
    let mut coefficients = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    for (i, class) in classes.iter().enumerate() {
        match class {
            Some(class) => {
                rows.push(vec![(i, 1.0)]);
                coefficients.push(1.0);
                kinds.push(RowKind::Absorbing { class: *class });
            }
            None => {
                let c = 4.0 * boundary.values()[i].exp();
                let mut row = vec![(i, c)];
                row.extend(lattice.neighbors_unchecked(i).into_iter().map(|j| (j, -1.0)));
                rows.push(row);
                coefficients.push(c);
                kinds.push(RowKind::Interior);
            }
        }
    }
    Ok(RwSystem {
        lattice: *lattice,
        num_classes: labels.num_classes(),
        matrix: CsrMatrix::from_rows(rows),
        coefficients,
        kinds,
    })
}

impl RwSystem {
    pub fn lattice(&self) -> &GridLattice {
        &self.lattice
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// The diagonal coefficient `C_i` of row `i`.
    pub fn coefficient(&self, i: usize) -> f64 {
        self.coefficients[i]
    }

    pub fn kind(&self, i: usize) -> RowKind {
        self.kinds[i]
    }

    pub fn kinds(&self) -> &[RowKind] {
        &self.kinds
    }

    /// Right-hand side `b_l`: one at pixels labeled `class`, zero elsewhere.
    pub fn rhs(&self, class: usize) -> Vec<f64> {
        self.kinds
            .iter()
            .map(|k| match k {
                RowKind::Absorbing { class: c } if *c == class => 1.0,
                _ => 0.0,
            })
            .collect()
    }

    /// SOR relaxation factor from the Jacobi spectral radius of the
    /// unweighted lattice Laplacian, scaled by the weakest diagonal.
    pub fn default_omega(&self) -> f64 {
        use std::f64::consts::PI;
        let (w, h) = (self.lattice.width() as f64, self.lattice.height() as f64);
        let c_min = self
            .kinds
            .iter()
            .zip(&self.coefficients)
            .filter(|(k, _)| **k == RowKind::Interior)
            .map(|(_, c)| *c)
            .fold(f64::INFINITY, f64::min);
        if !c_min.is_finite() {
            return 1.0;
        }
        let rho = (0.5 * ((PI / (w + 1.0)).cos() + (PI / (h + 1.0)).cos()) * 4.0 / c_min).min(0.999_999);
        2.0 / (1.0 + (1.0 - rho * rho).sqrt())
    }

    /// Builds the solver (and factorization, on the direct path) used by
    /// both the forward and the adjoint solves.
    pub fn prepare(self, options: &SolverOptions) -> Result<PreparedSystem> {
        let omega = self.default_omega();
        let solver = LinearSolver::new(self.matrix.clone(), options, omega)?;
        Ok(PreparedSystem {
            system: self,
            solver,
        })
    }
}

/// An assembled system together with its solver.
#[derive(Debug, Clone)]
pub struct PreparedSystem {
    system: RwSystem,
    solver: LinearSolver,
}

impl PreparedSystem {
    pub fn system(&self) -> &RwSystem {
        &self.system
    }

    pub fn solver(&self) -> &LinearSolver {
        &self.solver
    }

    pub fn solve_partition(&self) -> Result<PartitionField> {
        let sys = &self.system;
        let n = sys.lattice.num_pixels();
        let k = sys.num_classes;
        // Per-label solves share nothing mutable; collect keeps label order.
        let columns: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|l| self.solver.solve(&sys.rhs(l)).map(|s| s.x))
            .collect::<Result<_>>()?;
        let mut z = vec![0.0; n * k];
        for (l, col) in columns.into_iter().enumerate() {
            for (i, mut v) in col.into_iter().enumerate() {
                match sys.kinds[i] {
                    RowKind::Absorbing { class } => v = if class == l { 1.0 } else { 0.0 },
                    RowKind::Interior => {
                        if v < 0.0 {
                            if v < -NEGATIVE_CLAMP {
                                return Err(Error::NegativePartition {
                                    pixel: i,
                                    class: l,
                                    value: v,
                                });
                            }
                            v = 0.0;
                        }
                    }
                }
                z[i * k + l] = v;
            }
        }
        Ok(PartitionField { num_classes: k, z })
    }

    pub fn propagate(&self) -> Result<Propagation> {
        let z = self.solve_partition()?;
        Ok(Propagation::from_partition(z))
    }
}

/// Per-pixel, per-label partition values, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionField {
    num_classes: usize,
    z: Vec<f64>,
}

impl PartitionField {
    pub fn new(num_classes: usize, z: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || !z.len().is_multiple_of(num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "{} partition values cannot be split into rows of {num_classes}",
                z.len()
            )));
        }
        if let Some(pos) = z.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NegativePartition {
                pixel: pos / num_classes,
                class: pos % num_classes,
                value: z[pos],
            });
        }
        Ok(Self { num_classes, z })
    }

    pub(crate) fn from_raw_unchecked(num_classes: usize, z: Vec<f64>) -> Self {
        debug_assert_eq!(z.len() % num_classes, 0);
        Self { num_classes, z }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.z.len() / self.num_classes
    }

    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        self.z[pixel * self.num_classes + class]
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.z[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.z
            .chunks_exact(self.num_classes)
            .map(|row| row[class])
            .collect()
    }
}

/// Output of a forward propagation.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub p: LabelField,
    pub z: PartitionField,
    /// `sum_l Z(x, l)` per pixel.
    pub sums: Vec<f64>,
    /// Pixels with `sums <= EPS_REACH`, ascending. Their `p` is uniform.
    pub unreached: Vec<usize>,
}

impl Propagation {
    pub fn from_partition(z: PartitionField) -> Self {
        let k = z.num_classes;
        let mut probs = Vec::with_capacity(z.z.len());
        let mut sums = Vec::with_capacity(z.num_pixels());
        let mut unreached = Vec::new();
        for (i, row) in z.z.chunks_exact(k).enumerate() {
            let s: f64 = row.iter().sum();
            sums.push(s);
            if s > EPS_REACH {
                probs.extend(row.iter().map(|v| v / s));
            } else {
                unreached.push(i);
                probs.extend(std::iter::repeat_n(1.0 / k as f64, k));
            }
        }
        Self {
            p: LabelField::from_rows_unchecked(k, probs),
            z,
            sums,
            unreached,
        }
    }

    pub fn is_unreached(&self) -> Vec<bool> {
        let mut mask = vec![false; self.sums.len()];
        for &i in &self.unreached {
            mask[i] = true;
        }
        mask
    }
}

pub fn solve_partition(system: RwSystem, options: &SolverOptions) -> Result<PartitionField> {
    system.prepare(options)?.solve_partition()
}

/// Propagates sparse labels with the default solver settings.
pub fn propagate_labels(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
) -> Result<Propagation> {
    propagate_with(lattice, labels, boundary, &SolverOptions::default())
}

pub fn propagate_with(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
    options: &SolverOptions,
) -> Result<Propagation> {
    assemble_system(lattice, labels, boundary)?
        .prepare(options)?
        .propagate()
}
