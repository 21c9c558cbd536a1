//! Sparse linear solvers for the random-walk systems.
//!
//! Two backends share one interface: a banded LU factorization (row-major
//! pixel order gives bandwidth = lattice width) for systems small enough to
//! factor, and Gauss-Seidel with successive over-relaxation for the rest.
//! Both solve `A x = b` and `A^T x = b` from the same setup, so forward and
//! adjoint passes reuse one factorization.

use crate::error::{Error, Result};

/// Square matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns within a row are
    /// sorted; duplicates are not merged.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                debug_assert!(c < n);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                rows[j].push((i, v));
            }
        }
        Self::from_rows(rows)
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Direct when the banded factorization is cheap, SOR otherwise.
    #[default]
    Auto,
    Direct,
    Sor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Relaxation factor for SOR; `None` lets the caller's estimate apply.
    pub omega: Option<f64>,
    /// Target relative residual `||A x - b|| / ||b||`.
    pub tolerance: f64,
    /// SOR sweep cap; `None` means `100 * n`.
    pub max_sweeps: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kind: SolverKind::Auto,
            omega: None,
            tolerance: 1e-10,
            max_sweeps: None,
        }
    }
}

/// Budget for the direct path, in multiply-adds (`n * bandwidth^2`).
const DIRECT_FLOP_BUDGET: f64 = 3e8;
/// Budget for the direct path, in stored band entries.
const DIRECT_STORAGE_BUDGET: usize = 8_000_000;
const MAX_REFINEMENT_STEPS: usize = 3;
const RESIDUAL_CHECK_INTERVAL: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub relative_residual: f64,
    /// SOR sweeps or refinement steps used.
    pub iterations: usize,
}

#[derive(Debug, Clone)]
enum Backend {
    Direct(BandedLu),
    Sor { omega: f64, transpose: CsrMatrix },
}

#[derive(Debug, Clone)]
pub struct LinearSolver {
    matrix: CsrMatrix,
    backend: Backend,
    tolerance: f64,
    max_sweeps: usize,
}

impl LinearSolver {
    /// `default_omega` is used by the SOR backend when the options leave it open.
    pub fn new(matrix: CsrMatrix, options: &SolverOptions, default_omega: f64) -> Result<Self> {
        let n = matrix.dim();
        let bw = matrix.bandwidth();
        let direct = match options.kind {
            SolverKind::Direct => true,
            SolverKind::Sor => false,
            SolverKind::Auto => {
                n as f64 * (bw as f64).powi(2) <= DIRECT_FLOP_BUDGET
                    && n.saturating_mul(2 * bw + 1) <= DIRECT_STORAGE_BUDGET
            }
        };
        let backend = if direct {
            Backend::Direct(BandedLu::factor(&matrix, bw)?)
        } else {
            let omega = options.omega.unwrap_or(default_omega);
            if !(omega > 0.0 && omega < 2.0) {
                return Err(Error::InvalidParameter(format!(
                    "SOR relaxation factor {omega} outside (0, 2)"
                )));
            }
            Backend::Sor {
                omega,
                transpose: matrix.transpose(),
            }
        };
        Ok(Self {
            max_sweeps: options.max_sweeps.unwrap_or(100 * n.max(1)),
            matrix,
            backend,
            tolerance: options.tolerance,
        })
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.backend, Backend::Direct(_))
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Solves `A x = b`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Solution> {
        self.solve_impl(rhs, false)
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Solution> {
        self.solve_impl(rhs, true)
    }

    fn solve_impl(&self, rhs: &[f64], transposed: bool) -> Result<Solution> {
        let n = self.matrix.dim();
        if rhs.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "right-hand side has {} entries, system has {n} rows",
                rhs.len()
            )));
        }
        let b_norm = norm2(rhs);
        if b_norm == 0.0 {
            return Ok(Solution {
                x: vec![0.0; n],
                relative_residual: 0.0,
                iterations: 0,
            });
        }
        match &self.backend {
            Backend::Direct(lu) => {
                let apply = |x: &[f64]| {
                    if transposed {
                        mul_transpose(&self.matrix, x)
                    } else {
                        self.matrix.mul_vec(x)
                    }
                };
                let solve = |r: &[f64]| {
                    if transposed {
                        lu.solve_transpose(r)
                    } else {
                        lu.solve(r)
                    }
                };
                let mut x = solve(rhs);
                let mut residual = sub(rhs, &apply(&x));
                let mut rel = norm2(&residual) / b_norm;
                let mut steps = 0;
                while rel > self.tolerance && steps < MAX_REFINEMENT_STEPS {
                    let dx = solve(&residual);
                    x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
                    residual = sub(rhs, &apply(&x));
                    rel = norm2(&residual) / b_norm;
                    steps += 1;
                }
                if rel > self.tolerance || !rel.is_finite() {
                    return Err(Error::NonConvergence {
                        sweeps: steps,
                        residual: rel,
                    });
                }
                Ok(Solution {
                    x,
                    relative_residual: rel,
                    iterations: steps,
                })
            }
            Backend::Sor { omega, transpose } => {
                let a = if transposed { transpose } else { &self.matrix };
                sor(a, rhs, *omega, self.tolerance, self.max_sweeps, transposed, b_norm)
            }
        }
    }
}

fn sor(
    a: &CsrMatrix,
    rhs: &[f64],
    omega: f64,
    tolerance: f64,
    max_sweeps: usize,
    reverse: bool,
    b_norm: f64,
) -> Result<Solution> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let mut diag = vec![0.0; n];
    for (i, d) in diag.iter_mut().enumerate() {
        *d = a.get(i, i);
        if *d == 0.0 {
            return Err(Error::InvalidParameter(format!("zero diagonal in row {i}")));
        }
    }
    let mut rel = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let mut step = |i: usize| {
            let mut sigma = 0.0;
            let mut has_off_diagonal = false;
            for (j, v) in a.row(i) {
                if j != i {
                    sigma += v * x[j];
                    has_off_diagonal = true;
                }
            }
            let gs = (rhs[i] - sigma) / diag[i];
            // Rows without couplings are solved exactly on the first sweep.
            x[i] = if has_off_diagonal {
                (1.0 - omega) * x[i] + omega * gs
            } else {
                gs
            };
        };
        if reverse {
            (0..n).rev().for_each(&mut step);
        } else {
            (0..n).for_each(&mut step);
        }
        if sweep % RESIDUAL_CHECK_INTERVAL == 0 || sweep == max_sweeps {
            rel = norm2(&sub(rhs, &a.mul_vec(&x))) / b_norm;
            if !rel.is_finite() {
                break;
            }
            if rel <= tolerance {
                return Ok(Solution {
                    x,
                    relative_residual: rel,
                    iterations: sweep,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        sweeps: max_sweeps,
        residual: rel,
    })
}

/// LU factorization without pivoting in band storage. Valid for the
/// diagonally dominant lattice systems, whose leading principal minors are
/// all nonzero.
#[derive(Debug, Clone)]
struct BandedLu {
    n: usize,
    bw: usize,
    /// Row `i` holds columns `i - bw ..= i + bw`; `L` (unit diagonal) below,
    /// `U` on and above the diagonal.
    band: Vec<f64>,
}

impl BandedLu {
    fn factor(matrix: &CsrMatrix, bw: usize) -> Result<Self> {
        let n = matrix.dim();
        let width = 2 * bw + 1;
        let mut band = vec![0.0; n * width];
        let at = |i: usize, j: usize| i * width + (j + bw - i);
        for i in 0..n {
            for (j, v) in matrix.row(i) {
                band[at(i, j)] += v;
            }
        }
        for k in 0..n {
            let pivot = band[at(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "zero pivot at row {k}; matrix is not factorizable without pivoting"
                )));
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let lik = band[at(i, k)];
                if lik == 0.0 {
                    continue;
                }
                let l = lik / pivot;
                band[at(i, k)] = l;
                for j in k + 1..=last {
                    let ukj = band[at(k, j)];
                    if ukj != 0.0 {
                        band[at(i, j)] -= l * ukj;
                    }
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (2 * self.bw + 1) + (j + self.bw - i)]
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in i.saturating_sub(self.bw)..i {
                s -= self.at(i, j) * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..=(i + self.bw).min(n - 1) {
                s -= self.at(i, j) * y[j];
            }
            y[i] = s / self.at(i, i);
        }
        y
    }

    /// `A^T = U^T L^T`: forward with `U^T`, then backward with `L^T`.
    fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut w = rhs.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for j in i.saturating_sub(self.bw)..i {
                s -= self.at(j, i) * w[j];
            }
            w[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in i + 1..=(i + self.bw).min(n - 1) {
                s -= self.at(j, i) * w[j];
            }
            w[i] = s;
        }
        w
    }
}

fn mul_transpose(a: &CsrMatrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.dim()];
    for (i, &xi) in x.iter().enumerate() {
        for (j, v) in a.row(i) {
            out[j] += v * xi;
        }
    }
    out
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
