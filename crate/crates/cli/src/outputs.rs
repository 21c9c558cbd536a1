//! The per-request propagation products shared by `rwprop propagate` and the
//! HTTP service.

use rwprop_core::loss::{entropy, uncertainty_weights};
use rwprop_core::propagate::propagate_with;
use rwprop_core::solver::SolverOptions;
use rwprop_core::{BoundaryField, GridLattice, Result, SparseLabels};

#[derive(Debug, Clone, PartialEq)]
pub struct PropagateOutputs {
    pub num_classes: usize,
    /// Channel-fastest propagated distributions.
    pub p: Vec<f64>,
    pub map: Vec<usize>,
    pub entropy: Vec<f64>,
    pub weights: Vec<f64>,
    pub unreached: Vec<usize>,
}

pub fn compute(
    lattice: &GridLattice,
    labels: &SparseLabels,
    boundary: &BoundaryField,
    alpha: f64,
    solver: &SolverOptions,
) -> Result<PropagateOutputs> {
    let prop = propagate_with(lattice, labels, boundary, solver)?;
    let entropy = prop.p.rows().map(entropy).collect::<Result<Vec<_>>>()?;
    let weights = uncertainty_weights(&prop.p, alpha, &prop.unreached)?;
    Ok(PropagateOutputs {
        num_classes: prop.p.num_classes(),
        map: prop.p.map_labels(),
        p: prop.p.as_slice().to_vec(),
        entropy,
        weights,
        unreached: prop.unreached,
    })
}
