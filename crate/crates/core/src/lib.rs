//! Differentiable random-walk label propagation on 4-connected pixel lattices.
//!
//! Sparse labels are propagated to dense per-pixel distributions through the
//! hitting probabilities of absorbing random walks whose survival is damped
//! by a per-pixel boundary field. The propagation is a set of sparse linear
//! solves, and the gradient of any loss on the propagated labels with
//! respect to the boundary field is one more (transposed) solve per label.
//!
//! - [`lattice`]: geometry, sparse labels and per-pixel fields
//! - [`propagate`]: system assembly, partition values, propagated labels
//! - [`adjoint`]: gradients with respect to the boundary field
//! - [`loss`]: cross-entropy and uncertainty-weighted losses
//! - [`trainer`]: joint learning of boundaries and predictions
//! - [`oracle`]: independent reference computations for testing

pub mod adjoint;
pub mod error;
pub mod lattice;
pub mod loss;
pub mod oracle;
pub mod propagate;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
pub use lattice::{BoundaryField, GridLattice, LabelField, SparseLabels, B_MAX};
pub use propagate::{propagate_labels, PartitionField, Propagation};
