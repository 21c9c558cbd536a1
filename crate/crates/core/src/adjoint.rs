//! Gradients of a scalar loss with respect to the boundary field.
//!
//! Perturbing the diagonal coefficient `C_i` of `A z = b` by `eps` changes
//! the solution by `-eps A^{-1} e_i z_i`, so with `u = A^{-T} dL/dz`
//!
//! ```text
//! dL/dC_i = -u_i z_i      dL/dB_i = C_i dL/dC_i      (C_i = 4 e^{B_i})
//! ```
//!
//! summed over labels. Absorbing rows have a constant diagonal and receive
//! no gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::propagate::{PartitionField, PreparedSystem, Propagation, RowKind};

/// `dL/dB` per pixel; exactly zero at absorbing pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGradient {
    values: Vec<f64>,
}

impl BoundaryGradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Chains `dL/dP` through the normalization `P = Z / sum_l Z`:
/// `dL/dZ(x, l) = (dL/dP(x, l) - sum_m dL/dP(x, m) P(x, m)) / S(x)`.
/// Unreached pixels get zero.
pub fn grad_p_from_loss(prop: &Propagation, dl_dp: &[f64]) -> Result<Vec<f64>> {
    let k = prop.p.num_classes();
    if dl_dp.len() != prop.p.as_slice().len() {
        return Err(Error::ShapeMismatch(format!(
            "dL/dP has {} entries, P has {}",
            dl_dp.len(),
            prop.p.as_slice().len()
        )));
    }
    let unreached = prop.is_unreached();
    let mut out = vec![0.0; dl_dp.len()];
    for (i, ((g, p), o)) in dl_dp
        .chunks_exact(k)
        .zip(prop.p.rows())
        .zip(out.chunks_exact_mut(k))
        .enumerate()
    {
        if unreached[i] {
            continue;
        }
        let mean: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        let inv = 1.0 / prop.sums[i];
        for l in 0..k {
            o[l] = inv * (g[l] - mean);
        }
    }
    Ok(out)
}

/// Solves the adjoint system per label and accumulates `dL/dB`.
pub fn backprop_boundary(
    prepared: &PreparedSystem,
    z: &PartitionField,
    dl_dz: &[f64],
) -> Result<BoundaryGradient> {
    let sys = prepared.system();
    let n = sys.lattice().num_pixels();
    let k = sys.num_classes();
    if z.num_pixels() != n || z.num_classes() != k || dl_dz.len() != n * k {
        return Err(Error::ShapeMismatch(format!(
            "system is {n} pixels x {k} labels, Z is {} x {}, dL/dZ has {} entries",
            z.num_pixels(),
            z.num_classes(),
            dl_dz.len()
        )));
    }
    // dL/dZ carries a 1/S factor that reaches ~1e300 next to unreached
    // regions, so each right-hand side is solved at unit scale and the scale
    // is folded back into z, which is correspondingly tiny there.
    let adjoints: Vec<(Vec<f64>, f64)> = (0..k)
        .into_par_iter()
        .map(|l| {
            let rhs: Vec<f64> = dl_dz.chunks_exact(k).map(|row| row[l]).collect();
            let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return prepared.solver().solve_transpose(&rhs).map(|s| (s.x, 1.0));
            }
            let unit: Vec<f64> = rhs.iter().map(|v| v / scale).collect();
            prepared.solver().solve_transpose(&unit).map(|s| (s.x, scale))
        })
        .collect::<Result<_>>()?;

    let mut dl_dc = vec![0.0; n];
    // Ascending label order keeps the reduction reproducible.
    for (l, (u, scale)) in adjoints.iter().enumerate() {
        for (i, acc) in dl_dc.iter_mut().enumerate() {
            if sys.kind(i) == RowKind::Interior {
                *acc -= u[i] * (z.get(i, l) * scale);
            }
        }
    }
    let values: Vec<f64> = dl_dc
        .iter()
        .enumerate()
        .map(|(i, g)| match sys.kind(i) {
            RowKind::Interior => g * sys.coefficient(i),
            RowKind::Absorbing { .. } => 0.0,
        })
        .collect();
    if let Some(pixel) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { pixel });
    }
    Ok(BoundaryGradient { values })
}
