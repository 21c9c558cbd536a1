//! Joint gradient descent on a boundary field and a label predictor.
//!
//! Both predictors are per-pixel parameter fields: `B = link(phi)` clamped
//! to `[0, B_MAX]`, and `Q = softmax(theta)`. The loss is the
//! uncertainty-weighted loss between the propagated labels `P(B)` and `Q`;
//! `phi` receives its gradient through the adjoint solve.

use serde::{Deserialize, Serialize};

use crate::adjoint::{backprop_boundary, grad_p_from_loss};
use crate::error::{Error, Result};
use crate::lattice::{BoundaryField, GridLattice, LabelField, SparseLabels, B_MAX};
use crate::loss::{LossReport, WeightedLoss, DEFAULT_ALPHA};
use crate::propagate::{assemble_system, PreparedSystem, Propagation};
use crate::solver::SolverOptions;

pub const INITIAL_PHI: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    /// `ln(1 + e^phi)`.
    #[default]
    Softplus,
    Exp,
}

impl LinkFunction {
    pub fn apply(self, phi: f64) -> f64 {
        match self {
            LinkFunction::Softplus => {
                if phi > 30.0 {
                    phi
                } else {
                    phi.exp().ln_1p()
                }
            }
            LinkFunction::Exp => phi.exp(),
        }
    }

    pub fn derivative(self, phi: f64) -> f64 {
        match self {
            LinkFunction::Softplus => 1.0 / (1.0 + (-phi).exp()),
            LinkFunction::Exp => phi.exp(),
        }
    }
}

impl std::str::FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Self::Softplus),
            "exp" => Ok(Self::Exp),
            other => Err(Error::InvalidParameter(format!("unknown link function {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryParams {
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub num_classes: usize,
    /// Per-pixel logits, pixel-major.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub boundary: BoundaryParams,
    pub predictor: PredictorParams,
}

impl TrainState {
    /// Nearly free diffusion and a uniform predictor.
    pub fn initial(num_pixels: usize, num_classes: usize) -> Self {
        Self {
            boundary: BoundaryParams {
                phi: vec![INITIAL_PHI; num_pixels],
            },
            predictor: PredictorParams {
                num_classes,
                theta: vec![0.0; num_pixels * num_classes],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_phi: f64,
    pub lr_theta: f64,
    pub alpha: f64,
    /// Recorded with the run; the built-in scenarios and initialization are
    /// deterministic and draw no random numbers.
    pub seed: u64,
    pub link: LinkFunction,
    pub flow_through_weights: bool,
    pub normalize: bool,
    pub solver: SolverOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr_phi: 0.5,
            lr_theta: 0.5,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            link: LinkFunction::Softplus,
            flow_through_weights: false,
            normalize: false,
            solver: SolverOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        // Zero rates are allowed so a step can be evaluated without moving.
        for (name, v) in [("lr-phi", self.lr_phi), ("lr-theta", self.lr_theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    fn loss(&self) -> WeightedLoss {
        WeightedLoss {
            alpha: self.alpha,
            flow_through: self.flow_through_weights,
            normalize: self.normalize,
        }
    }
}

/// Everything computed on the way to the loss.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub boundary: BoundaryField,
    pub propagation: Propagation,
    pub q: LabelField,
    pub loss: LossReport,
    prepared: PreparedSystem,
}

pub fn softmax_rows(logits: &[f64], num_classes: usize) -> LabelField {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(num_classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / s));
    }
    LabelField::from_rows_unchecked(num_classes, probs)
}

pub fn boundary_from_params(phi: &[f64], link: LinkFunction) -> Result<BoundaryField> {
    BoundaryField::new(phi.iter().map(|&v| link.apply(v).clamp(0.0, B_MAX)).collect())
}

pub fn forward(
    state: &TrainState,
    lattice: &GridLattice,
    labels: &SparseLabels,
    config: &TrainConfig,
) -> Result<ForwardPass> {
    let n = lattice.num_pixels();
    let k = labels.num_classes();
    if state.boundary.phi.len() != n
        || state.predictor.theta.len() != n * k
        || state.predictor.num_classes != k
    {
        return Err(Error::ShapeMismatch(format!(
            "parameters do not match a {}x{} lattice with {k} classes",
            lattice.width(),
            lattice.height()
        )));
    }
    let boundary = boundary_from_params(&state.boundary.phi, config.link)?;
    let prepared = assemble_system(lattice, labels, &boundary)?.prepare(&config.solver)?;
    let propagation = prepared.propagate()?;
    let q = softmax_rows(&state.predictor.theta, k);
    let loss = config.loss().evaluate(&propagation.p, &q, &propagation.unreached)?;
    Ok(ForwardPass {
        boundary,
        propagation,
        q,
        loss,
        prepared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

/// `dL/dphi` through the adjoint solve and `dL/dtheta` through the softmax.
pub fn gradients(pass: &ForwardPass, state: &TrainState, config: &TrainConfig) -> Result<Gradients> {
    let k = pass.q.num_classes();
    let dl_dz = grad_p_from_loss(&pass.propagation, &pass.loss.dl_dp)?;
    let dl_db = backprop_boundary(&pass.prepared, &pass.propagation.z, &dl_dz)?;
    let phi: Vec<f64> = state
        .boundary
        .phi
        .iter()
        .zip(dl_db.values())
        .map(|(&p, &g)| {
            if config.link.apply(p) >= B_MAX {
                0.0
            } else {
                g * config.link.derivative(p)
            }
        })
        .collect();

    let mut theta = Vec::with_capacity(pass.q.as_slice().len());
    for (q, g) in pass.q.rows().zip(pass.loss.dl_dq.chunks_exact(k)) {
        let mean: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
        theta.extend(q.iter().zip(g).map(|(ql, gl)| ql * (gl - mean)));
    }

    if let Some(pixel) = phi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { pixel });
    }
    if let Some(pos) = theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { pixel: pos / k });
    }
    Ok(Gradients { phi, theta })
}

/// One full-batch gradient-descent update. Returns the updated state and the
/// loss report of the state it started from.
pub fn step(
    state: &TrainState,
    lattice: &GridLattice,
    labels: &SparseLabels,
    config: &TrainConfig,
) -> Result<(TrainState, LossReport)> {
    let pass = forward(state, lattice, labels, config)?;
    let grads = gradients(&pass, state, config)?;
    Ok((apply_update(state, &grads, config), pass.loss))
}

fn apply_update(state: &TrainState, grads: &Gradients, config: &TrainConfig) -> TrainState {
    let mut next = state.clone();
    next.boundary
        .phi
        .iter_mut()
        .zip(&grads.phi)
        .for_each(|(p, g)| *p -= config.lr_phi * g);
    next.predictor
        .theta
        .iter_mut()
        .zip(&grads.theta)
        .for_each(|(t, g)| *t -= config.lr_theta * g);
    next
}

/// A synthetic labeling problem with known dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub name: String,
    pub lattice: GridLattice,
    pub labels: SparseLabels,
    pub ground_truth: Vec<usize>,
    /// Overrides the default `phi` initialization when present.
    pub initial_phi: Option<Vec<f64>>,
}

pub const SCENARIOS: [&str; 3] = ["twoRegions", "threeRegionsDiagonal", "ringRegion"];

impl SyntheticScenario {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "twoRegions" => Ok(two_regions()),
            "threeRegionsDiagonal" => Ok(three_regions_diagonal()),
            "ringRegion" => Ok(ring_region()),
            other => Err(Error::InvalidParameter(format!(
                "unknown scenario {other:?} (expected one of {})",
                SCENARIOS.join(", ")
            ))),
        }
    }

    /// Pixels with a 4-neighbor of a different ground-truth class.
    pub fn border_mask(&self) -> Vec<bool> {
        (0..self.lattice.num_pixels())
            .map(|i| {
                self.lattice
                    .neighbors_unchecked(i)
                    .iter()
                    .any(|&j| self.ground_truth[j] != self.ground_truth[i])
            })
            .collect()
    }

    pub fn initial_state(&self) -> TrainState {
        let mut state = TrainState::initial(self.lattice.num_pixels(), self.labels.num_classes());
        if let Some(phi) = &self.initial_phi {
            state.boundary.phi = phi.clone();
        }
        state
    }
}

fn build(
    name: &str,
    width: usize,
    height: usize,
    truth: impl Fn(usize, usize) -> usize,
    scribble: impl Fn(usize, usize) -> Option<usize>,
    num_classes: usize,
) -> SyntheticScenario {
    let lattice = GridLattice::new(width, height).expect("built-in sizes are valid");
    let mut ground_truth = Vec::with_capacity(lattice.num_pixels());
    let mut entries = Vec::new();
    for y in 0..height {
        for x in 0..width {
            ground_truth.push(truth(x, y));
            if let Some(c) = scribble(x, y) {
                entries.push((y * width + x, c));
            }
        }
    }
    SyntheticScenario {
        name: name.to_string(),
        lattice,
        labels: SparseLabels::new(num_classes, entries).expect("built-in labels are valid"),
        ground_truth,
        initial_phi: None,
    }
}

/// 16x16, left and right halves, one vertical scribble in each.
fn two_regions() -> SyntheticScenario {
    build(
        "twoRegions",
        16,
        16,
        |x, _| usize::from(x >= 8),
        |x, y| match (x, y) {
            (3, 4..=11) => Some(0),
            (12, 4..=11) => Some(1),
            _ => None,
        },
        2,
    )
}

/// 16x16, three bands along the anti-diagonal, a staircase scribble along the
/// middle of each band.
fn three_regions_diagonal() -> SyntheticScenario {
    build(
        "threeRegionsDiagonal",
        16,
        16,
        |x, y| match x + y {
            0..=10 => 0,
            11..=21 => 1,
            _ => 2,
        },
        |x, y| match (x + y, x) {
            (5, 1..=4) => Some(0),
            (16, 5..=11) => Some(1),
            (27, 12..=15) => Some(2),
            _ => None,
        },
        3,
    )
}

/// 16x16, a central disk inside a surrounding region; the disk is labeled at
/// its center, the surround along the image frame.
fn ring_region() -> SyntheticScenario {
    let r2 = |x: usize, y: usize| (x as f64 - 7.5).powi(2) + (y as f64 - 7.5).powi(2);
    build(
        "ringRegion",
        16,
        16,
        |x, y| usize::from(r2(x, y) <= 16.0),
        |x, y| {
            if (7..=8).contains(&x) && (7..=8).contains(&y) {
                Some(1)
            } else if (x == 0 || x == 15 || y == 0 || y == 15) && (x + y) % 2 == 0 {
                Some(0)
            } else {
                None
            }
        },
        2,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    /// MAP accuracy of `Q` against the ground truth, when one is known.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// One record per state visited: `records[t]` describes the parameters
    /// after `t` updates, so there are `steps + 1` records.
    pub records: Vec<TrainRecord>,
    pub state: TrainState,
    pub boundary: BoundaryField,
    pub p: LabelField,
    pub q: LabelField,
    pub unreached: Vec<usize>,
    pub final_accuracy: Option<f64>,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

pub fn map_accuracy(q: &LabelField, truth: &[usize]) -> f64 {
    let correct = q
        .map_labels()
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    correct as f64 / truth.len().max(1) as f64
}

pub fn train(
    lattice: &GridLattice,
    labels: &SparseLabels,
    ground_truth: Option<&[usize]>,
    initial: TrainState,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    if let Some(truth) = ground_truth {
        if truth.len() != lattice.num_pixels() {
            return Err(Error::ShapeMismatch("ground truth does not match lattice".into()));
        }
    }
    let accuracy = |q: &LabelField| ground_truth.map(|t| map_accuracy(q, t));
    let mut state = initial;
    let mut records = Vec::with_capacity(config.steps + 1);
    for t in 0..config.steps {
        let pass = forward(&state, lattice, labels, config)?;
        let grads = gradients(&pass, &state, config)?;
        records.push(TrainRecord {
            step: t,
            loss: pass.loss.total,
            accuracy: accuracy(&pass.q),
        });
        state = apply_update(&state, &grads, config);
    }
    let last = forward(&state, lattice, labels, config)?;
    let final_accuracy = accuracy(&last.q);
    records.push(TrainRecord {
        step: config.steps,
        loss: last.loss.total,
        accuracy: final_accuracy,
    });
    Ok(TrainTrace {
        records,
        state,
        boundary: last.boundary,
        p: last.propagation.p,
        q: last.q,
        unreached: last.propagation.unreached,
        final_accuracy,
    })
}

pub fn train_demo(scenario: &SyntheticScenario, config: &TrainConfig) -> Result<TrainTrace> {
    train(
        &scenario.lattice,
        &scenario.labels,
        Some(&scenario.ground_truth),
        scenario.initial_state(),
        config,
    )
}
