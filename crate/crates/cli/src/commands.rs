//! Subcommand implementations. Each returns a [`CliError`] whose
//! [`exit_code`](CliError::exit_code) is the process status.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwprop_core::adjoint::{backprop_boundary, grad_p_from_loss};
use rwprop_core::lattice::LabelField;
use rwprop_core::loss::{WeightedLoss, DEFAULT_ALPHA};
use rwprop_core::oracle::{
    finite_diff_boundary_grad, gradient_rel_error, max_z_score, mc_hitting_probabilities, DEFAULT_MAX_STEPS,
};
use rwprop_core::propagate::assemble_system;
use rwprop_core::solver::{SolverKind, SolverOptions};
use rwprop_core::trainer::{train, LinkFunction, SyntheticScenario, TrainConfig, TrainState};
use rwprop_core::{propagate_labels, BoundaryField, GridLattice, SparseLabels};

use crate::formats::{FieldFile, FormatError, GrayImage, LabelsFile};
use crate::outputs;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const MCCHECK_TOLERANCE: f64 = 3.5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] rwprop_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_INVALID,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum SolverArg {
    #[default]
    Auto,
    Direct,
    Sor,
}

impl SolverArg {
    pub fn options(self) -> SolverOptions {
        SolverOptions {
            kind: match self {
                SolverArg::Auto => SolverKind::Auto,
                SolverArg::Direct => SolverKind::Direct,
                SolverArg::Sor => SolverKind::Sor,
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum LinkArg {
    #[default]
    Softplus,
    Exp,
}

impl From<LinkArg> for LinkFunction {
    fn from(v: LinkArg) -> Self {
        match v {
            LinkArg::Softplus => LinkFunction::Softplus,
            LinkArg::Exp => LinkFunction::Exp,
        }
    }
}

/// Parses `WxH`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("bad dimension {v:?} in {s:?}")),
    };
    Ok((dim(w)?, dim(h)?))
}

#[derive(Debug, Clone, Args)]
pub struct PropagateArgs {
    /// Labels JSON.
    #[arg(long)]
    pub labels: PathBuf,
    /// Boundary field (RWF1, one channel).
    #[arg(long)]
    pub boundary: PathBuf,
    /// Propagated distributions (RWF1, K channels).
    #[arg(long)]
    pub out_p: Option<PathBuf>,
    /// MAP labeling as binary PGM, class ids as gray levels.
    #[arg(long)]
    pub out_map: Option<PathBuf>,
    #[arg(long)]
    pub out_entropy: Option<PathBuf>,
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t)]
    pub solver: SolverArg,
}

fn read_boundary(path: &Path, lattice: &GridLattice) -> Result<BoundaryField, CliError> {
    let field = FieldFile::read(path)?;
    if field.channels != 1 {
        return Err(CliError::Usage(format!(
            "{}: boundary must have 1 channel, got {}",
            path.display(),
            field.channels
        )));
    }
    if field.width as usize != lattice.width() || field.height as usize != lattice.height() {
        return Err(CliError::Usage(format!(
            "{}: boundary is {}x{}, labels are {}x{}",
            path.display(),
            field.width,
            field.height,
            lattice.width(),
            lattice.height()
        )));
    }
    Ok(BoundaryField::new(field.to_f64())?)
}

fn map_image(lattice: &GridLattice, map: &[usize]) -> GrayImage {
    GrayImage {
        width: lattice.width(),
        height: lattice.height(),
        // Class counts are capped at 255 on input.
        pixels: map.iter().map(|&c| c as u8).collect(),
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--alpha must be >= 0, got {alpha}")))
    }
}

pub fn propagate(args: &PropagateArgs) -> Result<(), CliError> {
    check_alpha(args.alpha)?;
    let (lattice, labels) = LabelsFile::read(&args.labels)?.to_labels()?;
    let boundary = read_boundary(&args.boundary, &lattice)?;
    let out = outputs::compute(&lattice, &labels, &boundary, args.alpha, &args.solver.options())?;
    let (w, h) = (lattice.width() as u32, lattice.height() as u32);
    if let Some(path) = &args.out_p {
        FieldFile::from_f64(w, h, out.num_classes as u32, &out.p)?.write(path)?;
    }
    if let Some(path) = &args.out_map {
        map_image(&lattice, &out.map).write(path)?;
    }
    if let Some(path) = &args.out_entropy {
        FieldFile::from_f64(w, h, 1, &out.entropy)?.write(path)?;
    }
    if let Some(path) = &args.out_weights {
        FieldFile::from_f64(w, h, 1, &out.weights)?.write(path)?;
    }
    eprintln!("unreached: {}", out.unreached.len());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Labels JSON; not needed with --scenario.
    #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
    pub labels: Option<PathBuf>,
    /// Built-in synthetic scenario with known ground truth.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Reference image (PGM); only checked against the lattice size.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr_phi: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_theta: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub link: LinkArg,
    /// Differentiate through the uncertainty weights.
    #[arg(long)]
    pub flow_through: bool,
    /// Divide the loss by the pixel count.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t)]
    pub solver: SolverArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub const TRACE_FILE: &str = "trace.jsonl";
pub const BOUNDARY_FILE: &str = "boundary.rwf";
pub const P_FILE: &str = "p.rwf";
pub const Q_FILE: &str = "q.rwf";
pub const MAP_FILE: &str = "map.pgm";

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Format(FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        steps: args.steps,
        lr_phi: args.lr_phi,
        lr_theta: args.lr_theta,
        alpha: args.alpha,
        seed: args.seed,
        link: args.link.into(),
        flow_through_weights: args.flow_through,
        normalize: args.normalize,
        solver: args.solver.options(),
    };
    config.validate()?;
    let scenario = match (&args.scenario, &args.labels) {
        (Some(name), _) => Some(SyntheticScenario::builtin(name)?),
        _ => None,
    };
    let (lattice, labels, truth, initial) = match (&scenario, &args.labels) {
        (Some(s), _) => (s.lattice, s.labels.clone(), Some(s.ground_truth.as_slice()), s.initial_state()),
        (None, Some(path)) => {
            let (lattice, labels) = LabelsFile::read(path)?.to_labels()?;
            let initial = TrainState::initial(lattice.num_pixels(), labels.num_classes());
            (lattice, labels, None, initial)
        }
        (None, None) => return Err(CliError::Usage("one of --labels or --scenario is required".into())),
    };
    if let Some(path) = &args.image {
        let img = GrayImage::read(path)?;
        if img.width != lattice.width() || img.height != lattice.height() {
            return Err(CliError::Usage(format!(
                "{}: image is {}x{}, lattice is {}x{}",
                path.display(),
                img.width,
                img.height,
                lattice.width(),
                lattice.height()
            )));
        }
    }

    let trace = train(&lattice, &labels, truth, initial, &config)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    let mut lines = String::new();
    for record in &trace.records {
        lines.push_str(&serde_json::to_string(record).expect("record serializes"));
        lines.push('\n');
    }
    let trace_path = args.out_dir.join(TRACE_FILE);
    fs::write(&trace_path, lines).map_err(|e| io_error(&trace_path, e))?;
    let (w, h) = (lattice.width() as u32, lattice.height() as u32);
    let k = labels.num_classes() as u32;
    FieldFile::from_f64(w, h, 1, trace.boundary.values())?.write(&args.out_dir.join(BOUNDARY_FILE))?;
    FieldFile::from_f64(w, h, k, trace.p.as_slice())?.write(&args.out_dir.join(P_FILE))?;
    FieldFile::from_f64(w, h, k, trace.q.as_slice())?.write(&args.out_dir.join(Q_FILE))?;
    map_image(&lattice, &trace.q.map_labels()).write(&args.out_dir.join(MAP_FILE))?;

    let last = trace.records.last().expect("at least one record");
    match trace.final_accuracy {
        Some(acc) => eprintln!("final loss {:.6}, MAP accuracy {:.4}", last.loss, acc),
        None => eprintln!("final loss {:.6}", last.loss),
    }
    if !trace.unreached.is_empty() {
        eprintln!("unreached: {}", trace.unreached.len());
    }
    Ok(())
}

/// A reproducible random problem for the check commands.
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub lattice: GridLattice,
    pub labels: SparseLabels,
    pub boundary: BoundaryField,
    pub q: LabelField,
}

/// `min(W*H, K+1)` labeled pixels at distinct random positions, each class
/// used at least once when there is room; boundary scores uniform in
/// `[0, 2)`; a random strictly positive `Q`.
pub fn check_instance(width: usize, height: usize, classes: usize, seed: u64) -> Result<CheckInstance, CliError> {
    if classes == 0 || classes > crate::formats::MAX_CLASSES {
        return Err(CliError::Usage(format!("--classes must be in 1..=255, got {classes}")));
    }
    let lattice = GridLattice::new(width, height)?;
    let n = lattice.num_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n.min(classes + 1);
    let entries: Vec<(usize, usize)> = sample(&mut rng, n, m)
        .into_iter()
        .enumerate()
        .map(|(j, p)| (p, if j < classes { j } else { rng.random_range(0..classes) }))
        .collect();
    let labels = SparseLabels::new(classes, entries)?;
    let boundary = BoundaryField::new((0..n).map(|_| rng.random_range(0.0..2.0)).collect())?;
    let mut q = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        q.extend(raw.into_iter().map(|v| v / s));
    }
    Ok(CheckInstance {
        lattice,
        labels,
        boundary,
        q: LabelField::new(classes, q)?,
    })
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Lattice size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    pub tolerance: f64,
}

/// Worst relative error of the adjoint gradient of the flow-through
/// weighted loss against finite differences, and its pixel.
pub fn gradcheck_error(inst: &CheckInstance, alpha: f64, fd_step: f64) -> Result<(f64, usize, f64, f64), CliError> {
    let loss = WeightedLoss::new(alpha, true);
    let prepared = assemble_system(&inst.lattice, &inst.labels, &inst.boundary)?.prepare(&SolverOptions::default())?;
    let prop = prepared.propagate()?;
    let report = loss.evaluate(&prop.p, &inst.q, &prop.unreached)?;
    let dz = grad_p_from_loss(&prop, &report.dl_dp)?;
    let analytic = backprop_boundary(&prepared, &prop.z, &dz)?.into_values();
    let fd = finite_diff_boundary_grad(
        |b| {
            let p = propagate_labels(&inst.lattice, &inst.labels, b)?;
            Ok(loss.evaluate(&p.p, &inst.q, &p.unreached)?.total)
        },
        &inst.boundary,
        fd_step,
    )?;
    let (err, at) = gradient_rel_error(&analytic, &fd)?;
    Ok((err, at, analytic[at], fd[at]))
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    check_alpha(args.alpha)?;
    if !(args.fd_step > 0.0 && args.fd_step.is_finite()) {
        return Err(CliError::Usage(format!("--fd-step must be positive, got {}", args.fd_step)));
    }
    let inst = check_instance(args.size.0, args.size.1, args.classes, args.seed)?;
    let (err, pixel, a, f) = gradcheck_error(&inst, args.alpha, args.fd_step)?;
    let (x, y) = inst.lattice.coords(pixel)?;
    println!("max relative error: {err:.3e}");
    println!("worst pixel {pixel} ({x}, {y}): adjoint {a:.12e}, finite difference {f:.12e}");
    if err < args.tolerance {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: relative error {err:.3e} >= {:.1e}",
            args.tolerance
        )))
    }
}

#[derive(Debug, Clone, Args)]
pub struct MccheckArgs {
    /// Lattice size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Walks per start pixel.
    #[arg(long, default_value_t = 100_000)]
    pub walks: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    pub max_steps: u64,
    #[arg(long, default_value_t = MCCHECK_TOLERANCE)]
    pub tolerance: f64,
}

pub fn mccheck(args: &MccheckArgs) -> Result<(), CliError> {
    let inst = check_instance(args.size.0, args.size.1, args.classes, args.seed)?;
    let prop = propagate_labels(&inst.lattice, &inst.labels, &inst.boundary)?;
    let est = mc_hitting_probabilities(
        &inst.lattice,
        &inst.labels,
        &inst.boundary,
        args.walks,
        args.max_steps,
        args.seed,
    )?;
    let z = max_z_score(&est, &prop.p)?;
    println!("max z-score: {:.4}", z.z);
    if z.estimate.is_finite() {
        println!(
            "worst pixel {} class {}: walker {:.6}, solver {:.6}, {} hits",
            z.pixel, z.class, z.estimate, z.reference, est.hits[z.pixel]
        );
    }
    if z.z <= args.tolerance {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "walker disagrees: z-score {:.3} > {}",
            z.z, args.tolerance
        )))
    }
}
