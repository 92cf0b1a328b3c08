//! Gauss-Newton MAP estimation on the block-sparse normal equations.

mod interp;
mod ordering;
mod sparse;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use thiserror::Error;

use crate::factors::{evaluate_all, FactorError};
use crate::liegroup::{exp_se3, log_se3, Pose, Twist};
use crate::model::{
    unanchored_blocks, BlockId, Endpoint, EstimationProblem, FixedMask, ModelError, NodeState, SolverSettings,
    SystemState,
};

pub use interp::Interpolated;
pub use ordering::{minimum_degree_order, order_blocks, symbolic_for};
pub use sparse::{BlockSparseSystem, CholeskyFactor, Part, SymbolicFactor, PIVOT_TOLERANCE};

/// Relative diagonal damping used for the single retry after a failed factorization.
pub const DAMPING_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("under-constrained system at {block} ({part}): {detail}")]
    UnderConstrained { block: BlockId, part: Part, detail: String },
    #[error("line search stalled after {} iterations", diagnostics.iterations.len())]
    Stalled { diagnostics: Box<SolveDiagnostics> },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("arclength {s} outside robot {robot} ([0, {length}])")]
    OutOfRange { robot: usize, s: f64, length: f64 },
    #[error("unknown robot {0}")]
    UnknownRobot(usize),
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Pose => "pose",
            Part::Strain => "strain",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    /// Cost before the step.
    pub cost: f64,
    /// `|δx|∞` of the Gauss-Newton step.
    pub step_norm: f64,
    /// Accepted step length (0 when no step was taken).
    pub alpha: f64,
    /// True if the factorization needed the damped retry.
    pub damped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Timing {
    pub assembly: Duration,
    pub factorization: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SolveDiagnostics {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_cost: f64,
    pub final_step_norm: f64,
    /// Predicted fill-in blocks of the chosen ordering.
    pub fill_blocks: usize,
    pub timing: Timing,
}

/// Scalar mask over a layout: true where the entry is held fixed.
pub fn scalar_mask(layout_owner: &SymbolicFactor, fixed: &FixedMask) -> Vec<bool> {
    let layout = layout_owner.layout();
    let mut out = vec![false; layout.total_dim()];
    for (i, b) in layout.blocks().iter().enumerate() {
        let o = layout.offset(i);
        out[o..o + b.dim()].copy_from_slice(fixed.entries(b));
    }
    out
}

/// Linearizes all factors at `state` and assembles the masked normal equations.
/// Returns the system and the cost at `state`.
pub fn assemble(
    problem: &EstimationProblem,
    state: &SystemState,
    symbolic: &Arc<SymbolicFactor>,
    mask: &[bool],
) -> Result<(BlockSparseSystem, f64), SolveError> {
    let evaluations = evaluate_all(problem, state)?;
    let mut system = BlockSparseSystem::zeros(symbolic.clone());
    let mut cost = 0.0;
    for f in &evaluations {
        cost += f.cost();
        system.add_factor(f);
    }
    system.apply_mask(mask);
    Ok((system, cost))
}

/// `x ⊕ α δ`: left exp update on poses, additive on strains; masked entries untouched.
pub fn retract(state: &SystemState, layout: &SymbolicFactor, delta: &DVector<f64>, alpha: f64, mask: &[bool]) -> SystemState {
    let mut out = state.clone();
    let layout = layout.layout();
    for (i, b) in layout.blocks().iter().enumerate() {
        let o = layout.offset(i);
        let pose_step = |pose: &mut Pose| {
            if mask[o..o + 6].iter().all(|&m| m) {
                return;
            }
            let d = Twist::from_fn(|r, _| if mask[o + r] { 0.0 } else { alpha * delta[o + r] });
            *pose = pose.perturbed(&d);
        };
        match *b {
            BlockId::Node { robot, node } => {
                let n = &mut out.robots[robot][node];
                pose_step(&mut n.pose);
                for r in 0..6 {
                    if !mask[o + 6 + r] {
                        n.strain[r] += alpha * delta[o + 6 + r];
                    }
                }
            }
            BlockId::Body(body) => pose_step(&mut out.bodies[body]),
        }
    }
    out
}

/// Mean state, the final factorization and solve diagnostics.
#[derive(Clone, Debug)]
pub struct PosteriorEstimate {
    pub mean: SystemState,
    pub diagnostics: SolveDiagnostics,
    factor: CholeskyFactor,
    robots: Vec<(Vec<f64>, Matrix6<f64>)>,
}

impl PosteriorEstimate {
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    fn scalar_range(&self, block: &BlockId) -> (usize, usize) {
        let layout = self.factor.symbolic().layout();
        let i = layout.index_of(block);
        (layout.offset(i), block.dim())
    }

    /// Requested diagonal blocks of the posterior covariance, by partial back-substitution.
    pub fn covariances(&self, blocks: &[BlockId]) -> Vec<DMatrix<f64>> {
        let ranges: Vec<(usize, usize)> = blocks.iter().map(|b| self.scalar_range(b)).collect();
        let cols: Vec<usize> = ranges.iter().flat_map(|&(o, d)| o..o + d).collect();
        let inv = self.factor.inverse_columns(&cols);
        let mut c = 0;
        ranges
            .iter()
            .map(|&(o, d)| {
                let m = inv.view((o, c), (d, d)).into_owned();
                c += d;
                0.5 * (&m + m.transpose())
            })
            .collect()
    }

    pub fn covariance(&self, block: &BlockId) -> DMatrix<f64> {
        self.covariances(std::slice::from_ref(block)).remove(0)
    }

    /// `Cov(a, b)`, rows indexed by `a`.
    pub fn cross_covariance(&self, a: &BlockId, b: &BlockId) -> DMatrix<f64> {
        let (oa, da) = self.scalar_range(a);
        let (ob, db) = self.scalar_range(b);
        let cols: Vec<usize> = (ob..ob + db).collect();
        self.factor.inverse_columns(&cols).view((oa, 0), (da, db)).into_owned()
    }

    /// 12×12 blocks of every robot node, grouped by robot.
    pub fn node_covariances(&self) -> Vec<Vec<DMatrix<f64>>> {
        self.robots
            .iter()
            .enumerate()
            .map(|(robot, (s, _))| {
                let blocks: Vec<BlockId> = (0..s.len()).map(|node| BlockId::Node { robot, node }).collect();
                self.covariances(&blocks)
            })
            .collect()
    }

    pub fn body_covariances(&self) -> Vec<DMatrix<f64>> {
        let blocks: Vec<BlockId> = (0..self.mean.bodies.len()).map(BlockId::Body).collect();
        self.covariances(&blocks)
    }

    /// Full posterior covariance in the layout order of the factor. Tests and small problems only.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        self.factor.dense_inverse()
    }
}

/// Straight-rod initialization; bodies from their initial pose or loop-closure predictions.
pub fn initial_state(problem: &EstimationProblem) -> SystemState {
    let t = &problem.topology;
    let fixed = problem.fixed_mask();
    let straight = |base: &Pose, s: &[f64]| -> Vec<NodeState> {
        s.iter()
            .map(|&sk| NodeState {
                pose: exp_se3(&Twist::new(sk, 0.0, 0.0, 0.0, 0.0, 0.0)) * *base,
                strain: crate::liegroup::nominal_strain(),
            })
            .collect()
    };
    let mut robot_done: Vec<bool> = t.robots.iter().map(|r| r.fixed_base).collect();
    let mut body_done: Vec<bool> = t.bodies.iter().map(|b| b.initial_pose.is_some() || b.fixed).collect();
    let mut state = SystemState {
        robots: t.robots.iter().map(|r| straight(&r.base_pose, &r.node_arclengths)).collect(),
        bodies: t.bodies.iter().map(|b| b.initial_pose.unwrap_or_else(Pose::identity)).collect(),
    };

    let done = |e: &Endpoint, rd: &[bool], bd: &[bool]| match *e {
        Endpoint::RobotNode { robot, .. } => rd[robot],
        Endpoint::Body(b) => bd[b],
    };
    // Propagate through couplings until nothing changes.
    loop {
        let mut progressed = false;
        for (b, _) in t.bodies.iter().enumerate() {
            if body_done[b] {
                continue;
            }
            let predictions: Vec<Pose> = t
                .couplings
                .iter()
                .filter_map(|c| {
                    if c.b == Endpoint::Body(b) && done(&c.a, &robot_done, &body_done) {
                        Some(c.offset_b * c.offset_a.inverse() * *state.pose(&c.a))
                    } else if c.a == Endpoint::Body(b) && done(&c.b, &robot_done, &body_done) {
                        Some(c.offset_a * c.offset_b.inverse() * *state.pose(&c.b))
                    } else {
                        None
                    }
                })
                .collect();
            if !predictions.is_empty() {
                state.bodies[b] = log_mean(&predictions);
                body_done[b] = true;
                progressed = true;
            }
        }
        for (r, spec) in t.robots.iter().enumerate() {
            if robot_done[r] {
                continue;
            }
            let anchor = t.couplings.iter().find_map(|c| match (c.a, c.b) {
                (Endpoint::RobotNode { robot, node }, other) if robot == r && done(&other, &robot_done, &body_done) => {
                    Some((node, c.offset_a * c.offset_b.inverse() * *state.pose(&other)))
                }
                (other, Endpoint::RobotNode { robot, node }) if robot == r && done(&other, &robot_done, &body_done) => {
                    Some((node, c.offset_b * c.offset_a.inverse() * *state.pose(&other)))
                }
                _ => None,
            });
            if let Some((node, pose)) = anchor {
                let s = spec.node_arclengths[node];
                let base = exp_se3(&Twist::new(-s, 0.0, 0.0, 0.0, 0.0, 0.0)) * pose;
                state.robots[r] = straight(&base, &spec.node_arclengths);
                robot_done[r] = true;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    for (r, nodes) in state.robots.iter_mut().enumerate() {
        for (k, n) in nodes.iter_mut().enumerate() {
            for j in 0..6 {
                if fixed.robots[r][k][6 + j] {
                    n.strain[j] = fixed.strain_values[r][k][j];
                }
            }
        }
    }
    state
}

/// Log-domain mean of poses, iterated about the running estimate.
fn log_mean(poses: &[Pose]) -> Pose {
    let mut mean = poses[0];
    for _ in 0..10 {
        let d: Vector6<f64> = poses.iter().map(|p| log_se3(&(p * &mean.inverse()))).sum::<Vector6<f64>>() / poses.len() as f64;
        mean = exp_se3(&d) * mean;
        if d.amax() < 1e-14 {
            break;
        }
    }
    mean.reorthonormalized()
}

/// Batch MAP estimate by Gauss-Newton with a backtracking line search.
pub fn gauss_newton(problem: &EstimationProblem, initial: &SystemState) -> Result<PosteriorEstimate, SolveError> {
    let start = Instant::now();
    problem.check_structure()?;
    if let Some(block) = unanchored_blocks(problem).into_iter().next() {
        return Err(SolveError::UnderConstrained {
            block,
            part: Part::Pose,
            detail: "no fixed base, fixed body or pose measurement anchors this group".into(),
        });
    }
    let settings: SolverSettings = problem.hyper.solver;
    let symbolic = Arc::new(order_blocks(problem, settings.ordering));
    let fixed = problem.fixed_mask();
    let mask = scalar_mask(&symbolic, &fixed);

    let mut state = initial.clone();
    for (r, nodes) in state.robots.iter_mut().enumerate() {
        for (k, n) in nodes.iter_mut().enumerate() {
            for j in 0..6 {
                if fixed.robots[r][k][6 + j] {
                    n.strain[j] = fixed.strain_values[r][k][j];
                }
            }
        }
    }

    let mut diagnostics = SolveDiagnostics {
        fill_blocks: symbolic.fill_count(),
        ..Default::default()
    };
    let ls = settings.line_search;
    let mut last: Option<CholeskyFactor> = None;

    for iter in 0..settings.max_iters {
        let t0 = Instant::now();
        let (system, cost) = assemble(problem, &state, &symbolic, &mask)?;
        let t1 = Instant::now();
        diagnostics.timing.assembly += t1 - t0;
        if !cost.is_finite() {
            return Err(SolveError::NumericalFailure(format!("cost is {cost} at iteration {iter}")));
        }
        let (factor, singular) = match system.factor() {
            Ok(f) => (f, None),
            Err(e) => match system.damped(DAMPING_FLOOR).factor() {
                Ok(f) => (f, Some(e)),
                Err(_) => return Err(e),
            },
        };
        let damped = singular.is_some();
        let delta = factor.solve(&system.rhs);
        diagnostics.timing.factorization += t1.elapsed();
        let step_norm = delta.amax();
        diagnostics.final_cost = cost;
        diagnostics.final_step_norm = step_norm;
        if !step_norm.is_finite() {
            return Err(SolveError::NumericalFailure(format!("non-finite step at iteration {iter}")));
        }
        let mut record = IterationRecord {
            cost,
            step_norm,
            alpha: 0.0,
            damped,
        };
        if step_norm < settings.convergence_norm {
            diagnostics.iterations.push(record);
            diagnostics.converged = true;
            if !damped {
                last = Some(factor);
            }
            break;
        }

        let slope = system.rhs.dot(&delta);
        let mut alpha = ls.initial_step;
        let accepted = loop {
            let candidate = retract(&state, &symbolic, &delta, alpha, &mask);
            let c = crate::factors::total_cost(problem, &candidate)?;
            if c.is_nan() {
                return Err(SolveError::NumericalFailure(format!("cost is NaN at iteration {iter}")));
            }
            if c <= cost - ls.armijo * alpha * slope {
                break Some((candidate, c));
            }
            alpha *= ls.shrink;
            if alpha < ls.min_step {
                break None;
            }
        };
        match accepted {
            Some((candidate, c)) => {
                record.alpha = alpha;
                diagnostics.iterations.push(record);
                state = candidate;
                diagnostics.final_cost = c;
            }
            None => {
                diagnostics.iterations.push(record);
                // At round-off level the predicted decrease cannot be resolved by the cost.
                if slope <= 1e-10 * cost.abs().max(f64::MIN_POSITIVE) || slope < 1e-20 {
                    diagnostics.converged = true;
                    break;
                }
                // A damped step that cannot decrease the cost points along a true null space.
                if let Some(e) = singular {
                    return Err(e);
                }
                diagnostics.timing.total = start.elapsed();
                return Err(SolveError::Stalled {
                    diagnostics: Box::new(diagnostics),
                });
            }
        }
    }

    let factor = match last {
        Some(f) => f,
        None => {
            let t0 = Instant::now();
            let (system, cost) = assemble(problem, &state, &symbolic, &mask)?;
            let t1 = Instant::now();
            diagnostics.timing.assembly += t1 - t0;
            diagnostics.final_cost = cost;
            let f = system.factor()?;
            diagnostics.timing.factorization += t1.elapsed();
            f
        }
    };
    diagnostics.timing.total = start.elapsed();
    Ok(PosteriorEstimate {
        mean: state,
        diagnostics,
        factor,
        robots: (0..problem.topology.robots.len())
            .map(|r| (problem.topology.robots[r].node_arclengths.clone(), problem.robot_qc(r)))
            .collect(),
    })
}

/// [`gauss_newton`] from [`initial_state`].
pub fn solve(problem: &EstimationProblem) -> Result<PosteriorEstimate, SolveError> {
    gauss_newton(problem, &initial_state(problem))
}
