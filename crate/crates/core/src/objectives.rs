//! Differentiable MFG cost terms and the amortized training objective.
//!
//! The static objective scores direct source-to-destination maps:
//! mean squared displacement plus the terminal discrepancy. The dynamic
//! objective evaluates trajectories on a time grid: velocities come from
//! fourth-order one-sided difference stencils, time integrals from
//! composite Simpson quadrature, and the terminal cost compares the
//! pushed samples at t = 1 against the target batch.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::kernels::mmd2_unbiased;
use crate::model::{forward_dynamic_times, forward_static, BoundWeights, DropoutCtx, Mode, ModelHyper};
use crate::problems::{sample_points, ProblemInstance};
use crate::rng;
use crate::sample::SampleBatch;

/// K+1 equidistant nodes on [0, 1]; K even and at least 4 so that both the
/// Simpson rule and the five-point stencils apply.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    intervals: usize,
}

impl TimeGrid {
    pub fn new(intervals: usize) -> Result<TimeGrid> {
        if intervals < 4 {
            return Err(Error::Grid(format!("need at least 4 intervals, got {intervals}")));
        }
        if intervals % 2 != 0 {
            return Err(Error::Grid(format!("composite Simpson needs an even interval count, got {intervals}")));
        }
        let nodes = (0..=intervals).map(|i| i as f64 / intervals as f64).collect();
        Ok(TimeGrid { nodes, intervals })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.intervals as f64
    }

    /// Composite Simpson weights over the grid; they sum to 1.
    pub fn simpson_weights(&self) -> Vec<f64> {
        let k = self.intervals;
        let h = self.dt();
        let mut w = vec![h / 3.0; k + 1];
        for (i, wi) in w.iter_mut().enumerate() {
            if i > 0 && i < k {
                *wi = if i % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
            }
        }
        w
    }
}

/// Fourth-order one-sided first-derivative stencil (offsets 0..4).
pub const FORWARD_STENCIL: [f64; 5] = [-25.0 / 12.0, 4.0, -3.0, 4.0 / 3.0, -0.25];

/// First-derivative weights over a five-node window for the node at
/// `offset` within the window. Offsets 0 and 4 are the forward and
/// mirrored backward stencils; 1..3 only arise on grids too short to keep
/// every node at a window edge (4 or 6 intervals).
fn stencil_at_offset(offset: usize) -> [f64; 5] {
    match offset {
        0 => FORWARD_STENCIL,
        1 => [-0.25, -5.0 / 6.0, 1.5, -0.5, 1.0 / 12.0],
        2 => [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
        3 => [-1.0 / 12.0, 0.5, -1.5, 5.0 / 6.0, 0.25],
        4 => [0.25, -4.0 / 3.0, 3.0, -4.0, 25.0 / 12.0],
        _ => unreachable!("five-node window"),
    }
}

/// Differentiation plan for every node: window start plus scaled weights.
fn stencil_plan(grid: &TimeGrid) -> Vec<(usize, [f64; 5])> {
    let k = grid.intervals;
    let dt = grid.dt();
    (0..=k)
        .map(|node| {
            let start = if node + 4 <= k {
                node
            } else if node >= 4 {
                node - 4
            } else {
                k - 4
            };
            let mut coeffs = stencil_at_offset(node - start);
            for c in &mut coeffs {
                *c /= dt;
            }
            (start, coeffs)
        })
        .collect()
}

/// Node-time derivatives of positions: the forward stencil while five
/// nodes remain ahead, the mirrored backward stencil once the node is at
/// least four nodes in, and the in-window weights on the few short-grid
/// nodes where neither fits. Fourth order at every node.
pub fn velocities(tape: &mut Tape, positions: &[TensorId], grid: &TimeGrid) -> Result<Vec<TensorId>> {
    if positions.len() != grid.intervals + 1 {
        return Err(Error::Grid(format!(
            "expected {} position tensors, got {}",
            grid.intervals + 1,
            positions.len()
        )));
    }
    let mut out = Vec::with_capacity(positions.len());
    for (start, coeffs) in stencil_plan(grid) {
        let ids: Vec<TensorId> = (0..5).map(|j| positions[start + j]).collect();
        out.push(tape.lin_comb(&ids, &coeffs)?);
    }
    Ok(out)
}

/// Value-level twin of [`velocities`] for evaluation paths that never
/// build a tape.
pub fn velocities_values(positions: &[Vec<f64>], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    if positions.len() != grid.intervals + 1 {
        return Err(Error::Grid(format!(
            "expected {} position arrays, got {}",
            grid.intervals + 1,
            positions.len()
        )));
    }
    let len = positions[0].len();
    let mut out = Vec::with_capacity(positions.len());
    for (start, coeffs) in stencil_plan(grid) {
        let mut v = vec![0.0; len];
        for (j, &c) in coeffs.iter().enumerate() {
            for (vi, &p) in v.iter_mut().zip(&positions[start + j]) {
                *vi += c * p;
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// Trajectories of a query batch on the grid, with velocities.
pub struct TrajectoryEval {
    pub positions: Vec<TensorId>,
    pub velocities: Vec<TensorId>,
}

/// Simpson integral over the grid of the query-mean of `per_node` scalars.
fn simpson_of_means(tape: &mut Tape, per_node: &[TensorId], grid: &TimeGrid) -> Result<TensorId> {
    let means: Vec<TensorId> = per_node.iter().map(|&v| tape.mean_all(v)).collect();
    tape.lin_comb(&means, &grid.simpson_weights())
}

/// Simpson-in-time integral of the mean squared velocity.
pub fn transport_cost(tape: &mut Tape, traj: &TrajectoryEval, grid: &TimeGrid) -> Result<TensorId> {
    let sq: Vec<TensorId> = traj
        .velocities
        .iter()
        .map(|&v| tape.sq_norm_rows(v))
        .collect::<Result<_>>()?;
    simpson_of_means(tape, &sq, grid)
}

/// Simpson-in-time integral of the mean obstacle density along trajectories.
pub fn interaction_cost(
    tape: &mut Tape,
    traj: &TrajectoryEval,
    grid: &TimeGrid,
    obstacle: &crate::problems::Obstacle,
) -> Result<TensorId> {
    let dens: Vec<TensorId> = traj
        .positions
        .iter()
        .map(|&p| tape.gaussian_bump_density(p, obstacle.bumps()))
        .collect::<Result<_>>()?;
    simpson_of_means(tape, &dens, grid)
}

/// Terminal discrepancy between pushed samples and the target batch.
pub fn terminal_cost(tape: &mut Tape, pushed: TensorId, x1: TensorId, kernel: &crate::kernels::Kernel) -> Result<TensorId> {
    mmd2_unbiased(tape, kernel, pushed, x1)
}

/// Weighted objective with its unweighted per-term components.
pub struct ObjectiveTerms {
    pub total: TensorId,
    pub transport: TensorId,
    pub interaction: Option<TensorId>,
    pub terminal: TensorId,
}

/// An instance with drawn sample batches; the training unit.
#[derive(Debug, Clone)]
pub struct InstanceBatch {
    pub instance: ProblemInstance,
    pub x0: SampleBatch,
    pub x1: SampleBatch,
}

/// Draw the sample representation of one instance.
pub fn draw_instance_batch(instance: ProblemInstance, samples: usize, rng: &mut ChaCha12Rng) -> Result<InstanceBatch> {
    let x0 = sample_points(&instance.p0, samples, rng)?;
    let x1 = sample_points(&instance.p1, samples, rng)?;
    Ok(InstanceBatch { instance, x0, x1 })
}

/// Objective of one instance. The query points are the X0 rows: they serve
/// both as the sampled initial measure and as the cost quadrature points.
pub fn instance_objective(
    tape: &mut Tape,
    hyper: &ModelHyper,
    bound: &BoundWeights,
    batch: &InstanceBatch,
    grid: &TimeGrid,
    ctx: &mut DropoutCtx,
) -> Result<ObjectiveTerms> {
    let inst = &batch.instance;
    inst.validate()?;
    let n = batch.x0.len();
    let x0 = tape.constant(batch.x0.data().to_vec(), vec![n, inst.dim])?;
    let x1 = tape.constant(batch.x1.data().to_vec(), vec![batch.x1.len(), inst.dim])?;

    match hyper.mode {
        Mode::Static => {
            let pushed = forward_static(tape, hyper, bound, x0, x1, x0, ctx)?;
            let diff = tape.sub(pushed, x0)?;
            let sq = tape.sq_norm_rows(diff)?;
            let transport = tape.mean_all(sq);
            let terminal = terminal_cost(tape, pushed, x1, &inst.kernel)?;
            let total = tape.lin_comb(&[transport, terminal], &[inst.weights.transport, inst.weights.terminal])?;
            Ok(ObjectiveTerms { total, transport, interaction: None, terminal })
        }
        Mode::Dynamic => {
            let positions = forward_dynamic_times(tape, hyper, bound, x0, x1, x0, grid.nodes(), ctx)?;
            let vels = velocities(tape, &positions, grid)?;
            let traj = TrajectoryEval { positions, velocities: vels };
            let transport = transport_cost(tape, &traj, grid)?;
            let terminal = terminal_cost(tape, *traj.positions.last().unwrap(), x1, &inst.kernel)?;
            let mut ids = vec![transport, terminal];
            let mut coeffs = vec![inst.weights.transport, inst.weights.terminal];
            let interaction = match &inst.obstacle {
                Some(obstacle) => {
                    let i = interaction_cost(tape, &traj, grid, obstacle)?;
                    ids.push(i);
                    coeffs.push(inst.weights.interaction);
                    Some(i)
                }
                None => None,
            };
            let total = tape.lin_comb(&ids, &coeffs)?;
            Ok(ObjectiveTerms { total, transport, interaction, terminal })
        }
    }
}

/// Mean objective over a batch of instances, on one tape.
///
/// `dropout_seed = Some(s)` enables train-mode dropout with a distinct
/// deterministic stream per instance.
pub fn amortized_objective(
    tape: &mut Tape,
    hyper: &ModelHyper,
    bound: &BoundWeights,
    batches: &[InstanceBatch],
    grid: &TimeGrid,
    dropout_seed: Option<u64>,
) -> Result<ObjectiveTerms> {
    if batches.is_empty() {
        return Err(Error::Usage("amortized objective needs at least one instance".into()));
    }
    let mut totals = Vec::with_capacity(batches.len());
    let mut transports = Vec::with_capacity(batches.len());
    let mut terminals = Vec::with_capacity(batches.len());
    let mut interactions = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        let mut ctx = match dropout_seed {
            Some(seed) => DropoutCtx::train(hyper.dropout, rng::substream_seed(seed, &[i as u64])),
            None => DropoutCtx::eval(),
        };
        let terms = instance_objective(tape, hyper, bound, batch, grid, &mut ctx)?;
        totals.push(terms.total);
        transports.push(terms.transport);
        terminals.push(terms.terminal);
        if let Some(i) = terms.interaction {
            interactions.push(i);
        }
    }
    let w = vec![1.0 / batches.len() as f64; batches.len()];
    let total = tape.lin_comb(&totals, &w)?;
    let transport = tape.lin_comb(&transports, &w)?;
    let terminal = tape.lin_comb(&terminals, &w)?;
    let interaction = if interactions.len() == batches.len() {
        Some(tape.lin_comb(&interactions, &w)?)
    } else {
        None
    };
    Ok(ObjectiveTerms { total, transport, interaction, terminal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(3).is_err());
        assert!(TimeGrid::new(5).is_err());
        assert!(TimeGrid::new(2).is_err());
        let g = TimeGrid::new(10).unwrap();
        assert_eq!(g.nodes().len(), 11);
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(*g.nodes().last().unwrap(), 1.0);
    }

    #[test]
    fn simpson_weights_sum_to_one_and_integrate_cubics() {
        for k in [4usize, 6, 10, 16] {
            let g = TimeGrid::new(k).unwrap();
            let w = g.simpson_weights();
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            // Exact for cubics: integral of t^3 over [0,1] is 1/4.
            let quad: f64 = w.iter().zip(g.nodes()).map(|(&wi, &t)| wi * t * t * t).sum();
            assert!((quad - 0.25).abs() < 1e-12, "k={k}: {quad}");
        }
    }

    #[test]
    fn constant_positions_have_zero_velocity() {
        let grid = TimeGrid::new(6).unwrap();
        let mut tape = Tape::new();
        let pos: Vec<TensorId> = (0..=6).map(|_| tape.constant(vec![1.5, -2.0], vec![1, 2]).unwrap()).collect();
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        for v in vels {
            for &x in tape.values(v) {
                assert!(x.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_motion_velocity_is_exact() {
        let grid = TimeGrid::new(8).unwrap();
        let v = [0.7, -1.3];
        let mut tape = Tape::new();
        let pos: Vec<TensorId> = grid
            .nodes()
            .iter()
            .map(|&t| tape.constant(vec![1.0 + v[0] * t, 2.0 + v[1] * t], vec![1, 2]).unwrap())
            .collect();
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        for vel in vels {
            let got = tape.values(vel);
            assert!((got[0] - v[0]).abs() < 1e-10);
            assert!((got[1] - v[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn transport_cost_of_constant_velocity_flow() {
        // G(x, t) = x + t v: cost is exactly ||v||^2 for any Simpson grid.
        let grid = TimeGrid::new(10).unwrap();
        let v = [2.0, 0.5, -1.0];
        let want: f64 = v.iter().map(|&x| x * x).sum();
        let mut tape = Tape::new();
        let pos: Vec<TensorId> = grid
            .nodes()
            .iter()
            .map(|&t| {
                let rows: Vec<f64> = (0..4).flat_map(|i| v.iter().map(move |&vc| i as f64 + vc * t)).collect();
                tape.constant(rows, vec![4, 3]).unwrap()
            })
            .collect();
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        let traj = TrajectoryEval { positions: pos, velocities: vels };
        let cost = transport_cost(&mut tape, &traj, &grid).unwrap();
        assert!((tape.scalar_value(cost) - want).abs() < 1e-9);
    }

    #[test]
    fn interaction_cost_of_stationary_agent_at_mode() {
        let grid = TimeGrid::new(10).unwrap();
        let obstacle = crate::problems::Obstacle::centered_disc();
        let mut tape = Tape::new();
        let pos: Vec<TensorId> = grid.nodes().iter().map(|_| tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap()).collect();
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        let traj = TrajectoryEval { positions: pos, velocities: vels };
        let cost = interaction_cost(&mut tape, &traj, &grid, &obstacle).unwrap();
        assert!((tape.scalar_value(cost) - 1.0 / std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn far_trajectories_incur_negligible_interaction() {
        let grid = TimeGrid::new(6).unwrap();
        let obstacle = crate::problems::Obstacle::centered_disc();
        let mut tape = Tape::new();
        // 10 standard deviations out: sigma^2 = 0.5 so sigma ~ 0.707.
        let pos: Vec<TensorId> = grid.nodes().iter().map(|_| tape.constant(vec![7.1, 7.1], vec![1, 2]).unwrap()).collect();
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        let traj = TrajectoryEval { positions: pos, velocities: vels };
        let cost = interaction_cost(&mut tape, &traj, &grid, &obstacle).unwrap();
        assert!(tape.scalar_value(cost) <= 1e-12);
    }

    #[test]
    fn terminal_cost_scales_linearly_with_weight() {
        let mut tape = Tape::new();
        let pushed = tape.constant(vec![0.0, 1.0, 2.0, 3.0], vec![4, 1]).unwrap();
        let x1 = tape.constant(vec![0.5, 1.5, 2.5, 3.5], vec![4, 1]).unwrap();
        let t = terminal_cost(&mut tape, pushed, x1, &Kernel::Linear).unwrap();
        let v = tape.scalar_value(t);
        let doubled = tape.lin_comb(&[t], &[2.0]).unwrap();
        assert!((tape.scalar_value(doubled) - 2.0 * v).abs() < 1e-15);
    }

    #[test]
    fn velocity_grid_size_checked() {
        let grid = TimeGrid::new(6).unwrap();
        let mut tape = Tape::new();
        let pos: Vec<TensorId> = (0..5).map(|_| tape.constant(vec![0.0], vec![1, 1]).unwrap()).collect();
        assert!(velocities(&mut tape, &pos, &grid).is_err());
    }
}
