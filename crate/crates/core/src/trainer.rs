//! Training loop and frozen-weight evaluation.
//!
//! Each iteration draws fresh problem instances and fresh sample batches,
//! accumulates per-instance gradients on independent tapes (parallel
//! across instances), merges them in instance order, and applies a
//! bias-corrected Adam step under a cosine learning-rate schedule. All
//! randomness is derived from the run seed, so retraining with the same
//! configuration is bit-reproducible regardless of thread scheduling.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::baseline::GaussianMfgCase;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kernels::mmd2_unbiased_value;
use crate::model::{bind, DropoutCtx, Mode, Model, ModelHyper, ModelWeights};
use crate::objectives::{draw_instance_batch, instance_objective, velocities_values, InstanceBatch, TimeGrid};
use crate::problems::{sample_instance, sample_points, Family, FamilyConfig, ProblemInstance};
use crate::rng;
use crate::sample::SampleBatch;

/// Adam moment decay and stability constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: usize,
}

impl OptimState {
    pub fn new(params: usize) -> OptimState {
        OptimState { first: vec![0.0; params], second: vec![0.0; params], step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState, lr: f64, adam: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.first.len()],
        });
    }
    state.step += 1;
    let bc1 = 1.0 - adam.beta1.powi(state.step as i32);
    let bc2 = 1.0 - adam.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = adam.beta1 * state.first[i] + (1.0 - adam.beta1) * g;
        state.second[i] = adam.beta2 * state.second[i] + (1.0 - adam.beta2) * g * g;
        let mhat = state.first[i] / bc1;
        let vhat = state.second[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + adam.eps);
    }
    Ok(())
}

/// Half-cosine decay from `base` to zero over `total` steps; clamps to the
/// final value past the end.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Instances drawn per iteration.
    pub configs_per_batch: usize,
    /// Samples drawn per distribution per instance.
    pub samples_per_batch: usize,
    pub seed: u64,
    /// Time-grid interval count for dynamic objectives.
    pub time_grid: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub eval_cadence: usize,
    /// Where cadence checkpoints land; none disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    pub adam: AdamParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be positive".into()));
        }
        if self.configs_per_batch == 0 {
            return Err(Error::InvalidParameter("need at least one instance per batch".into()));
        }
        if self.samples_per_batch < 2 {
            return Err(Error::SampleSize { min: 2, got: self.samples_per_batch });
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One logged iteration: unweighted per-term means across the instance
/// batch; `total` is the weighted objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub transport: f64,
    pub interaction: f64,
    pub terminal: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricRow>,
}

struct InstanceResult {
    total: f64,
    transport: f64,
    interaction: Option<f64>,
    terminal: f64,
    grad: Vec<f64>,
}

/// Objective and flat gradient of one instance on its own tape.
fn instance_pass(
    hyper: &ModelHyper,
    weights: &ModelWeights,
    batch: &InstanceBatch,
    grid: &TimeGrid,
    dropout_seed: Option<u64>,
) -> Result<InstanceResult> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, weights)?;
    let mut ctx = match dropout_seed {
        Some(seed) => DropoutCtx::train(hyper.dropout, seed),
        None => DropoutCtx::eval(),
    };
    let terms = instance_objective(&mut tape, hyper, &bound, batch, grid, &mut ctx)?;
    let grads = tape.backward(terms.total)?;
    let mut grad = Vec::with_capacity(weights.param_count());
    for id in bound.ordered_ids() {
        match grads.get(id) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.extend(std::iter::repeat(0.0).take(tape.values(id).len())),
        }
    }
    Ok(InstanceResult {
        total: tape.scalar_value(terms.total),
        transport: tape.scalar_value(terms.transport),
        interaction: terms.interaction.map(|t| tape.scalar_value(t)),
        terminal: tape.scalar_value(terms.terminal),
        grad,
    })
}

/// Draw the instance batch for one iteration; streams are keyed by
/// (seed, iteration, instance index) so the draw is schedule-independent.
fn draw_iteration_batches(family: &FamilyConfig, cfg: &TrainConfig, iteration: usize) -> Result<Vec<InstanceBatch>> {
    (0..cfg.configs_per_batch)
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[1, iteration as u64, i as u64]);
            let instance = sample_instance(family, &mut r)?;
            draw_instance_batch(instance, cfg.samples_per_batch, &mut r)
        })
        .collect()
}

/// Amortized training over freshly drawn instances.
pub fn train(family: &FamilyConfig, hyper: ModelHyper, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    family.validate()?;
    hyper.validate()?;
    if hyper.dim != family.dim {
        return Err(Error::Dimension { expected: family.dim, got: hyper.dim });
    }
    let expected_mode = if family.family.is_dynamic() { Mode::Dynamic } else { Mode::Static };
    if hyper.mode != expected_mode {
        return Err(Error::Usage(format!(
            "family {} needs {:?} mode",
            family.family.name(),
            expected_mode
        )));
    }

    let grid = TimeGrid::new(cfg.time_grid)?;
    let model = Model::init(hyper, cfg.seed)?;
    let mut flat = model.weights.flatten();
    let mut state = OptimState::new(flat.len());
    let mut log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let weights = ModelWeights::from_flat(&hyper, &flat)?;
        let batches = draw_iteration_batches(family, cfg, iteration)?;
        let dropout_root = rng::substream_seed(cfg.seed, &[2, iteration as u64]);

        let results: Vec<Result<InstanceResult>> = batches
            .par_iter()
            .enumerate()
            .map(|(i, batch)| {
                let seed = if hyper.dropout > 0.0 {
                    Some(rng::substream_seed(dropout_root, &[i as u64]))
                } else {
                    None
                };
                instance_pass(&hyper, &weights, batch, &grid, seed)
            })
            .collect();

        let mut grad = vec![0.0; flat.len()];
        let mut total = 0.0;
        let mut transport = 0.0;
        let mut interaction = 0.0;
        let mut terminal = 0.0;
        let scale = 1.0 / cfg.configs_per_batch as f64;
        for r in results {
            let r = r?;
            total += scale * r.total;
            transport += scale * r.transport;
            interaction += scale * r.interaction.unwrap_or(0.0);
            terminal += scale * r.terminal;
            for (gi, &x) in grad.iter_mut().zip(&r.grad) {
                *gi += scale * x;
            }
        }

        if !total.is_finite() {
            return Err(Error::NumericAbort(format!(
                "non-finite objective at iteration {iteration}: total={total}, transport={transport}, interaction={interaction}, terminal={terminal}"
            )));
        }

        let lr = cosine_lr(iteration, cfg.iterations, cfg.learning_rate);
        adam_step(&mut flat, &grad, &mut state, lr, &cfg.adam)?;
        log.push(MetricRow { iteration, lr, total, transport, interaction, terminal });

        if let Some(dir) = &cfg.checkpoint_dir {
            let due = cfg.eval_cadence > 0 && (iteration + 1) % cfg.eval_cadence == 0;
            if due || iteration + 1 == cfg.iterations {
                let snapshot = Model { hyper, weights: ModelWeights::from_flat(&hyper, &flat)? };
                checkpoint::save(&dir.join("model.ckpt"), &snapshot)?;
            }
        }
    }

    let weights = ModelWeights::from_flat(&hyper, &flat)?;
    Ok(TrainOutcome { model: Model { hyper, weights }, log })
}

// ── Frozen-weight evaluation ────────────────────────────────────────

/// Unweighted cost terms of one evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValues {
    pub total: f64,
    pub transport: f64,
    pub interaction: Option<f64>,
    pub terminal: f64,
}

/// Objective of `model` on given batches, computed on the value path
/// (inference forward plus plain arithmetic; no tape reductions).
pub fn objective_value(
    model: &Model,
    instance: &ProblemInstance,
    x0: &SampleBatch,
    x1: &SampleBatch,
    grid: &TimeGrid,
) -> Result<TermValues> {
    objective_value_with_queries(model, instance, x0, x1, x0, grid)
}

/// Same as [`objective_value`] with a query set decoupled from the X0
/// context (the transport and interaction means run over `queries`).
pub fn objective_value_with_queries(
    model: &Model,
    instance: &ProblemInstance,
    x0: &SampleBatch,
    x1: &SampleBatch,
    queries: &SampleBatch,
    grid: &TimeGrid,
) -> Result<TermValues> {
    let w = &instance.weights;
    match model.hyper.mode {
        Mode::Static => {
            let pushed = model.map_points(x0, x1, queries)?;
            let d = instance.dim;
            let q = queries.len();
            let mut transport = 0.0;
            for i in 0..q {
                let row = &pushed[i * d..(i + 1) * d];
                transport += row.iter().zip(queries.row(i)).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>();
            }
            transport /= q as f64;
            let pushed_batch = SampleBatch::new(pushed, q, d)?;
            let terminal = mmd2_unbiased_value(&instance.kernel, &pushed_batch, x1)?;
            Ok(TermValues {
                total: w.transport * transport + w.terminal * terminal,
                transport,
                interaction: None,
                terminal,
            })
        }
        Mode::Dynamic => {
            let positions = model.trajectory_points(x0, x1, queries, grid.nodes())?;
            let vels = velocities_values(&positions, grid)?;
            let d = instance.dim;
            let q = queries.len();
            let weights = grid.simpson_weights();

            let mut transport = 0.0;
            for (vk, &wk) in vels.iter().zip(&weights) {
                let mean_sq = vk.iter().map(|&v| v * v).sum::<f64>() / q as f64;
                transport += wk * mean_sq;
            }

            let interaction = instance.obstacle.as_ref().map(|obstacle| {
                let mut acc = 0.0;
                for (pk, &wk) in positions.iter().zip(&weights) {
                    let mean_q: f64 = (0..q).map(|i| obstacle.density(&pk[i * d..(i + 1) * d])).sum::<f64>() / q as f64;
                    acc += wk * mean_q;
                }
                acc
            });

            let pushed = SampleBatch::new(positions.last().unwrap().clone(), q, d)?;
            let terminal = mmd2_unbiased_value(&instance.kernel, &pushed, x1)?;
            Ok(TermValues {
                total: w.transport * transport
                    + w.interaction * interaction.unwrap_or(0.0)
                    + w.terminal * terminal,
                transport,
                interaction,
                terminal,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Fixed query points used for the drift measurement.
    pub landmarks: usize,
    /// Independent context redraws averaged into each drift value.
    pub drift_draws: usize,
    pub time_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sizes: vec![256, 512, 1024, 2048, 4096],
            seeds: vec![0, 1, 2],
            landmarks: 64,
            drift_draws: 6,
            time_grid: 10,
        }
    }
}

/// One evaluated (sample size, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub n: usize,
    pub seed: u64,
    pub objective: f64,
    pub transport: f64,
    pub interaction: Option<f64>,
    pub terminal: f64,
    /// Relative L1 error against the closed-form optimum, when one exists.
    pub oracle_rel_l1: Option<f64>,
    /// Root-mean-square landmark drift from the previous size to this one.
    pub drift_from_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn landmark_outputs(model: &Model, x0: &SampleBatch, x1: &SampleBatch, landmarks: &SampleBatch, grid: &TimeGrid) -> Result<Vec<f64>> {
    match model.hyper.mode {
        Mode::Static => model.map_points(x0, x1, landmarks),
        Mode::Dynamic => Ok(model.trajectory_points(x0, x1, landmarks, &[*grid.nodes().last().unwrap()])?.pop().unwrap()),
    }
}

/// Evaluate frozen weights across sample sizes.
///
/// For every seed an instance is drawn once; per size, fresh batches feed
/// the objective while nested prefix pools feed the landmark drift, whose
/// value at size n is the RMS over `drift_draws` redraws of
/// `||G(n) - G(2n)||` on the fixed landmark set.
pub fn evaluate(model: &Model, family: &FamilyConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.sizes.is_empty() {
        return Err(Error::Usage("at least one evaluation size required".into()));
    }
    family.validate()?;
    let grid = TimeGrid::new(cfg.time_grid)?;
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    let max_n = *sizes.last().unwrap();

    let mut rows = Vec::with_capacity(sizes.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut r = rng::stream(seed, &[10]);
        let instance = sample_instance(family, &mut r)?;
        let landmarks = sample_points(&instance.p0, cfg.landmarks.max(2), &mut r)?;

        // Drift pools: one nested pool pair per draw.
        let mut drift_outputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.drift_draws);
        for draw in 0..cfg.drift_draws {
            let mut rd = rng::stream(seed, &[11, draw as u64]);
            let pool0 = sample_points(&instance.p0, max_n, &mut rd)?;
            let pool1 = sample_points(&instance.p1, max_n, &mut rd)?;
            let outs: Vec<Vec<f64>> = sizes
                .par_iter()
                .map(|&n| landmark_outputs(model, &pool0.prefix(n), &pool1.prefix(n), &landmarks, &grid))
                .collect::<Result<_>>()?;
            drift_outputs.push(outs);
        }

        for (si, &n) in sizes.iter().enumerate() {
            let mut ro = rng::stream(seed, &[12, n as u64]);
            let x0 = sample_points(&instance.p0, n, &mut ro)?;
            let x1 = sample_points(&instance.p1, n, &mut ro)?;
            let terms = objective_value(model, &instance, &x0, &x1, &grid)?;

            let oracle_rel_l1 = gaussian_oracle_value(family.family, &instance, n).map(|v_star| {
                (terms.total - v_star).abs() / v_star
            });

            let drift_from_prev = (si > 0).then(|| {
                let mut sq = 0.0;
                for outs in &drift_outputs {
                    sq += outs[si - 1]
                        .iter()
                        .zip(&outs[si])
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                (sq / cfg.drift_draws as f64).sqrt()
            });

            rows.push(EvalRow {
                n,
                seed,
                objective: terms.total,
                transport: terms.transport,
                interaction: terms.interaction,
                terminal: terms.terminal,
                oracle_rel_l1,
                drift_from_prev,
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Weighted closed-form optimum for instances with one.
fn gaussian_oracle_value(family: Family, instance: &ProblemInstance, samples: usize) -> Option<f64> {
    if family != Family::GaussianTranslate {
        return None;
    }
    let (variance, mean) = match (&instance.p0, &instance.p1) {
        (
            crate::problems::DistributionSpec::IsotropicGaussian { variance, .. },
            crate::problems::DistributionSpec::IsotropicGaussian { mean, .. },
        ) => (*variance, mean.clone()),
        _ => return None,
    };
    let case = GaussianMfgCase::from_weights(variance, mean, &instance.weights, samples).ok()?;
    Some(instance.weights.transport * case.optimal_value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut state = OptimState::new(3);
        adam_step(&mut p, &g, &mut state, 0.1, &AdamParams::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // Unit gradient at step 1: bias correction cancels, update is
        // lr / (1 + eps) up to eps.
        let mut p = vec![0.0];
        let mut state = OptimState::new(1);
        adam_step(&mut p, &[1.0], &mut state, 0.01, &AdamParams::default()).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn adam_is_deterministic_over_steps() {
        let run = || {
            let mut p = vec![0.5, -0.5];
            let mut state = OptimState::new(2);
            for step in 0..100 {
                let g = vec![(step as f64 * 0.1).sin(), (step as f64 * 0.2).cos()];
                adam_step(&mut p, &g, &mut state, 1e-2, &AdamParams::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-15);
        assert_eq!(cosine_lr(100, 100, 0.3), 0.0);
        assert_eq!(cosine_lr(150, 100, 0.3), 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            iterations: 0,
            learning_rate: 1e-3,
            configs_per_batch: 1,
            samples_per_batch: 8,
            seed: 0,
            time_grid: 10,
            eval_cadence: 0,
            checkpoint_dir: None,
            adam: AdamParams::default(),
        };
        assert!(cfg.validate().is_err());
        let ok = TrainConfig { iterations: 1, ..cfg };
        assert!(ok.validate().is_ok());
        let bad_samples = TrainConfig { samples_per_batch: 1, iterations: 1, ..ok.clone() };
        assert!(bad_samples.validate().is_err());
    }
}
