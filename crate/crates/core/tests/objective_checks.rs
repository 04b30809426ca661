//! Objective-level oracles: finite differences through the whole static
//! objective, quadrature and stencil order studies, closed-form component
//! values, and agreement between the tape and value evaluation routes.

mod common;

use common::{fd_gradient_with_step, mean_se, randn_vec, rel_err};
use mfg_operator::autodiff::{Tape, TensorId};
use mfg_operator::kernels::Kernel;
use mfg_operator::model::{bind, DropoutCtx, Mode, Model, ModelHyper, ModelWeights};
use mfg_operator::objectives::{
    amortized_objective, draw_instance_batch, instance_objective, velocities, velocities_values, InstanceBatch,
    TimeGrid, TrajectoryEval,
};
use mfg_operator::problems::{
    sample_instance, sample_points, DistributionSpec, Family, FamilyConfig, MfgWeights, Obstacle, ProblemInstance,
};
use mfg_operator::rng::stream;
use mfg_operator::sample::SampleBatch;
use mfg_operator::trainer::objective_value;

fn tiny_hyper(mode: Mode) -> ModelHyper {
    ModelHyper { dim: 2, embed_width: 8, mlp_hidden: 8, blocks: 1, heads: 2, dropout: 0.0, mode }
}

fn gaussian_instance(weights: MfgWeights) -> ProblemInstance {
    ProblemInstance {
        dim: 2,
        p0: DistributionSpec::IsotropicGaussian { mean: vec![0.0, 0.0], variance: 0.5 },
        p1: DistributionSpec::IsotropicGaussian { mean: vec![1.0, 0.8], variance: 0.5 },
        obstacle: None,
        kernel: Kernel::Linear,
        weights,
    }
}

fn small_batch(instance: &ProblemInstance, n: usize, seed: u64) -> InstanceBatch {
    let mut r = stream(seed, &[]);
    draw_instance_batch(instance.clone(), n, &mut r).unwrap()
}

#[test]
fn full_static_objective_gradient_matches_finite_differences() {
    // Width-8 model, two samples in two dimensions: the whole objective
    // (forward, displacement cost, terminal estimator) against central
    // differences on every weight.
    let hyper = tiny_hyper(Mode::Static);
    let weights = ModelWeights::init(&hyper, 5).unwrap();
    let instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 });
    let batch = small_batch(&instance, 2, 7);
    let grid = TimeGrid::new(10).unwrap();

    let eval = |flat: &[f64]| -> f64 {
        let w = ModelWeights::from_flat(&hyper, flat).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &w).unwrap();
        let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
        tape.scalar_value(terms.total)
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &weights).unwrap();
    let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
    let grads = tape.backward(terms.total).unwrap();
    let mut got = Vec::new();
    for id in bound.ordered_ids() {
        match grads.get(id) {
            Some(g) => got.extend_from_slice(g),
            None => got.extend(std::iter::repeat(0.0).take(tape.values(id).len())),
        }
    }

    let flat = weights.flatten();
    let want = fd_gradient_with_step(&mut |x: &[f64]| eval(x), &flat, 1e-5);
    let err = rel_err(&got, &want);
    assert!(err <= 1e-4, "static objective gradient rel err {err:.3e}");
}

#[test]
fn full_dynamic_objective_gradient_matches_finite_differences() {
    let hyper = tiny_hyper(Mode::Dynamic);
    let weights = ModelWeights::init(&hyper, 6).unwrap();
    let mut instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 1.0, terminal: 1.0 });
    instance.obstacle = Some(Obstacle::centered_disc());
    instance.kernel = Kernel::gaussian(1.0).unwrap();
    let batch = small_batch(&instance, 2, 8);
    let grid = TimeGrid::new(4).unwrap();

    let eval = |flat: &[f64]| -> f64 {
        let w = ModelWeights::from_flat(&hyper, flat).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &w).unwrap();
        let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
        tape.scalar_value(terms.total)
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &weights).unwrap();
    let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
    let grads = tape.backward(terms.total).unwrap();
    let mut got = Vec::new();
    for id in bound.ordered_ids() {
        match grads.get(id) {
            Some(g) => got.extend_from_slice(g),
            None => got.extend(std::iter::repeat(0.0).take(tape.values(id).len())),
        }
    }

    let flat = weights.flatten();
    let want = fd_gradient_with_step(&mut |x: &[f64]| eval(x), &flat, 1e-5);
    let err = rel_err(&got, &want);
    assert!(err <= 1e-4, "dynamic objective gradient rel err {err:.3e}");
}

#[test]
fn transport_gradient_through_positions() {
    // d(transport)/d(position entry) against finite differences.
    let grid = TimeGrid::new(6).unwrap();
    let mut r = stream(3, &[]);
    let base: Vec<Vec<f64>> = (0..7).map(|_| randn_vec(&mut r, 6)).collect();

    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut pos: Vec<TensorId> = Vec::new();
        pos.push(tape.param(x.to_vec(), vec![3, 2]).unwrap());
        for row in base.iter().skip(1) {
            pos.push(tape.constant(row.clone(), vec![3, 2]).unwrap());
        }
        let vels = velocities(&mut tape, &pos, &grid).unwrap();
        let traj = TrajectoryEval { positions: pos, velocities: vels };
        let cost = mfg_operator::objectives::transport_cost(&mut tape, &traj, &grid).unwrap();
        tape.scalar_value(cost)
    };

    let mut tape = Tape::new();
    let mut pos: Vec<TensorId> = Vec::new();
    let p0 = tape.param(base[0].clone(), vec![3, 2]).unwrap();
    pos.push(p0);
    for row in base.iter().skip(1) {
        pos.push(tape.constant(row.clone(), vec![3, 2]).unwrap());
    }
    let vels = velocities(&mut tape, &pos, &grid).unwrap();
    let traj = TrajectoryEval { positions: pos, velocities: vels };
    let cost = mfg_operator::objectives::transport_cost(&mut tape, &traj, &grid).unwrap();
    let grads = tape.backward(cost).unwrap();
    let got = grads.get(p0).unwrap().to_vec();

    let want = fd_gradient_with_step(&mut |x: &[f64]| eval(x), &base[0], 1e-5);
    let err = rel_err(&got, &want);
    assert!(err <= 1e-5, "transport gradient rel err {err:.3e}");
}

#[test]
fn stencil_is_exact_on_quartics_and_fourth_order_on_quintics() {
    // The five-point stencils differentiate t^4 exactly, so the order
    // study runs on t^5 where the leading error term is alive.
    let exact_err = |k: usize, f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64| -> f64 {
        let grid = TimeGrid::new(k).unwrap();
        let positions: Vec<Vec<f64>> = grid.nodes().iter().map(|&t| vec![f(t)]).collect();
        let vels = velocities_values(&positions, &grid).unwrap();
        vels.iter()
            .zip(grid.nodes())
            .map(|(v, &t)| (v[0] - df(t)).abs())
            .fold(0.0, f64::max)
    };

    // Quartic: error at rounding level.
    let e4 = exact_err(8, &|t| t.powi(4), &|t| 4.0 * t.powi(3));
    assert!(e4 <= 1e-12, "quartic stencil error {e4:.3e}");

    // Quintic: observed convergence order >= 3.8 under grid refinement.
    let e_coarse = exact_err(8, &|t| t.powi(5), &|t| 5.0 * t.powi(4));
    let e_fine = exact_err(16, &|t| t.powi(5), &|t| 5.0 * t.powi(4));
    let order = (e_coarse / e_fine).log2();
    assert!(order >= 3.8, "observed order {order:.2}");
}

#[test]
fn zero_weight_dynamic_model_gives_component_values() {
    // G(x, t) = x for all t: transport vanishes, the interaction integral
    // is the plain sample mean of the obstacle density, and the terminal
    // cost is the raw estimator between X0 and X1.
    let cfg = FamilyConfig::new(Family::CrowdMotion, 2);
    let mut r = stream(21, &[]);
    let instance = sample_instance(&cfg, &mut r).unwrap();
    let batch = draw_instance_batch(instance.clone(), 32, &mut r).unwrap();
    let grid = TimeGrid::new(10).unwrap();

    let hyper = tiny_hyper(Mode::Dynamic);
    let weights = ModelWeights::zeros(&hyper).unwrap();
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &weights).unwrap();
    let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();

    assert!(tape.scalar_value(terms.transport).abs() <= 1e-12);

    let obstacle = instance.obstacle.as_ref().unwrap();
    let want_interaction: f64 =
        (0..batch.x0.len()).map(|i| obstacle.density(batch.x0.row(i))).sum::<f64>() / batch.x0.len() as f64;
    let got_interaction = tape.scalar_value(terms.interaction.unwrap());
    assert!((got_interaction - want_interaction).abs() <= 1e-12);

    let want_terminal = mfg_operator::kernels::mmd2_unbiased_value(&instance.kernel, &batch.x0, &batch.x1).unwrap();
    assert!((tape.scalar_value(terms.terminal) - want_terminal).abs() <= 1e-12);
}

#[test]
fn weight_scaling_is_linear_in_each_term() {
    let hyper = tiny_hyper(Mode::Dynamic);
    let weights = ModelWeights::init(&hyper, 4).unwrap();
    let cfg = FamilyConfig::new(Family::CrowdMotion, 2);
    let mut r = stream(22, &[]);
    let instance = sample_instance(&cfg, &mut r).unwrap();
    let batch = draw_instance_batch(instance, 16, &mut r).unwrap();
    let grid = TimeGrid::new(6).unwrap();

    let total_with = |lam_i: f64, lam_m: f64| -> (f64, f64, f64, f64) {
        let mut b = batch.clone();
        b.instance.weights = MfgWeights { transport: 1e-3, interaction: lam_i, terminal: lam_m };
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let terms = instance_objective(&mut tape, &hyper, &bound, &b, &grid, &mut DropoutCtx::eval()).unwrap();
        (
            tape.scalar_value(terms.total),
            tape.scalar_value(terms.transport),
            tape.scalar_value(terms.interaction.unwrap()),
            tape.scalar_value(terms.terminal),
        )
    };

    let (t1, tr, i1, m1) = total_with(1.0, 1.0);
    let (t2, tr2, i2, m2) = total_with(2.0, 1.0);
    // Doubling the interaction weight adds exactly the interaction term.
    assert!((t2 - t1 - i1).abs() <= 1e-12);
    assert_eq!(i1, i2);
    assert_eq!(tr, tr2);
    assert_eq!(m1, m2);

    let (t3, _, _, _) = total_with(1.0, 3.0);
    assert!((t3 - t1 - 2.0 * m1).abs() <= 1e-12);
}

#[test]
fn static_objective_special_cases() {
    // lambda_L = 0 reduces the objective to the pure terminal estimator.
    let hyper = tiny_hyper(Mode::Static);
    let weights = ModelWeights::init(&hyper, 9).unwrap();
    let instance = gaussian_instance(MfgWeights { transport: 0.0, interaction: 0.0, terminal: 1.0 });
    let batch = small_batch(&instance, 16, 33);
    let grid = TimeGrid::new(10).unwrap();

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &weights).unwrap();
    let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
    assert!((tape.scalar_value(terms.total) - tape.scalar_value(terms.terminal)).abs() <= 1e-15);

    // Zero weights make G the zero map; with X1 = X0 the objective is the
    // mean squared norm of X0 plus the estimator at (0, X0).
    let zero_weights = ModelWeights::zeros(&hyper).unwrap();
    let mut b2 = batch.clone();
    b2.x1 = b2.x0.clone();
    b2.instance.weights = MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 };
    let mut tape2 = Tape::new();
    let bound2 = bind(&mut tape2, &zero_weights).unwrap();
    let terms2 = instance_objective(&mut tape2, &hyper, &bound2, &b2, &grid, &mut DropoutCtx::eval()).unwrap();
    let mean_sq: f64 = (0..b2.x0.len())
        .map(|i| b2.x0.row(i).iter().map(|&x| x * x).sum::<f64>())
        .sum::<f64>()
        / b2.x0.len() as f64;
    assert!((tape2.scalar_value(terms2.transport) - mean_sq).abs() <= 1e-12);
}

#[test]
fn analytic_map_attains_the_closed_form_value() {
    // Plugging the optimal translation into the objective machinery on
    // large samples reproduces lambda/(1+lambda) ||m||^2 (Monte Carlo).
    let m = vec![1.0, 0.8];
    let m_sq: f64 = m.iter().map(|&x| x * x).sum();
    let want = 0.5 * m_sq; // lambda = 1
    let instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 });

    let mut vals = Vec::new();
    for trial in 0..20 {
        let mut r = stream(100 + trial, &[]);
        let x0 = sample_points(&instance.p0, 2048, &mut r).unwrap();
        let x1 = sample_points(&instance.p1, 2048, &mut r).unwrap();
        // T*(x) = x + m/2 applied to X0 rows.
        let pushed_rows: Vec<Vec<f64>> = (0..x0.len())
            .map(|i| x0.row(i).iter().zip(&m).map(|(&x, &mi)| x + 0.5 * mi).collect())
            .collect();
        let pushed = SampleBatch::from_rows(&pushed_rows).unwrap();
        let transport: f64 = 0.25 * m_sq; // ||m/2||^2 exactly per row
        let terminal = mfg_operator::kernels::mmd2_unbiased_value(&instance.kernel, &pushed, &x1).unwrap();
        vals.push(transport + terminal);
    }
    let (mean, se) = mean_se(&vals);
    assert!((mean - want).abs() <= 3.0 * se, "objective {mean} vs {want} (se {se})");
}

#[test]
fn amortized_batch_matches_per_instance_means_and_gradients() {
    let hyper = tiny_hyper(Mode::Static);
    let weights = ModelWeights::init(&hyper, 10).unwrap();
    let instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 });
    let b1 = small_batch(&instance, 8, 41);
    let b2 = small_batch(&instance, 8, 42);
    let grid = TimeGrid::new(10).unwrap();

    // Values: a one-instance amortized batch equals the instance objective.
    let single = |b: &InstanceBatch| -> f64 {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let t = instance_objective(&mut tape, &hyper, &bound, b, &grid, &mut DropoutCtx::eval()).unwrap();
        tape.scalar_value(t.total)
    };
    let o1 = single(&b1);
    let o2 = single(&b2);

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &weights).unwrap();
    let only = amortized_objective(&mut tape, &hyper, &bound, std::slice::from_ref(&b1), &grid, None).unwrap();
    assert!((tape.scalar_value(only.total) - o1).abs() <= 1e-15);

    let both = amortized_objective(&mut tape, &hyper, &bound, &[b1.clone(), b2.clone()], &grid, None).unwrap();
    assert!((tape.scalar_value(both.total) - 0.5 * (o1 + o2)).abs() <= 1e-12);

    // Gradients: the batch-mean gradient equals the mean of per-instance
    // gradients.
    let grads_of = |batches: &[InstanceBatch]| -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let terms = amortized_objective(&mut tape, &hyper, &bound, batches, &grid, None).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        let mut flat = Vec::new();
        for id in bound.ordered_ids() {
            match grads.get(id) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat(0.0).take(tape.values(id).len())),
            }
        }
        flat
    };
    let g_batch = grads_of(&[b1.clone(), b2.clone()]);
    let g1 = grads_of(std::slice::from_ref(&b1));
    let g2 = grads_of(std::slice::from_ref(&b2));
    let worst = g_batch
        .iter()
        .zip(g1.iter().zip(&g2))
        .map(|(&gb, (&a, &b))| (gb - 0.5 * (a + b)).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-10, "batch gradient deviates by {worst:.3e}");

    // Empty batch is a usage error.
    let mut tape_err = Tape::new();
    let bound_err = bind(&mut tape_err, &weights).unwrap();
    assert!(amortized_objective(&mut tape_err, &hyper, &bound_err, &[], &grid, None).is_err());
}

#[test]
fn objective_is_invariant_under_sample_relabeling() {
    let hyper = tiny_hyper(Mode::Static);
    let weights = ModelWeights::init(&hyper, 11).unwrap();
    let instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 });
    let batch = small_batch(&instance, 24, 55);
    let grid = TimeGrid::new(10).unwrap();

    let value = |b: &InstanceBatch| -> f64 {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let t = instance_objective(&mut tape, &hyper, &bound, b, &grid, &mut DropoutCtx::eval()).unwrap();
        tape.scalar_value(t.total)
    };
    let base = value(&batch);

    // Permuting X1 relabels target samples only.
    let mut permuted = batch.clone();
    let perm: Vec<usize> = (0..batch.x1.len()).rev().collect();
    permuted.x1 = batch.x1.permuted(&perm);
    assert!((value(&permuted) - base).abs() <= 1e-10);
}

#[test]
fn tape_and_value_routes_agree() {
    for mode in [Mode::Static, Mode::Dynamic] {
        let hyper = tiny_hyper(mode);
        let weights = ModelWeights::init(&hyper, 12).unwrap();
        let model = Model { hyper, weights: weights.clone() };
        let family = match mode {
            Mode::Static => FamilyConfig::new(Family::GaussianTranslate, 2),
            Mode::Dynamic => FamilyConfig::new(Family::CrowdMotion, 2),
        };
        let mut r = stream(60, &[]);
        let instance = sample_instance(&family, &mut r).unwrap();
        let batch = draw_instance_batch(instance.clone(), 16, &mut r).unwrap();
        let grid = TimeGrid::new(10).unwrap();

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
        let taped = tape.scalar_value(terms.total);

        let valued = objective_value(&model, &instance, &batch.x0, &batch.x1, &grid).unwrap();
        assert!((taped - valued.total).abs() <= 1e-12, "{mode:?}: {taped} vs {}", valued.total);
    }
}

#[test]
fn objective_never_falls_below_estimator_floor() {
    // The only negative contribution is the terminal U-statistic; its
    // downside is bounded by the estimator's sampling spread, measured by
    // a Monte Carlo run at matched batch size.
    let n = 16;
    let instance = gaussian_instance(MfgWeights { transport: 1.0, interaction: 0.0, terminal: 1.0 });

    // Spread of the estimator between equal distributions at size n.
    let mut nulls = Vec::new();
    for trial in 0..300 {
        let mut r = stream(900 + trial, &[]);
        let a = sample_points(&instance.p0, n, &mut r).unwrap();
        let b = sample_points(&instance.p0, n, &mut r).unwrap();
        nulls.push(mfg_operator::kernels::mmd2_unbiased_value(&Kernel::Linear, &a, &b).unwrap());
    }
    let spread = nulls.iter().map(|&x| x * x).sum::<f64>() / nulls.len() as f64;
    let floor = -6.0 * spread.sqrt();

    let hyper = tiny_hyper(Mode::Static);
    let grid = TimeGrid::new(10).unwrap();
    for seed in 0..40 {
        let weights = ModelWeights::init(&hyper, 500 + seed).unwrap();
        let batch = small_batch(&instance, n, 700 + seed);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &weights).unwrap();
        let terms = instance_objective(&mut tape, &hyper, &bound, &batch, &grid, &mut DropoutCtx::eval()).unwrap();
        let total = tape.scalar_value(terms.total);
        assert!(total >= floor, "objective {total} below floor {floor}");
    }
}
