use proptest::prelude::*;

use super::*;
use crate::autodiff::ParamSet;
use crate::fit::Regressor;
use crate::metrics::ks_two_sample;
use crate::nn::{Activation, Mlp};
use crate::pretrained::GaussianMixture;
use crate::fit::FitConfig;
use crate::linalg::Matrix;
use crate::sde::{running_cost, simulate_batch_from, GaussianInit, SdeSpec, SumField, Trajectory};
use crate::value::Estimator;

fn canonical() -> PretrainedModel {
    PretrainedModel::new(GaussianMixture::symmetric_pair(2.0, 0.25).unwrap(), 5.0).unwrap()
}

fn stationary() -> PretrainedModel {
    PretrainedModel::new(GaussianMixture::standard_normal(1), 5.0).unwrap()
}

fn trained(lr: f64, epochs: usize) -> StageConfig {
    StageConfig {
        lr,
        epochs,
        steps_per_epoch: 4,
        ..StageConfig::default()
    }
}

fn unit_grid() -> TimeGrid {
    TimeGrid::new(0.0, 1.0, 100).unwrap()
}

/// `â(x) = b x` represented exactly by a one-layer regressor.
fn linear_value(b: f64) -> ValueModel {
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, "value", &[1, 1], Activation::Tanh, 0, true).unwrap();
    params.set_flat_values(&[b, 0.0]);
    ValueModel {
        estimator: Estimator::Soft,
        net: Regressor {
            mlp,
            params,
            x_shift: vec![0.0],
            x_scale: vec![1.0],
            y_shift: 0.0,
            y_scale: 1.0,
            log: Vec::new(),
            train_mse: 0.0,
            heldout_mse: None,
        },
    }
}

fn zeros_objective(g: &mut Graph, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    g.constant(&[rows, 1], vec![0.0; rows])
}

fn visited_error(u: &DriftNet, paths: &[Trajectory], want: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..paths[0].grid.n_steps {
        let t = paths[0].grid.time(k);
        let mut xs = Matrix::zeros(paths.len(), 1);
        for (r, p) in paths.iter().enumerate() {
            xs.row_mut(r).copy_from_slice(p.state(k));
        }
        worst = u.eval(t, &xs).data.iter().map(|v| (v - want).abs()).fold(worst, f64::max);
    }
    worst
}

#[test]
fn zero_epochs_leave_the_drift_unchanged() {
    let drift = DriftNet::new(1, 1.0, &[8], 4).unwrap();
    let cfg = StageConfig {
        epochs: 0,
        ..StageConfig::default()
    };
    let r = Reward::linear(vec![1.0]);
    let obj = |g: &mut Graph, x: Var| r.record(g, x);
    let (out, log) =
        neural_sde_solve(&obj, drift.clone(), &ZeroField { dim: 1 }, &ConstantSigma(1.0), Init::Point(&[0.0]), &unit_grid(), &cfg)
            .unwrap();
    assert_eq!(out, drift);
    assert!(log.loss.is_empty() && log.advisory.is_none());
}

#[test]
fn penalty_only_objective_drives_the_drift_to_zero() {
    let mut drift = DriftNet::new(1, 1.0, &[64, 64], 4).unwrap();
    let last = drift.params.params_mut().last_mut().unwrap();
    for (i, v) in last.values.iter_mut().enumerate() {
        *v = 0.3 * (i as f64 + 1.0).sin();
    }
    let grid = unit_grid();
    let paths0 = simulate_batch_from(
        &SdeSpec::new(&drift, &ConstantSigma(1.0)),
        Init::Point(&[0.0]),
        &grid,
        9,
        0,
        256,
    )
    .unwrap();
    let before = (0..grid.n_steps).map(|k| drift.mean_norm(grid.time(k), &states_at(&paths0, k))).sum::<f64>();
    assert!(before / grid.n_steps as f64 > 0.1);
    let (u, log) = neural_sde_solve(
        &zeros_objective,
        drift,
        &ZeroField { dim: 1 },
        &ConstantSigma(1.0),
        Init::Point(&[0.0]),
        &grid,
        &trained(1e-2, 50),
    )
    .unwrap();
    let paths = simulate_batch_from(&SdeSpec::new(&u, &ConstantSigma(1.0)), Init::Point(&[0.0]), &grid, 9, 0, 256).unwrap();
    let after = (0..grid.n_steps).map(|k| u.mean_norm(grid.time(k), &states_at(&paths, k))).sum::<f64>() / grid.n_steps as f64;
    assert!(after <= 0.01, "mean ‖u‖ = {after}");
    assert!(log.loss.last().unwrap() < &log.loss[0]);
}

fn states_at(paths: &[Trajectory], k: usize) -> Matrix {
    let d = paths[0].dim;
    let mut xs = Matrix::zeros(paths.len(), d);
    for (r, p) in paths.iter().enumerate() {
        xs.row_mut(r).copy_from_slice(p.state(k));
    }
    xs
}

#[test]
fn brownian_linear_problem_recovers_the_constant_drift() {
    let grid = unit_grid();
    let r = Reward::linear(vec![1.0]);
    let obj = |g: &mut Graph, x: Var| r.record(g, x);
    let drift = DriftNet::new(1, 1.0, &[64, 64], 3).unwrap();
    let (u, log) = neural_sde_solve(
        &obj,
        drift,
        &ZeroField { dim: 1 },
        &ConstantSigma(1.0),
        Init::Point(&[0.0]),
        &grid,
        &trained(1e-2, 50),
    )
    .unwrap();
    let field = SumField(&ZeroField { dim: 1 }, &u);
    let paths = simulate_batch_from(&SdeSpec::new(&field, &ConstantSigma(1.0)), Init::Point(&[0.0]), &grid, 99, 0, 200).unwrap();
    let err = visited_error(&u, &paths, 1.0);
    assert!(err <= 0.1, "max |u − b| = {err}");
    assert!(log.advisory.is_none());
}

#[test]
fn recorded_loss_decomposes_into_reward_and_running_cost() {
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let r = Reward::linear(vec![1.0]);
    let obj = |g: &mut Graph, x: Var| r.record(g, x);
    let drift = DriftNet::new(1, 1.0, &[16], 3).unwrap();
    let cfg = StageConfig {
        epochs: 5,
        lr: 1e-2,
        batch: 16,
        n_steps: 20,
        ..StageConfig::default()
    };
    let base = ZeroField { dim: 1 };
    let sigma = ConstantSigma(0.7);
    let (u, _) = neural_sde_solve(&obj, drift, &base, &sigma, Init::Point(&[0.2]), &grid, &cfg).unwrap();
    let alpha = 0.5;
    let opts = RecordOptions {
        record_from: None,
        alpha,
    };
    let rec = simulate_recorded(&base, &u, &sigma, Init::Point(&[0.2]), &grid, 4, 0, 16, opts).unwrap();
    let costs = rec.graph.value(rec.cost).to_vec();
    let mut g = rec.graph;
    let rewards = r.record(&mut g, rec.x_final).unwrap();
    for (i, traj) in rec.trajectories.iter().enumerate() {
        let y = running_cost(traj, &u, &sigma, alpha).unwrap();
        assert!((costs[i] - y).abs() <= 1e-12 * y.abs().max(1.0), "{} vs {y}", costs[i]);
        assert_eq!(g.value(rewards)[i], traj.terminal()[0]);
    }
}

#[test]
fn non_finite_objective_reports_epoch_and_batch() {
    let obj = |g: &mut Graph, x: Var| {
        let rows = g.shape(x)[0];
        g.constant(&[rows, 1], vec![f64::NAN; rows])
    };
    let drift = DriftNet::new(1, 1.0, &[4], 0).unwrap();
    let err = neural_sde_solve(&obj, drift, &ZeroField { dim: 1 }, &ConstantSigma(1.0), Init::Point(&[0.0]), &unit_grid(), &StageConfig::default())
        .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn stage_config_is_validated() {
    let bad = [
        StageConfig { alpha: 0.0, ..StageConfig::default() },
        StageConfig { batch: 0, ..StageConfig::default() },
        StageConfig { lr: -1.0, ..StageConfig::default() },
        StageConfig { final_lr_fraction: 1.5, ..StageConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err());
    }
    let cfg = ElegantConfig::default();
    let mut mismatched = cfg.clone();
    mismatched.stage2.alpha = 2.0;
    assert!(mismatched.validate().is_err());
    assert!(cfg.clone().with_alpha(0.25).validate().is_ok());
    assert_ne!(cfg.hash(), cfg.clone().with_alpha(0.25).hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn constant_value_leaves_stage_one_at_the_reference() {
    let stage = Stage1Spec::reference(1, 5.0, 100).unwrap();
    let value = linear_value(0.0);
    let (q, _) = solve_stage1(&value, &stage, &trained(1e-2, 3)).unwrap();
    let fresh = DriftNet::new(1, 5.0, &[64, 64], derive_seed(0, 1)).unwrap();
    assert_eq!(q.params.flat_values(), fresh.params.flat_values());
    let x0 = Stage1Law { q, spec: stage }.sample(3, 0, 20_000).unwrap();
    let (m, v) = (linalg::mean(&x0.data), linalg::variance(&x0.data));
    assert!(m.abs() < 3.0 * (1.0f64 / 20_000.0).sqrt(), "mean {m}");
    assert!((v - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn linear_value_tilts_the_initial_law_to_a_shifted_gaussian() {
    let b = 1.0;
    let stage = Stage1Spec::reference(1, 1.0, 100).unwrap();
    assert_eq!(stage.sigma_tilde, 1.0);
    let (q, _) = solve_stage1(&linear_value(b), &stage, &trained(1e-2, 50)).unwrap();
    let law = Stage1Law { q, spec: stage };
    let n = 10_000;
    let x0 = law.sample(11, 0, n).unwrap();
    let (m, v) = (linalg::mean(&x0.data), linalg::variance(&x0.data));
    let se = (v / n as f64).sqrt();
    assert!((m - b).abs() < 3.0 * se, "mean {m} ± {se}");
    assert!((v - 1.0).abs() <= 0.05, "variance {v}");
    let again = law.sample(11, 0, n).unwrap();
    assert_eq!(x0, again);
}

#[test]
fn stage_one_training_is_reproducible() {
    let stage = Stage1Spec::reference(1, 1.0, 20).unwrap();
    let cfg = StageConfig {
        epochs: 3,
        lr: 1e-2,
        batch: 32,
        n_steps: 20,
        hidden: vec![16],
        ..StageConfig::default()
    };
    let a = solve_stage1(&linear_value(1.0), &stage, &cfg).unwrap();
    let b = solve_stage1(&linear_value(1.0), &stage, &cfg).unwrap();
    assert_eq!(a, b);
    let c = solve_stage1(&linear_value(1.0), &stage, &StageConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn constant_reward_keeps_stage_two_at_zero() {
    let model = canonical();
    let cfg = StageConfig {
        epochs: 3,
        lr: 1e-2,
        batch: 32,
        hidden: vec![16],
        ..StageConfig::default()
    };
    let init = GaussianInit::standard(1);
    let (u, log) = solve_stage2(&model, &Reward::constant(2.0, 1), &init, &cfg).unwrap();
    let fresh = DriftNet::new(1, 5.0, &[16], derive_seed(cfg.seed, 2)).unwrap();
    assert_eq!(u.params.flat_values(), fresh.params.flat_values());
    assert!(log.reward.iter().all(|r| *r == 2.0));
    let (v, _) = train_no_kl(&model, &Reward::constant(2.0, 1), &cfg, Interval::Full).unwrap();
    assert_eq!(v.eval(1.0, &Matrix::from_vec(2, 1, vec![-1.0, 1.0])).data, vec![0.0, 0.0]);
}

#[test]
fn huge_alpha_is_penalty_dominated() {
    let model = canonical();
    let cfg = StageConfig {
        alpha: 1e6,
        ..StageConfig::default()
    };
    let init = GaussianInit::standard(1);
    let (u, _) = solve_stage2(&model, &Reward::linear(vec![1.0]), &init, &cfg).unwrap();
    let paths = Sampler::with_control(&model, Control::Net(u.clone())).sample(256, 1).unwrap();
    let grid = paths.stage2_paths[0].grid;
    let mean = (0..grid.n_steps).map(|k| u.mean_norm(grid.time(k), &states_at(&paths.stage2_paths, k))).sum::<f64>()
        / grid.n_steps as f64;
    assert!(mean <= 0.01, "mean ‖u‖ = {mean}");
}

#[test]
fn untrained_samplers_reproduce_the_pretrained_sampler() {
    let model = canonical();
    let base = Sampler::pretrained(&model).sample_terminal(200, 5).unwrap();
    let zero_net = Control::Net(DriftNet::new(1, 5.0, &[16, 16], 9).unwrap());
    assert_eq!(Sampler::with_control(&model, zero_net).sample_terminal(200, 5).unwrap(), base);
    assert_eq!(naive_drift_sampler(&model, &Reward::constant(1.0, 1), 1.0, 200, 5).unwrap(), base);
    let full = Sampler::pretrained(&model).sample(200, 5).unwrap();
    assert_eq!(full.terminal, base);
    assert!(full.kl_stage2.iter().all(|k| *k == 0.0));
    assert!(full.kl_stage1.is_none());
}

#[test]
fn guidance_with_zero_level_is_the_pretrained_sampler() {
    let model = stationary();
    let mu = fit_time_reward_model(&model, &Reward::linear(vec![1.0]), &[0.0, 2.5, 5.0], 64, &quick_fit(), 0).unwrap();
    let base = Sampler::pretrained(&model).sample_terminal(100, 2).unwrap();
    assert_eq!(guidance_sampler(&model, &mu, 0.0, 1.0, 1.0, 100, 2).unwrap(), base);
    assert!(guidance_sampler(&model, &mu, -1.0, 1.0, 1.0, 100, 2).is_err());
    assert!(GuidanceField::new(mu, 1.0, 0.0, 0.0).is_err());
}

fn quick_fit() -> FitConfig {
    FitConfig {
        hidden: vec![16],
        epochs: 20,
        ..FitConfig::default()
    }
}

/// The stationary conditional mean `E[x_T | x_t = x] = e^{−(T−t)/2} x`.
struct ExactMean {
    horizon: f64,
}

impl TimeReward for ExactMean {
    fn dim(&self) -> usize {
        1
    }

    fn mean_and_gradient(&self, t: f64, xs: &Matrix) -> (Vec<f64>, Matrix) {
        let k = (-(self.horizon - t) / 2.0).exp();
        (xs.data.iter().map(|x| k * x).collect(), Matrix::from_vec(xs.rows, 1, vec![k; xs.rows]))
    }
}

#[test]
fn guidance_drift_is_the_scaled_conditional_mean_gradient() {
    let alpha = 0.5;
    let horizon = 5.0;
    let field = GuidanceField::new(ExactMean { horizon }, 1.0 / alpha, 1.3, 1.0).unwrap();
    let xs = Matrix::from_vec(13, 1, (0..13).map(|i| -3.0 + 0.5 * i as f64).collect());
    for j in 0..=10 {
        let t = 0.5 * j as f64;
        let drift = field.eval(t, &xs);
        let k = (-(horizon - t) / 2.0).exp();
        for (r, x) in xs.data.iter().enumerate() {
            let approx = k / alpha;
            let factor = 1.3 - k * x;
            assert!((drift.data[r] - factor * approx).abs() <= 1e-12 * approx.abs().max(1.0));
        }
    }
}

#[test]
fn time_reward_model_matches_known_regressions() {
    let model = stationary();
    let cfg = FitConfig {
        hidden: vec![32, 32],
        epochs: 60,
        ..FitConfig::default()
    };
    let c = fit_time_reward_model(&model, &Reward::constant(0.7, 1), &[0.0, 2.5, 5.0], 256, &cfg, 1).unwrap();
    for &(t, x) in &[(0.0, -2.0), (2.5, 0.0), (5.0, 1.5)] {
        assert!((c.mean(t, &[x]) - 0.7).abs() < 0.01);
    }

    let r = Reward::quadratic(vec![-0.5], vec![0.3], 0.1).unwrap();
    let at_end = fit_time_reward_model(&model, &r, &[5.0], 2000, &cfg, 2).unwrap();
    let grid = model.grid(crate::pretrained::DEFAULT_STEPS).unwrap();
    let paths = simulate_batch_from(&SdeSpec::new(&model, &model.sigma()), Init::Sampler(&GaussianInit::standard(1)), &grid, 3, 0, 200).unwrap();
    let worst = paths
        .iter()
        .map(|p| (at_end.mean(5.0, p.terminal()) - r.value(p.terminal())).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.05, "max error at t = T: {worst}");

    let times: Vec<f64> = (0..=10).map(|j| 0.5 * j as f64).collect();
    let lin = fit_time_reward_model(&model, &Reward::linear(vec![1.0]), &times, 4000, &cfg, 4).unwrap();
    for &t in &[1.0, 2.5, 4.0] {
        let k = (-(5.0 - t) / 2.0f64).exp();
        for x in [-1.5, -0.5, 0.5, 1.5] {
            let got = lin.mean(t, &[x]);
            assert!((got - k * x).abs() < 0.1, "t={t} x={x}: {got} vs {}", k * x);
        }
    }
    assert!(fit_time_reward_model(&model, &r, &[6.0], 10, &cfg, 0).is_err());
    assert!(fit_time_reward_model(&model, &r, &[1.0], 0, &cfg, 0).is_err());
}

#[test]
fn truncation_point_must_lie_inside_the_horizon() {
    let model = canonical();
    let r = Reward::linear(vec![1.0]);
    let cfg = StageConfig::default();
    assert!(train_no_kl(&model, &r, &cfg, Interval::Truncation { k: 5.0 }).is_err());
    assert!(train_no_kl(&model, &r, &cfg, Interval::Truncation { k: -0.1 }).is_err());
    assert_eq!(Interval::truncation(5.0), Interval::Truncation { k: 4.0 });
}

#[test]
fn naive_drift_grows_as_alpha_shrinks() {
    let model = canonical();
    let r = Reward::linear(vec![1.0]);
    let xs = Matrix::from_vec(2, 1, vec![0.0, 1.0]);
    let f = NaiveField::new(&r, 0.25).unwrap();
    assert_eq!(f.eval(0.0, &xs).data, vec![4.0, 4.0]);
    assert!(NaiveField::new(&r, 0.0).is_err());
    let far = naive_drift_sampler(&model, &r, 1e12, 500, 1).unwrap();
    let base = Sampler::pretrained(&model).sample_terminal(500, 1).unwrap();
    let gap = far.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-9, "{gap}");
}

fn tiny_config() -> ElegantConfig {
    let mut cfg = ElegantConfig::default();
    cfg.value.soft = SoftValueConfig {
        probes: 64,
        rollouts: 8,
        fit: FitConfig {
            hidden: vec![8],
            epochs: 5,
            ..FitConfig::default()
        },
        ..SoftValueConfig::default()
    };
    cfg.value.n_steps = 20;
    for s in [&mut cfg.stage1, &mut cfg.stage2] {
        s.epochs = 2;
        s.batch = 16;
        s.n_steps = 20;
        s.hidden = vec![8];
        s.lr = 1e-2;
    }
    cfg
}

#[test]
fn finetuned_model_round_trips_through_checkpoints() {
    let model = canonical();
    let ft = elegant_finetune(&model, &Reward::linear(vec![1.0]), &tiny_config()).unwrap();
    assert_eq!(ft.config_hash, tiny_config().hash());
    assert_eq!(ft.logs.stage1.loss.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let written = ft.save(dir.path()).unwrap();
    assert_eq!(written.len(), 4);
    assert!(written.iter().all(|p| p.exists()));
    let back = FineTunedModel::load(dir.path()).unwrap();
    assert_eq!(back, ft);
    let a = sample_finetuned(&ft, 50, 3).unwrap();
    let b = sample_finetuned(&back, 50, 3).unwrap();
    assert_eq!(a.terminal, b.terminal);
    for (p1, p2) in a.stage1_paths.iter().zip(&a.stage2_paths) {
        assert_eq!(p1.terminal(), p2.initial());
    }
    assert_eq!(ft.sampler().sample_terminal(50, 3).unwrap(), a.terminal);
    std::fs::remove_file(dir.path().join(FineTunedModel::Q_FILE)).unwrap();
    let err = FineTunedModel::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains(FineTunedModel::Q_FILE), "{err}");
}

#[test]
fn stage_errors_carry_their_stage() {
    let model = canonical();
    let mut cfg = tiny_config();
    cfg.value.soft.rollouts = 1;
    let err = elegant_finetune(&model, &Reward::linear(vec![1.0]), &cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "value", .. }), "{err}");
}

#[test]
fn constant_reward_finetune_is_indistinguishable_from_pretrained() {
    let model = canonical();
    let mut cfg = tiny_config();
    cfg.value.soft.fit.epochs = 50;
    for s in [&mut cfg.stage1, &mut cfg.stage2] {
        s.epochs = 10;
        s.n_steps = 100;
        s.batch = 64;
    }
    let ft = elegant_finetune(&model, &Reward::constant(1.0, 1), &cfg).unwrap();
    let n = 10_000;
    let a = ft.sampler().sample_terminal(n, 21).unwrap();
    let b = Sampler::pretrained(&model).sample_terminal(n, 22).unwrap();
    let (stat, p) = ks_two_sample(&a.data, &b.data).unwrap();
    assert!(p > 0.01, "KS {stat}, p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fresh_drift_nets_output_zero(seed in any::<u64>(), d in 1usize..4, t in -5.0f64..5.0, x in -10.0f64..10.0) {
        let net = DriftNet::new(d, 5.0, &[8, 8], seed).unwrap();
        let xs = Matrix::from_vec(2, d, vec![x; 2 * d]);
        prop_assert!(net.eval(t, &xs).data.iter().all(|v| *v == 0.0));
    }
}
