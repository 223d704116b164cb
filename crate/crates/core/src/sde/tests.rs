use proptest::prelude::*;

use super::*;
use crate::autodiff::ParamSet;

fn ou() -> LinearField {
    LinearField { coef: -0.5, dim: 1 }
}

#[test]
fn grid_validation() {
    assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
    assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    let g = TimeGrid::new(-5.0, 0.0, 100).unwrap();
    assert_eq!(g.time(0), -5.0);
    assert!((g.time(100) - 0.0).abs() < 1e-12);
}

#[test]
fn zero_drift_zero_noise_is_constant() {
    let f = ZeroField { dim: 2 };
    let s = ConstantSigma(0.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 17).unwrap();
    let tr = simulate(&spec, Init::Point(&[1.5, -2.0]), &grid, 1, 0).unwrap();
    for k in 0..=17 {
        assert_eq!(tr.state(k), &[1.5, -2.0]);
    }
}

#[test]
fn constant_drift_is_exact() {
    let f = ConstantField { value: vec![0.7] };
    let s = ConstantSigma(0.0);
    let spec = SdeSpec::new(&f, &s);
    for n in [1, 3, 64, 1000] {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let tr = simulate(&spec, Init::Point(&[2.0]), &grid, 9, 0).unwrap();
        assert!((tr.terminal()[0] - 2.7).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn ou_moments_match_closed_form() {
    let f = ou();
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 2.0, 500).unwrap();
    let n = 100_000;
    let xt = simulate_terminal(&spec, Init::Point(&[4.0]), &grid, 42, 0, n).unwrap();
    let mean = linalg::mean(&xt.data);
    let var = linalg::variance(&xt.data);
    let mean_exact = 4.0 * (-1.0f64).exp();
    let var_exact = 1.0 - (-2.0f64).exp();
    let se_mean = (var_exact / n as f64).sqrt();
    // variance of the sample variance for a Gaussian: 2σ⁴/(n−1)
    let se_var = (2.0 * var_exact * var_exact / (n as f64 - 1.0)).sqrt();
    assert!((mean - mean_exact).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - var_exact).abs() < 3.0 * se_var, "var {var}");
}

#[test]
fn batch_of_one_equals_simulate() {
    let f = ou();
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let init = GaussianInit::standard(1);
    let b = simulate_batch(&spec, Init::Sampler(&init), &grid, 5, 1).unwrap();
    let one = simulate(&spec, Init::Sampler(&init), &grid, 5, 0).unwrap();
    assert_eq!(b[0], one);
}

#[test]
fn batch_is_independent_of_partitioning() {
    let f = ou();
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let init = GaussianInit::standard(1);
    let whole = simulate_batch(&spec, Init::Sampler(&init), &grid, 77, 10).unwrap();
    for (i, tr) in whole.iter().enumerate().rev() {
        let single = simulate(&spec, Init::Sampler(&init), &grid, 77, i as u64).unwrap();
        assert_eq!(&single, tr);
    }
    let tail = simulate_batch_from(&spec, Init::Sampler(&init), &grid, 77, 4, 6).unwrap();
    assert_eq!(&whole[4..], tail.as_slice());
    let terminal = simulate_terminal(&spec, Init::Sampler(&init), &grid, 77, 0, 10).unwrap();
    for (i, tr) in whole.iter().enumerate() {
        assert_eq!(terminal.row(i), tr.terminal());
    }
}

#[test]
fn different_seeds_differ_by_monte_carlo_noise() {
    let f = ou();
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let n = 4000;
    let a = simulate_terminal(&spec, Init::Point(&[1.0]), &grid, 1, 0, n).unwrap();
    let b = simulate_terminal(&spec, Init::Point(&[1.0]), &grid, 2, 0, n).unwrap();
    let (ma, mb) = (linalg::mean(&a.data), linalg::mean(&b.data));
    assert_ne!(ma, mb);
    let se = ((linalg::variance(&a.data) + linalg::variance(&b.data)) / n as f64).sqrt();
    assert!((ma - mb).abs() < 4.0 * se, "{ma} vs {mb}");
}

#[test]
fn non_finite_state_reports_step() {
    let f = FnField {
        dim: 1,
        f: |_t: f64, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] * 1e200,
    };
    let s = ConstantSigma(0.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    match simulate(&spec, Init::Point(&[10.0]), &grid, 0, 0) {
        Err(Error::NonFiniteState { step, .. }) => assert!(step >= 1),
        other => panic!("expected blow-up, got {other:?}"),
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let f = ZeroField { dim: 2 };
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    assert!(simulate(&spec, Init::Point(&[1.0]), &grid, 0, 0).is_err());
}

#[test]
fn running_cost_examples() {
    let f = ZeroField { dim: 2 };
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let tr = simulate(&spec, Init::Point(&[0.0, 0.0]), &grid, 3, 0).unwrap();
    assert_eq!(running_cost(&tr, &f, &s, 1.0).unwrap(), 0.0);
    let c = ConstantField {
        value: vec![0.6, -0.8],
    };
    let cost = running_cost(&tr, &c, &s, 2.0).unwrap();
    assert!((cost - 1.0).abs() < 1e-12, "{cost}");
    assert!(running_cost(&tr, &c, &ConstantSigma(0.0), 1.0).is_err());
    assert!(running_cost(&tr, &c, &s, 0.0).is_err());
}

#[test]
fn refinement_bias_decays_linearly_with_common_random_numbers() {
    let f = ou();
    let s = ConstantSigma(1.0);
    let spec = SdeSpec::new(&f, &s);
    let fine_n = 400;
    let fine = TimeGrid::new(0.0, 2.0, fine_n).unwrap();
    let paths = simulate_batch(&spec, Init::Point(&[4.0]), &fine, 11, 10_000).unwrap();
    // pathwise exact solution x_T = 4e^{-1} + ∫ e^{-(T-s)/2} dW_s on the fine increments
    let dtf = fine.dt();
    let exact: Vec<f64> = paths
        .iter()
        .map(|p| {
            4.0 * (-1.0f64).exp()
                + (0..fine_n)
                    .map(|k| (-0.5 * (2.0 - (k as f64 + 0.5) * dtf)).exp() * p.noise[k])
                    .sum::<f64>()
        })
        .collect();
    let bias = |n: usize| {
        let grid = TimeGrid::new(0.0, 2.0, n).unwrap();
        let stride = fine_n / n;
        let mut sum = 0.0;
        for (p, e) in paths.iter().zip(&exact) {
            let noise: Vec<f64> = (0..n)
                .map(|k| (0..stride).map(|j| p.noise[k * stride + j]).sum())
                .collect();
            let coarse = Trajectory {
                grid,
                dim: 1,
                states: vec![4.0; n + 1],
                noise,
                seed: p.seed,
                stream: p.stream,
            };
            sum += coarse.replay(&spec).unwrap().last().unwrap() - e;
        }
        sum / paths.len() as f64
    };
    let b: Vec<f64> = [25, 50, 100].iter().map(|&n| bias(n)).collect();
    for w in b.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.4).contains(&ratio), "bias {b:?}");
    }
}

/// `u(t, x) = θ ⊙ x` with a single trainable row θ of shape `[1, d]`.
struct ScaledState {
    params: ParamSet,
}

impl ScaledState {
    fn new(theta: &[f64]) -> Self {
        let mut params = ParamSet::new();
        params.add("theta", &[1, theta.len()], theta.to_vec());
        Self { params }
    }
}

impl VectorField for ScaledState {
    fn dim(&self) -> usize {
        self.params.params()[0].values.len()
    }
    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        let th = &self.params.params()[0].values;
        let d = th.len();
        let ones = vec![1.0; xs.rows];
        let b = linalg::matmul(&ones, th, xs.rows, 1, d);
        Matrix::from_vec(xs.rows, d, b.iter().zip(&xs.data).map(|(t, x)| t * x).collect())
    }
}

impl RecordableControl for ScaledState {
    fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        vec![g.param(&self.params, 0)]
    }
    fn record(&self, g: &mut Graph, leaves: &[Var], _t: f64, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let ones = g.constant(&[rows, 1], vec![1.0; rows])?;
        let b = g.matmul(ones, leaves[0])?;
        g.mul(b, x)
    }
}

/// A nonlinear base drift with an exact Jacobian: f(x) = −x + sin(x).
struct SinDrift;

impl VectorField for SinDrift {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        Matrix::from_vec(xs.rows, 1, xs.data.iter().map(|x| -x + x.sin()).collect())
    }
    fn jacobian(&self, _t: f64, xs: &Matrix) -> Vec<f64> {
        xs.data.iter().map(|x| -1.0 + x.cos()).collect()
    }
}

fn recorded(
    base: &dyn VectorField,
    control: &ScaledState,
    alpha: f64,
    record_from: Option<f64>,
) -> RecordedBatch {
    let grid = TimeGrid::new(0.0, 1.0, 30).unwrap();
    let init = GaussianInit::standard(base.dim());
    simulate_recorded(
        base,
        control,
        &ConstantSigma(0.8),
        Init::Sampler(&init),
        &grid,
        21,
        0,
        8,
        RecordOptions { record_from, alpha },
    )
    .unwrap()
}

#[test]
fn recorded_states_match_plain_simulation_bit_exactly() {
    let base = SinDrift;
    let control = ScaledState::new(&[0.3]);
    let batch = recorded(&base, &control, 1.5, None);
    let total = SumField(&base, &control);
    let sigma = ConstantSigma(0.8);
    let spec = SdeSpec::new(&total, &sigma);
    let grid = TimeGrid::new(0.0, 1.0, 30).unwrap();
    let init = GaussianInit::standard(1);
    let plain = simulate_batch(&spec, Init::Sampler(&init), &grid, 21, 8).unwrap();
    assert_eq!(plain, batch.trajectories);
    let costs = batch.graph.value(batch.cost);
    for (tr, &y) in plain.iter().zip(costs) {
        assert_eq!(running_cost(tr, &control, &sigma, 1.5).unwrap(), y);
        assert_eq!(tr.replay(&spec).unwrap(), tr.states);
    }
    let truncated = recorded(&base, &control, 1.5, Some(0.5));
    assert_eq!(truncated.trajectories, plain);
    assert_eq!(truncated.graph.value(truncated.cost), costs);
}

#[test]
fn zero_control_leaves_base_dynamics() {
    let base = SinDrift;
    let control = ScaledState::new(&[0.0]);
    let batch = recorded(&base, &control, 1.0, None);
    assert!(batch.graph.value(batch.cost).iter().all(|&y| y == 0.0));
    let sigma = ConstantSigma(0.8);
    let spec = SdeSpec::new(&base, &sigma);
    let grid = TimeGrid::new(0.0, 1.0, 30).unwrap();
    let init = GaussianInit::standard(1);
    let plain = simulate_batch(&spec, Init::Sampler(&init), &grid, 21, 8).unwrap();
    assert_eq!(plain, batch.trajectories);
}

fn loss_and_grad(base: &dyn VectorField, theta: f64, alpha: f64) -> (f64, f64) {
    let control = ScaledState::new(&[theta]);
    let mut b = recorded(base, &control, alpha, None);
    let g = &mut b.graph;
    let ys = g.sum(b.cost);
    let xs = g.square(b.x_final);
    let xs = g.sum(xs);
    let root = g.add(ys, xs).unwrap();
    let v = g.scalar_value(root);
    let grads = g.backward(root).unwrap();
    (v, grads.get(0).unwrap()[0])
}

#[test]
fn recorded_gradient_matches_finite_differences() {
    for base in [&SinDrift as &dyn VectorField, &LinearField { coef: -0.5, dim: 1 }] {
        for theta in [-0.7, 0.1, 0.45] {
            let (_, g) = loss_and_grad(base, theta, 2.0);
            let h = 1e-5;
            let fd = (loss_and_grad(base, theta + h, 2.0).0 - loss_and_grad(base, theta - h, 2.0).0)
                / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
            assert!(rel <= 1e-4, "θ={theta}: {g} vs {fd}");
        }
    }
}

#[test]
fn truncated_recording_drops_early_gradient() {
    let control = ScaledState::new(&[0.4]);
    let base = ZeroField { dim: 1 };
    let full = {
        let mut b = recorded(&base, &control, 1.0, None);
        let r = b.graph.sum(b.cost);
        b.graph.backward(r).unwrap().get(0).unwrap()[0]
    };
    let late = {
        let mut b = recorded(&base, &control, 1.0, Some(0.8));
        let r = b.graph.sum(b.cost);
        b.graph.backward(r).unwrap().get(0).unwrap()[0]
    };
    assert!(late.abs() < full.abs());
    assert!(late != 0.0);
}

proptest! {
    #[test]
    fn replay_reproduces_states(seed in any::<u64>(), stream in 0u64..1000, x0 in -3.0f64..3.0) {
        let f = SinDrift;
        let s = ConstantSigma(1.3);
        let spec = SdeSpec::new(&f, &s);
        let grid = TimeGrid::new(0.0, 2.0, 25).unwrap();
        let tr = simulate(&spec, Init::Point(&[x0]), &grid, seed, stream).unwrap();
        prop_assert_eq!(tr.replay(&spec).unwrap(), tr.states.clone());
        // increments have the Brownian scale: |Δw| is never astronomically large
        prop_assert!(tr.noise.iter().all(|w| w.abs() < 10.0 * grid.dt().sqrt()));
    }

    #[test]
    fn stream_seek_matches_sequential_draws(seed in any::<u64>(), stream in any::<u64>(), step in 0usize..50, d in 1usize..5) {
        let mut seq = RngStream::new(seed, stream);
        let mut buf = vec![0.0; d];
        for _ in 0..=step {
            seq.fill_normal(&mut buf);
        }
        let mut sought = RngStream::new(seed, stream);
        sought.seek(step, d);
        let mut buf2 = vec![0.0; d];
        sought.fill_normal(&mut buf2);
        prop_assert_eq!(buf, buf2);
    }
}
