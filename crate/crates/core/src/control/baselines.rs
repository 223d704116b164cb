//! Comparison methods: reward maximization without the KL term, the naive
//! gradient drift, and reward-model guidance.

use serde::{Deserialize, Serialize};

use super::{solve, Control, DriftNet, GradientWindow, Sampler, SolveSpec, StageConfig, TrainLog};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, Regressor};
use crate::linalg::Matrix;
use crate::pretrained::{PretrainedModel, DEFAULT_STEPS};
use crate::rewards::Reward;
use crate::sde::{derive_seed, simulate_batch_from, GaussianInit, Init, SdeSpec, VectorField};

/// Guidance level used when none is configured.
pub const DEFAULT_GUIDANCE_LEVEL: f64 = 30.0;

/// Time window in which the reward gradient reaches the drift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Interval {
    #[default]
    Full,
    /// Gradients only through steps in `[k, T]`.
    Truncation { k: f64 },
    /// A fresh `K ∼ U[0, T)` per epoch.
    Random,
}

impl Interval {
    pub fn truncation(horizon: f64) -> Self {
        Interval::Truncation { k: 0.8 * horizon }
    }
}

/// Maximizes `E[r(x_T)]` with no path penalty, from `ν_ini`.
pub fn train_no_kl(
    model: &PretrainedModel,
    reward: &Reward,
    cfg: &StageConfig,
    interval: Interval,
) -> Result<(DriftNet, TrainLog)> {
    let window = match interval {
        Interval::Full => GradientWindow::Full,
        Interval::Truncation { k } => {
            if !(0.0..model.horizon).contains(&k) {
                return Err(Error::invalid(format!("truncation point {k} outside [0, {})", model.horizon)));
            }
            GradientWindow::From(k)
        }
        Interval::Random => GradientWindow::RandomFrom,
    };
    let drift = DriftNet::new(model.dim(), model.horizon, &cfg.hidden, derive_seed(cfg.seed, 2))?;
    let reference = GaussianInit::standard(model.dim());
    let sigma = model.sigma();
    let spec = SolveSpec {
        base: model,
        sigma: &sigma,
        init: Init::Sampler(&reference),
        grid: model.grid(cfg.n_steps)?,
        alpha: 0.0,
        window,
    };
    let objective = |g: &mut Graph, x: Var| reward.record(g, x);
    solve(&objective, drift, &spec, cfg)
}

/// `∇r(x)/α`, the drift obtained by treating the terminal reward as if it
/// applied at every time.
#[derive(Debug, Clone)]
pub struct NaiveField {
    pub reward: Reward,
    pub alpha: f64,
}

impl NaiveField {
    pub fn new(reward: &Reward, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("α must be positive, got {alpha}")));
        }
        Ok(Self {
            reward: reward.clone(),
            alpha,
        })
    }
}

impl VectorField for NaiveField {
    fn dim(&self) -> usize {
        self.reward.dim()
    }

    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        let mut g = self.reward.gradients(xs).expect("reward dimension checked by the sampler");
        g.data.iter_mut().for_each(|v| *v /= self.alpha);
        g
    }
}

pub fn naive_drift_sampler(
    model: &PretrainedModel,
    reward: &Reward,
    alpha: f64,
    count: usize,
    seed: u64,
) -> Result<Matrix> {
    if reward.dim() != model.dim() {
        return Err(Error::invalid("reward and model dimensions differ"));
    }
    Sampler::with_control(model, Control::Naive(NaiveField::new(reward, alpha)?)).sample_terminal(count, seed)
}

/// A model of `E[r(x_T) | x_t = x]` with its `x`-gradient.
pub trait TimeReward: Sync {
    fn dim(&self) -> usize;

    /// Means and gradients for each row of `xs` at time `t`.
    fn mean_and_gradient(&self, t: f64, xs: &Matrix) -> (Vec<f64>, Matrix);
}

/// A single regressor over `[x, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRewardModel {
    pub net: Regressor,
    pub dim: usize,
}

impl TimeRewardModel {
    fn inputs(&self, t: f64, xs: &Matrix) -> Matrix {
        let mut m = Matrix::zeros(xs.rows, self.dim + 1);
        for r in 0..xs.rows {
            let row = m.row_mut(r);
            row[..self.dim].copy_from_slice(xs.row(r));
            row[self.dim] = t;
        }
        m
    }

    pub fn mean(&self, t: f64, x: &[f64]) -> f64 {
        self.net.predict(&self.inputs(t, &Matrix::from_vec(1, x.len(), x.to_vec())))[0]
    }
}

impl TimeReward for TimeRewardModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn mean_and_gradient(&self, t: f64, xs: &Matrix) -> (Vec<f64>, Matrix) {
        let input = self.inputs(t, xs);
        let mean = self.net.predict(&input);
        let full = self.net.gradient(&input).expect("regressor has a scalar output");
        let mut grad = Matrix::zeros(xs.rows, self.dim);
        for r in 0..xs.rows {
            grad.row_mut(r).copy_from_slice(&full.row(r)[..self.dim]);
        }
        (mean, grad)
    }
}

/// Regresses `r(x_T)` on `(x_t, t)` over `n` pretrained rollouts from
/// `ν_ini`, using every probe time on each rollout. Times are snapped to
/// the default grid.
pub fn fit_time_reward_model(
    model: &PretrainedModel,
    reward: &Reward,
    times: &[f64],
    n: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<TimeRewardModel> {
    if n == 0 || times.is_empty() {
        return Err(Error::invalid("time reward model needs n ≥ 1 rollouts and at least one probe time"));
    }
    let grid = model.grid(DEFAULT_STEPS)?;
    let steps = times
        .iter()
        .map(|&t| {
            if !(0.0..=model.horizon).contains(&t) {
                return Err(Error::invalid(format!("probe time {t} outside [0, {}]", model.horizon)));
            }
            Ok(((t - grid.t_start) / grid.dt()).round() as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    let sigma = model.sigma();
    let spec = SdeSpec::new(model, &sigma);
    let reference = GaussianInit::standard(model.dim());
    let paths = simulate_batch_from(&spec, Init::Sampler(&reference), &grid, seed, 0, n)?;
    let d = model.dim();
    let mut xs = Matrix::zeros(n * steps.len(), d + 1);
    let mut ys = Vec::with_capacity(n * steps.len());
    let mut row = 0;
    for p in &paths {
        let r = reward.value(p.terminal());
        for &k in &steps {
            let dst = xs.row_mut(row);
            dst[..d].copy_from_slice(p.state(k));
            dst[d] = grid.time(k);
            ys.push(r);
            row += 1;
        }
    }
    Ok(TimeRewardModel {
        net: Regressor::fit(&xs, &ys, cfg)?,
        dim: d,
    })
}

/// `γ σ² (y_con − μ(t, x)) / σ_g² · ∇_x μ(t, x)`.
#[derive(Debug, Clone)]
pub struct GuidanceField<M> {
    pub mu: M,
    pub gamma: f64,
    pub y_con: f64,
    pub sigma_g: f64,
}

impl<M: TimeReward> GuidanceField<M> {
    pub fn new(mu: M, gamma: f64, y_con: f64, sigma_g: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !(sigma_g > 0.0) {
            return Err(Error::invalid("guidance needs γ ≥ 0 and σ_g > 0"));
        }
        Ok(Self {
            mu,
            gamma,
            y_con,
            sigma_g,
        })
    }
}

impl<M: TimeReward> VectorField for GuidanceField<M> {
    fn dim(&self) -> usize {
        self.mu.dim()
    }

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        if self.gamma == 0.0 {
            return Matrix::zeros(xs.rows, self.dim());
        }
        let (mean, mut grad) = self.mu.mean_and_gradient(t, xs);
        let sigma2 = 1.0;
        for (r, m) in mean.iter().enumerate() {
            let k = self.gamma * sigma2 * (self.y_con - m) / (self.sigma_g * self.sigma_g);
            grad.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        grad
    }
}

pub fn guidance_sampler(
    model: &PretrainedModel,
    mu: &TimeRewardModel,
    gamma: f64,
    y_con: f64,
    sigma_g: f64,
    count: usize,
    seed: u64,
) -> Result<Matrix> {
    let field = GuidanceField::new(mu.clone(), gamma, y_con, sigma_g)?;
    Sampler::with_control(model, Control::Guidance(field)).sample_terminal(count, seed)
}
