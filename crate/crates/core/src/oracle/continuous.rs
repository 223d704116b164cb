//! Closed-form optimal value, drift and initial law for a Gaussian-mixture
//! pretrained model and an affine reward `r(x) = b·x + c`.
//!
//! Given `x_t = x`, the pretrained terminal state is distributed as the data
//! posterior `y_0 | y_{T−t} = x`, a Gaussian mixture, so
//! `v*_t(x) = c + α log E[exp(b·x_T/α) | x_t = x]` is a mixture MGF.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metrics::{Cdf, GridDensity};
use crate::pretrained::PretrainedModel;
use crate::quad::{Grid1d, Grid2d};
use crate::rewards::Reward;
use crate::sde::VectorField;

fn affine(reward: &Reward) -> Result<(&[f64], f64)> {
    reward
        .as_linear()
        .ok_or_else(|| Error::invalid("analytic oracles need an affine reward b·x + c"))
}

fn check(model: &PretrainedModel, reward: &Reward, alpha: f64, t: f64, x: &[f64]) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("α must be positive, got {alpha}")));
    }
    if !(0.0..=model.horizon).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, {}]", model.horizon)));
    }
    if x.len() != model.dim() || reward.dim() != model.dim() {
        return Err(Error::invalid("state, reward and model dimensions differ"));
    }
    Ok(())
}

/// `v*_t(x)`.
pub fn analytic_value(model: &PretrainedModel, reward: &Reward, alpha: f64, t: f64, x: &[f64]) -> Result<f64> {
    let (b, c) = affine(reward)?;
    check(model, reward, alpha, t, x)?;
    let s = model.horizon - t;
    if s <= 0.0 {
        return Ok(reward.value(x));
    }
    let post = model.posterior_data_given_state(s, x)?;
    let lambda: Vec<f64> = b.iter().map(|v| v / alpha).collect();
    Ok(c + alpha * post.log_mgf(&lambda))
}

/// `∇_x v*_t(x)` in closed form.
pub fn analytic_value_gradient(
    model: &PretrainedModel,
    reward: &Reward,
    alpha: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let (b, _) = affine(reward)?;
    check(model, reward, alpha, t, x)?;
    let s = model.horizon - t;
    if s <= 0.0 {
        return Ok(b.to_vec());
    }
    let d = x.len();
    let a = (-0.5 * s).exp();
    let c = -(-s).exp_m1();
    let lambda: Vec<f64> = b.iter().map(|v| v / alpha).collect();
    let l2 = linalg::norm_sq(&lambda);
    let comps = model.data.components();
    let mut log_b = Vec::with_capacity(comps.len());
    let mut log_l = Vec::with_capacity(comps.len());
    let mut grad_n = Vec::with_capacity(comps.len());
    let mut shrink = Vec::with_capacity(comps.len());
    for k in comps {
        let sk = a * a * k.variance + c;
        let diff: Vec<f64> = x.iter().zip(&k.mean).map(|(xi, mi)| xi - a * mi).collect();
        let log_n = -0.5 * d as f64 * sk.ln() - 0.5 * linalg::norm_sq(&diff) / sk;
        let pk = k.variance * c / sk;
        let mean: Vec<f64> = x
            .iter()
            .zip(&k.mean)
            .map(|(xi, mi)| pk * (mi / k.variance + a * xi / c))
            .collect();
        let ek = linalg::dot(&lambda, &mean) + 0.5 * l2 * pk;
        log_b.push(k.weight.ln() + log_n);
        log_l.push(k.weight.ln() + log_n + ek);
        grad_n.push(diff.iter().map(|v| -v / sk).collect::<Vec<f64>>());
        shrink.push(pk * a / c);
    }
    let (zl, zb) = (linalg::log_sum_exp(&log_l), linalg::log_sum_exp(&log_b));
    let mut g = vec![0.0; d];
    for k in 0..comps.len() {
        let (wl, wb) = ((log_l[k] - zl).exp(), (log_b[k] - zb).exp());
        for j in 0..d {
            g[j] += wl * (grad_n[k][j] + shrink[k] * lambda[j]) - wb * grad_n[k][j];
        }
    }
    Ok(g.into_iter().map(|v| alpha * v).collect())
}

/// `u*(t, x) = σ²(t) ∇_x v*_t(x) / α`.
pub fn analytic_optimal_drift(
    model: &PretrainedModel,
    reward: &Reward,
    alpha: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let sigma = 1.0;
    Ok(analytic_value_gradient(model, reward, alpha, t, x)?
        .into_iter()
        .map(|g| sigma * sigma * g / alpha)
        .collect())
}

/// The optimal drift as a vector field.
#[derive(Debug, Clone)]
pub struct AnalyticDrift {
    pub model: PretrainedModel,
    pub reward: Reward,
    pub alpha: f64,
}

impl AnalyticDrift {
    pub fn new(model: &PretrainedModel, reward: &Reward, alpha: f64) -> Result<Self> {
        affine(reward)?;
        check(model, reward, alpha, 0.0, &vec![0.0; model.dim()])?;
        Ok(Self {
            model: model.clone(),
            reward: reward.clone(),
            alpha,
        })
    }
}

impl VectorField for AnalyticDrift {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        let t = t.clamp(0.0, self.model.horizon);
        let data = xs
            .rows_iter()
            .flat_map(|x| analytic_optimal_drift(&self.model, &self.reward, self.alpha, t, x).expect("validated"))
            .collect();
        Matrix::from_vec(xs.rows, xs.cols, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialGrid {
    OneD(Grid1d),
    TwoD(Grid2d),
}

/// `ν*(x) = exp(v*_0(x)/α) ν_ini(x) / C_tar` tabulated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalInitial {
    pub grid: InitialGrid,
    pub density: Vec<f64>,
    /// `log C_tar` by quadrature.
    pub log_normalizer: f64,
    /// `(mean, variance)` when `v*_0` is affine in `x`, which happens for a
    /// single-Gaussian data law.
    pub gaussian: Option<(Vec<f64>, f64)>,
}

impl OptimalInitial {
    pub fn cdf(&self) -> Result<GridDensity> {
        match &self.grid {
            InitialGrid::OneD(g) => GridDensity::new(g.points(), self.density.clone()),
            InitialGrid::TwoD(_) => Err(Error::invalid("CDF view needs d = 1")),
        }
    }

    /// Inverse-CDF samples in one dimension.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        use rand::{Rng, SeedableRng};
        let cdf = self.cdf()?;
        let (lo, hi) = cdf.support();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let (mut a, mut b) = (lo, hi);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if cdf.cdf(m) < u {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                0.5 * (a + b)
            })
            .collect();
        Ok(Matrix::from_vec(n, 1, data))
    }
}

pub fn analytic_optimal_initial(model: &PretrainedModel, reward: &Reward, alpha: f64) -> Result<OptimalInitial> {
    let (b, _) = affine(reward)?;
    let d = model.dim();
    check(model, reward, alpha, 0.0, &vec![0.0; d])?;
    let log_ini = |x: &[f64]| -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * linalg::norm_sq(x);
    let (grid, points, weights): (InitialGrid, Vec<Vec<f64>>, Vec<f64>) = match d {
        1 => {
            let g = Grid1d::standard();
            (InitialGrid::OneD(g), g.points().into_iter().map(|p| vec![p]).collect(), g.weights())
        }
        2 => {
            let g = Grid2d::standard();
            (InitialGrid::TwoD(g), g.points().into_iter().map(|p| p.to_vec()).collect(), g.weights())
        }
        _ => return Err(Error::invalid("optimal initial law is tabulated for d ∈ {1, 2}")),
    };
    let log_u = points
        .iter()
        .map(|x| Ok(analytic_value(model, reward, alpha, 0.0, x)? / alpha + log_ini(x)))
        .collect::<Result<Vec<f64>>>()?;
    let terms: Vec<f64> = log_u.iter().zip(&weights).map(|(l, w)| l + w.ln()).collect();
    let log_c = linalg::log_sum_exp(&terms);
    let density = log_u.iter().map(|l| (l - log_c).exp()).collect();

    let gaussian = match model.data.components() {
        [only] => {
            let s = model.horizon;
            let a = (-0.5 * s).exp();
            let c = -(-s).exp_m1();
            let p = only.variance * c / (a * a * only.variance + c);
            Some((b.iter().map(|bj| p * a / c * bj / alpha).collect(), 1.0))
        }
        _ => None,
    };
    Ok(OptimalInitial {
        grid,
        density,
        log_normalizer: log_c,
        gaussian,
    })
}

/// `log E[exp(r(x_T)/α)]` for the pretrained sampler started at `ν_ini`,
/// computed in `x_T`: the terminal density is integrated out of the
/// posterior kernel by 1-D quadrature over `x_0`, then tilted by `exp(r/α)`.
pub fn terminal_log_normalizer_1d(model: &PretrainedModel, reward: &Reward, alpha: f64) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::invalid("terminal_log_normalizer_1d needs d = 1"));
    }
    let outer = Grid1d::new(-10.0, 10.0, 801)?;
    let inner = Grid1d::new(-9.0, 9.0, 1201)?;
    let kernels = inner
        .points()
        .into_iter()
        .map(|x0| model.posterior_data_given_state(model.horizon, &[x0]))
        .collect::<Result<Vec<_>>>()?;
    let iw = inner.weights();
    let ini: Vec<f64> = inner
        .points()
        .iter()
        .map(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
        .collect();
    let mut log_terms = Vec::with_capacity(outer.n);
    for (xt, w) in outer.points().into_iter().zip(outer.weights()) {
        let p: f64 = kernels
            .iter()
            .zip(&iw)
            .zip(&ini)
            .map(|((k, wi), q)| wi * q * k.density(&[xt]))
            .sum();
        log_terms.push(reward.value(&[xt]) / alpha + (w * p).ln());
    }
    Ok(linalg::log_sum_exp(&log_terms))
}

/// Max |HJB residual| of `v*` on `[0.5, T − 0.5] × [−3, 3]` (d = 1) with
/// central differences of step `h`.
pub fn hjb_residual(model: &PretrainedModel, reward: &Reward, alpha: f64, h: f64) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::invalid("hjb_residual is implemented for d = 1"));
    }
    let v = |t: f64, x: f64| analytic_value(model, reward, alpha, t, &[x]);
    let mut worst = 0.0f64;
    let times = 9;
    for i in 0..times {
        let t = 0.5 + (model.horizon - 1.0) * i as f64 / (times - 1) as f64;
        for j in 0..25 {
            let x = -3.0 + 6.0 * j as f64 / 24.0;
            let v0 = v(t, x)?;
            let vx = (v(t, x + h)? - v(t, x - h)?) / (2.0 * h);
            let vxx = (v(t, x + h)? - 2.0 * v0 + v(t, x - h)?) / (h * h);
            let vt = (v(t + h, x)? - v(t - h, x)?) / (2.0 * h);
            let f = model.reverse_drift(t, &[x])[0];
            let res = 0.5 * vxx + f * vx + vt + vx * vx / (2.0 * alpha);
            worst = worst.max(res.abs());
        }
    }
    Ok(worst)
}
