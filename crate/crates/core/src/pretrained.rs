//! The exact "pretrained" diffusion model.
//!
//! Data follow an isotropic Gaussian mixture. The forward noising process is
//! the variance-preserving Ornstein–Uhlenbeck SDE `dy = −½ y ds + dw`, so every
//! forward marginal `Q_s` is again a mixture with closed-form parameters and
//! the generative (reverse-time) drift
//!
//! ```text
//! f(t, x) = ½ x + ∇ log Q_{T−t}(x)
//! ```
//!
//! is available exactly, together with its Jacobian. Sampling starts from
//! `N(0, I)` rather than `Q_T`; at `T = 5` the mismatch is small.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::sde::{ConstantSigma, GaussianInit, RngStream, TimeGrid, VectorField};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl TryFrom<Vec<Component>> for GaussianMixture {
    type Error = Error;
    fn try_from(c: Vec<Component>) -> Result<Self> {
        Self::new(c)
    }
}

impl From<GaussianMixture> for Vec<Component> {
    fn from(gm: GaussianMixture) -> Self {
        gm.components
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        for c in &components {
            if c.mean.len() != d {
                return Err(Error::invalid("mixture components disagree on dimension"));
            }
            if !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::invalid(format!("variance must be positive, got {}", c.variance)));
            }
            if !(c.weight > 0.0) {
                return Err(Error::invalid(format!("weight must be positive, got {}", c.weight)));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Builds a mixture from unnormalized log-weights.
    pub fn from_log_weights(log_weights: &[f64], means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let lse = linalg::log_sum_exp(log_weights);
        let components = log_weights
            .iter()
            .zip(means)
            .zip(variances)
            .map(|((lw, mean), variance)| Component {
                weight: (lw - lse).exp(),
                mean,
                variance,
            })
            .collect::<Vec<_>>();
        // renormalize the rounding residue so validation is exact
        let total: f64 = components.iter().map(|c| c.weight).sum();
        Self::new(
            components
                .into_iter()
                .map(|c| Component {
                    weight: c.weight / total,
                    ..c
                })
                .collect(),
        )
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid")
    }

    /// Equal-weight two-component mixture at `±m` in one dimension.
    pub fn symmetric_pair(m: f64, variance: f64) -> Result<Self> {
        Self::new(vec![
            Component {
                weight: 0.5,
                mean: vec![-m],
                variance,
            },
            Component {
                weight: 0.5,
                mean: vec![m],
                variance,
            },
        ])
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        self.components
            .iter()
            .map(|c| {
                let r2: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln() - 0.5 * d * (LN_2PI + c.variance.ln()) - 0.5 * r2 / c.variance
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        linalg::log_sum_exp(&self.component_log_densities(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let l = self.component_log_densities(x);
        let lse = linalg::log_sum_exp(&l);
        l.iter().map(|v| (v - lse).exp()).collect()
    }

    /// `∇ log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let g = self.responsibilities(x);
        let mut s = vec![0.0; x.len()];
        for (c, gk) in self.components.iter().zip(&g) {
            for j in 0..x.len() {
                s[j] -= gk * (x[j] - c.mean[j]) / c.variance;
            }
        }
        s
    }

    /// Score and its Jacobian `∇² log p(x)` (row-major `d × d`).
    pub fn score_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let g = self.responsibilities(x);
        let mut s = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        let mut sk = vec![0.0; d];
        for (c, gk) in self.components.iter().zip(&g) {
            for j in 0..d {
                sk[j] = -(x[j] - c.mean[j]) / c.variance;
                s[j] += gk * sk[j];
            }
            for i in 0..d {
                for j in 0..d {
                    jac[i * d + j] += gk * sk[i] * sk[j];
                }
                jac[i * d + i] -= gk / c.variance;
            }
        }
        for i in 0..d {
            for j in 0..d {
                jac[i * d + j] -= s[i] * s[j];
            }
        }
        (s, jac)
    }

    /// Law of `y_s` under `dy = −½ y ds + dw` started from this mixture.
    pub fn forward_marginal(&self, s: f64) -> GaussianMixture {
        assert!(s >= 0.0, "forward time must be non-negative");
        let decay = (-s).exp();
        let a = (-0.5 * s).exp();
        GaussianMixture {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| a * m).collect(),
                    variance: decay * c.variance + (1.0 - decay),
                })
                .collect(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (mj, cj) in m.iter_mut().zip(&c.mean) {
                *mj += c.weight * cj;
            }
        }
        m
    }

    /// `E[exp(λ·x)]` in log form.
    pub fn log_mgf(&self, lambda: &[f64]) -> f64 {
        let l2 = linalg::norm_sq(lambda);
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + linalg::dot(lambda, &c.mean) + 0.5 * l2 * c.variance)
            .collect();
        linalg::log_sum_exp(&terms)
    }

    /// CDF of a one-dimensional mixture.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * crate::quad::normal_cdf((x - c.mean[0]) / c.variance.sqrt()))
            .sum()
    }

    /// Draws `n` samples; row `i` uses stream `i` of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let mut pick = ChaCha8Rng::seed_from_u64(seed);
            pick.set_stream(2 * i as u64 + 1);
            let u: f64 = pick.random();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (j, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let c = &self.components[k];
            let mut rng = RngStream::new(seed, 2 * i as u64);
            let row = out.row_mut(i);
            rng.fill_normal(row);
            for (x, m) in row.iter_mut().zip(&c.mean) {
                *x = m + c.variance.sqrt() * *x;
            }
        }
        out
    }
}

/// Default horizon; makes `Q_T` close to `N(0, I)`.
pub const DEFAULT_HORIZON: f64 = 5.0;
pub const DEFAULT_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub data: GaussianMixture,
    pub horizon: f64,
}

impl PretrainedModel {
    pub fn new(data: GaussianMixture, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { data, horizon })
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    /// Generative drift `f(t, x) = ½ x + ∇ log Q_{T−t}(x)`.
    pub fn reverse_drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let q = self.data.forward_marginal((self.horizon - t).max(0.0));
        let mut s = q.score(x);
        for (sj, xj) in s.iter_mut().zip(x) {
            *sj += 0.5 * xj;
        }
        s
    }

    /// Generative diffusion coefficient.
    pub fn sigma(&self) -> ConstantSigma {
        ConstantSigma(1.0)
    }

    pub fn initial(&self) -> GaussianInit {
        GaussianInit::standard(self.dim())
    }

    pub fn grid(&self, n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, n_steps)
    }

    pub fn pdata_density(&self, x: &[f64]) -> f64 {
        self.data.density(x)
    }

    /// Law of the data point `y_0` given the forward state `y_s = x`.
    pub fn posterior_data_given_state(&self, s: f64, x: &[f64]) -> Result<GaussianMixture> {
        if !(s > 0.0) {
            return Err(Error::invalid(
                "posterior at forward time 0 is a point mass; need s > 0",
            ));
        }
        let a = (-0.5 * s).exp();
        let c = -(-s).exp_m1();
        let d = x.len() as f64;
        let mut log_w = Vec::with_capacity(self.data.components.len());
        let mut means = Vec::with_capacity(self.data.components.len());
        let mut vars = Vec::with_capacity(self.data.components.len());
        for comp in &self.data.components {
            let v = comp.variance;
            let evid_var = a * a * v + c;
            let r2: f64 = x
                .iter()
                .zip(&comp.mean)
                .map(|(xi, mi)| (xi - a * mi) * (xi - a * mi))
                .sum();
            log_w.push(comp.weight.ln() - 0.5 * d * evid_var.ln() - 0.5 * r2 / evid_var);
            let post_var = v * c / (c + a * a * v);
            means.push(
                x.iter()
                    .zip(&comp.mean)
                    .map(|(xi, mi)| post_var * (mi / v + a * xi / c))
                    .collect(),
            );
            vars.push(post_var);
        }
        GaussianMixture::from_log_weights(&log_w, means, vars)
    }
}

impl VectorField for PretrainedModel {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        let q = self.data.forward_marginal((self.horizon - t).max(0.0));
        let mut out = Matrix::zeros(xs.rows, xs.cols);
        for r in 0..xs.rows {
            let x = xs.row(r);
            let s = q.score(x);
            for (o, (sj, xj)) in out.row_mut(r).iter_mut().zip(s.iter().zip(x)) {
                *o = 0.5 * xj + sj;
            }
        }
        out
    }

    fn jacobian(&self, t: f64, xs: &Matrix) -> Vec<f64> {
        let q = self.data.forward_marginal((self.horizon - t).max(0.0));
        let d = xs.cols;
        let mut out = Vec::with_capacity(xs.rows * d * d);
        for r in 0..xs.rows {
            let (_, mut jac) = q.score_with_jacobian(xs.row(r));
            for i in 0..d {
                jac[i * d + i] += 0.5;
            }
            out.extend(jac);
        }
        out
    }
}
