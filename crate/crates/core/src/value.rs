//! Estimation of the optimal value function at `t = 0`.
//!
//! Two estimators share the network and trainer from [`crate::fit`]:
//! the mean regression of `r(x_T)` on `x_0`, which recovers `v*_0` up to an
//! additive constant, and the soft variant regressing
//! `α log mean exp(r(x_T)/α)` over several rollouts per probe.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, Regressor};
use crate::linalg::{self, Matrix};
use crate::pretrained::PretrainedModel;
use crate::rewards::Reward;
use crate::sde::{derive_seed, simulate_terminal, GaussianInit, Init, InitialSampler, SdeSpec, TimeGrid};

/// Largest `|r|/α` accepted by the soft estimator.
pub const MAX_EXPONENT: f64 = 700.0;

/// Where the probe states `x_0` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probes {
    /// `ν_ini = N(0, I)`.
    #[default]
    Initial,
    /// `N(0, 2 I)`, covering more of the region stage 1 can reach.
    Wide,
}

impl Probes {
    fn sampler(self, dim: usize) -> GaussianInit {
        GaussianInit {
            mean: vec![0.0; dim],
            std: match self {
                Probes::Initial => 1.0,
                Probes::Wide => std::f64::consts::SQRT_2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mean,
    Soft,
}

/// Regression pairs `(x_0, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub estimator: Estimator,
    pub seed: u64,
    /// Rollouts averaged per probe (1 for the mean estimator).
    pub rollouts: usize,
}

impl ValueDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.x.cols {
            let _ = write!(s, "x{j},");
        }
        s.push_str("y\n");
        for (row, y) in self.x.rows_iter().zip(&self.y) {
            for v in row {
                let _ = write!(s, "{v:e},");
            }
            let _ = writeln!(s, "{y:e}");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads the `(x, y)` columns back; provenance is supplied by the caller.
    pub fn from_csv(text: &str, estimator: Estimator, seed: u64, rollouts: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty value dataset"))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(Error::invalid("value dataset needs at least one x column and y"));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("row {}: {e}", i + 1)))?;
            if vals.len() != cols {
                return Err(Error::invalid(format!("row {} has {} fields, expected {cols}", i + 1, vals.len())));
            }
            xs.extend_from_slice(&vals[..cols - 1]);
            ys.push(vals[cols - 1]);
        }
        Ok(Self {
            x: Matrix::from_vec(ys.len(), cols - 1, xs),
            y: ys,
            estimator,
            seed,
            rollouts,
        })
    }
}

/// A fitted `â(x) ≈ v*_0(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub estimator: Estimator,
    pub net: Regressor,
}

impl ValueModel {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.net.predict_one(x)
    }

    pub fn values(&self, xs: &Matrix) -> Vec<f64> {
        self.net.predict(xs)
    }

    pub fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.net.record(g, x)
    }

    /// The value model as a terminal reward for stage 1.
    pub fn as_reward(&self) -> Reward {
        Reward::Net(Box::new(self.net.clone()))
    }

    /// Mean training loss per epoch.
    pub fn log(&self) -> &[f64] {
        &self.net.log
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(m)
    }
}

const PROBE_TAG: u64 = 0x9_0be;
const ROLLOUT_TAG: u64 = 0x5011;

fn pretrained_terminal(model: &PretrainedModel, init: &Matrix, grid: &TimeGrid, seed: u64) -> Result<Matrix> {
    let sigma = model.sigma();
    let spec = SdeSpec::new(model, &sigma);
    simulate_terminal(&spec, Init::States(init), grid, seed, 0, init.rows)
}

/// `n` pairs `(x_0, r(x_T))` with `x_0 ∼ ν_ini` and `x_T` from one
/// pretrained rollout.
pub fn generate_value_dataset(
    model: &PretrainedModel,
    reward: &Reward,
    n: usize,
    grid: &TimeGrid,
    probes: Probes,
    seed: u64,
) -> Result<ValueDataset> {
    if n == 0 {
        return Err(Error::invalid("value dataset needs n ≥ 1"));
    }
    let x = probes.sampler(model.dim()).sample(derive_seed(seed, PROBE_TAG), 0, n)?;
    let xt = pretrained_terminal(model, &x, grid, derive_seed(seed, ROLLOUT_TAG))?;
    Ok(ValueDataset {
        x,
        y: reward.values(&xt),
        estimator: Estimator::Mean,
        seed,
        rollouts: 1,
    })
}

/// `α log mean exp(r/α)`, refusing exponents beyond [`MAX_EXPONENT`].
pub fn soft_mean(values: &[f64], alpha: f64) -> Result<f64> {
    let worst = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst / alpha > MAX_EXPONENT {
        return Err(Error::Overflow(format!(
            "|r|/α reaches {:.1} > {MAX_EXPONENT}; increase α or rescale the reward",
            worst / alpha
        )));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / alpha).collect();
    Ok(alpha * linalg::log_mean_exp(&scaled))
}

/// Soft targets at `m` probes with `n` rollouts each.
#[allow(clippy::too_many_arguments)]
pub fn generate_soft_dataset(
    model: &PretrainedModel,
    reward: &Reward,
    alpha: f64,
    m: usize,
    n: usize,
    grid: &TimeGrid,
    probes: Probes,
    seed: u64,
) -> Result<ValueDataset> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("α must be positive, got {alpha}")));
    }
    if m == 0 || n < 2 {
        return Err(Error::invalid("soft value targets need m ≥ 1 probes and n ≥ 2 rollouts"));
    }
    let d = model.dim();
    let x = probes.sampler(d).sample(derive_seed(seed, PROBE_TAG), 0, m)?;
    let mut starts = Matrix::zeros(m * n, d);
    for i in 0..m {
        for k in 0..n {
            starts.row_mut(i * n + k).copy_from_slice(x.row(i));
        }
    }
    let xt = pretrained_terminal(model, &starts, grid, derive_seed(seed, ROLLOUT_TAG))?;
    let r = reward.values(&xt);
    let y = r.chunks(n).map(|c| soft_mean(c, alpha)).collect::<Result<Vec<_>>>()?;
    Ok(ValueDataset {
        x,
        y,
        estimator: Estimator::Soft,
        seed,
        rollouts: n,
    })
}

/// Regresses `y` on `x_0`.
pub fn fit_value(ds: &ValueDataset, cfg: &FitConfig) -> Result<ValueModel> {
    if ds.is_empty() {
        return Err(Error::invalid("empty value dataset"));
    }
    Ok(ValueModel {
        estimator: ds.estimator,
        net: Regressor::fit(&ds.x, &ds.y, cfg)?,
    })
}

/// Mean regression of `r(x_T)` on `x_0`.
pub fn fit_value_mean(ds: &ValueDataset, cfg: &FitConfig) -> Result<ValueModel> {
    fit_value(ds, cfg)
}

/// Settings of the soft estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftValueConfig {
    pub probes: usize,
    pub rollouts: usize,
    pub probe_law: Probes,
    pub fit: FitConfig,
}

impl Default for SoftValueConfig {
    fn default() -> Self {
        Self {
            probes: 512,
            rollouts: 128,
            probe_law: Probes::Initial,
            fit: FitConfig::default(),
        }
    }
}

/// Soft targets followed by regression; returns the model and its dataset.
pub fn fit_value_soft(
    model: &PretrainedModel,
    reward: &Reward,
    alpha: f64,
    grid: &TimeGrid,
    cfg: &SoftValueConfig,
    seed: u64,
) -> Result<(ValueModel, ValueDataset)> {
    let ds = generate_soft_dataset(model, reward, alpha, cfg.probes, cfg.rollouts, grid, cfg.probe_law, seed)?;
    Ok((fit_value(&ds, &cfg.fit)?, ds))
}
