//! Ground truth for the fine-tuning pipeline: an exact finite-chain solver
//! and closed-form continuous oracles, plus a suite that runs both.

mod chain;
mod continuous;

pub use chain::{
    soft_value_backward, tilt_chain, verify_identities, DiscreteChain, IdentityReport, TiltedChain,
    MAX_ENUMERATED_PATHS,
};
pub use continuous::{
    analytic_optimal_drift, analytic_optimal_initial, analytic_value, analytic_value_gradient, hjb_residual,
    terminal_log_normalizer_1d, AnalyticDrift, InitialGrid, OptimalInitial,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pretrained::{GaussianMixture, PretrainedModel};
use crate::rewards::{Reward, TiltedTarget};

/// One named check of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub deviation: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn push(&mut self, name: impl Into<String>, deviation: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            deviation,
            threshold,
            passed: deviation <= threshold,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub random_chains: usize,
    pub states: usize,
    pub horizon: usize,
    pub enumerated_chains: usize,
    pub alpha: f64,
    pub seed: u64,
    pub chain_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            random_chains: 50,
            states: 20,
            horizon: 10,
            enumerated_chains: 5,
            alpha: 0.5,
            seed: 0,
            chain_tolerance: 1e-10,
        }
    }
}

/// Discrete identities over random chains (per-identity worst case) and
/// exhaustive bridges on `n = 6, H = 5` chains.
pub fn chain_suite(cfg: &SuiteConfig, corrupt: Option<f64>) -> Result<IdentityReport> {
    let mut total = IdentityReport::default();
    let jobs = (0..cfg.random_chains)
        .map(|i| (cfg.states, cfg.horizon, cfg.seed + i as u64))
        .chain((0..cfg.enumerated_chains).map(|i| (6, 5, cfg.seed + 10_000 + i as u64)));
    for (n, h, seed) in jobs {
        let chain = DiscreteChain::random(n, h, cfg.alpha, seed);
        let mut tilted = tilt_chain(&chain)?;
        if let Some(delta) = corrupt {
            tilted.corrupt(0, 0, 0, delta);
        }
        total.merge(&verify_identities(&chain, &tilted));
    }
    Ok(total)
}

/// Discrete identities plus the continuous closed-form checks.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    run_suite_with(cfg, None)
}

/// [`run_suite`] with `delta` added to one tilted transition of every chain,
/// to check that the suite notices.
pub fn run_suite_with(cfg: &SuiteConfig, corrupt: Option<f64>) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    for (name, dev) in &chain_suite(cfg, corrupt)?.identities {
        rep.push(format!("chain.{name}"), *dev, cfg.chain_tolerance);
    }

    let gm = GaussianMixture::symmetric_pair(2.0, 0.25)?;
    let model = PretrainedModel::new(gm, 5.0)?;
    let r = Reward::linear(vec![1.0]);
    let alpha = 1.0;

    // Boundary and drift at t = T.
    let mut boundary = 0.0f64;
    let mut drift_t = 0.0f64;
    let mut drift_fd = 0.0f64;
    for j in 0..21 {
        let x = -3.0 + 0.3 * j as f64;
        boundary = boundary.max((analytic_value(&model, &r, alpha, 5.0, &[x])? - x).abs());
        drift_t = drift_t.max((analytic_optimal_drift(&model, &r, alpha, 5.0, &[x])?[0] - 1.0).abs());
        for &t in &[0.0, 1.0, 2.5, 4.0, 4.9] {
            let h = 1e-5;
            let fd = (analytic_value(&model, &r, alpha, t, &[x + h])? - analytic_value(&model, &r, alpha, t, &[x - h])?)
                / (2.0 * h);
            let g = analytic_value_gradient(&model, &r, alpha, t, &[x])?[0];
            drift_fd = drift_fd.max((fd - g).abs() / g.abs().max(1.0));
        }
    }
    rep.push("value.terminal_boundary", boundary, 1e-12);
    rep.push("drift.terminal_equals_b_over_alpha", drift_t, 1e-12);
    rep.push("drift.finite_difference", drift_fd, 1e-6);

    // Stationary case: C_tar from ν* equals the tilted-target C_tar.
    let stationary = PretrainedModel::new(GaussianMixture::standard_normal(1), 5.0)?;
    let nu = analytic_optimal_initial(&stationary, &r, alpha)?;
    let tar = TiltedTarget::new(&stationary.data, &r, alpha)?;
    rep.push(
        "initial.c_tar_matches_target",
        (nu.log_normalizer.exp() - tar.log_normalizer().exp()).abs(),
        1e-6,
    );
    let (mean, _) = nu.gaussian.clone().expect("single component");
    let quad_mean = match &nu.grid {
        InitialGrid::OneD(g) => g.integrate(
            &g.points().iter().zip(&nu.density).map(|(x, p)| x * p).collect::<Vec<_>>(),
        ),
        InitialGrid::TwoD(_) => unreachable!(),
    };
    rep.push("initial.gaussian_mean", (quad_mean - mean[0]).abs(), 1e-8);

    // Mixture case: C_tar through the terminal law versus through ν*.
    let nu_gm = analytic_optimal_initial(&model, &r, alpha)?;
    let c_term = terminal_log_normalizer_1d(&model, &r, alpha)?;
    rep.push(
        "initial.c_tar_t_independence",
        (nu_gm.log_normalizer.exp() / c_term.exp() - 1.0).abs(),
        1e-6,
    );

    rep.push("hjb.residual", hjb_residual(&model, &r, alpha, 1e-3)?, 1e-2);
    Ok(rep)
}
