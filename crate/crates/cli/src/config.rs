//! Experiment configuration files.
//!
//! One TOML file describes one experiment. Unknown keys are rejected, and
//! every random choice is driven by the top-level `seed` together with the
//! per-section seeds, so a file and its seeds pin down the whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use elegant::control::{ElegantConfig, Interval, StageConfig, ValueStageConfig, DEFAULT_GUIDANCE_LEVEL};
use elegant::fit::FitConfig;
use elegant::pretrained::{Component, GaussianMixture, PretrainedModel, DEFAULT_HORIZON, DEFAULT_STEPS};
use elegant::rewards::{Bump, Reward};
use elegant::sde::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root of every derived seed.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub model: ModelSpec,
    pub reward: RewardSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<NominalSpec>,
    pub method: Method,
    #[serde(default)]
    pub value: ValueStageConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
    #[serde(default)]
    pub guidance_model: GuidanceModelSpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub components: Vec<Component>,
    pub horizon: f64,
    /// Euler steps used when sampling.
    pub n_steps: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            components: GaussianMixture::symmetric_pair(2.0, 0.25).expect("valid").components().to_vec(),
            horizon: DEFAULT_HORIZON,
            n_steps: DEFAULT_STEPS,
        }
    }
}

/// The genuine reward, or the only reward when no nominal fit is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    Linear {
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    BumpTrap {
        peak: Vec<f64>,
        bumps: Vec<Bump>,
    },
    /// The one-dimensional bowl-with-bumps landscape.
    DefaultGenuine,
}

impl RewardSpec {
    pub fn build(&self) -> Result<Reward, ConfigError> {
        match self {
            RewardSpec::Linear { b, c } => Ok(Reward::Linear { b: b.clone(), c: *c }),
            RewardSpec::Quadratic { a, b, c } => {
                Reward::quadratic(a.clone(), b.clone(), *c).map_err(|e| bad("reward", e))
            }
            RewardSpec::BumpTrap { peak, bumps } => {
                if bumps.iter().any(|bp| bp.center.len() != peak.len() || !(bp.width > 0.0)) {
                    return Err(bad("reward.bumps", "every bump needs a center of the peak's dimension and width > 0"));
                }
                Ok(Reward::BumpTrap {
                    peak: peak.clone(),
                    bumps: bumps.clone(),
                })
            }
            RewardSpec::DefaultGenuine => Ok(Reward::default_genuine()),
        }
    }
}

/// Fits the nominal reward `r` to the genuine reward `r*` on data from a
/// restricted region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalSpec {
    /// Draw inputs from this mixture component only; all components when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    #[serde(default = "nominal_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
}

fn nominal_n() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Elegant,
    NoKl,
    Truncation {
        /// Defaults to `0.8 T`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
    },
    RandomK,
    Naive,
    Guidance {
        #[serde(default = "guidance_level")]
        gamma: f64,
        y_con: f64,
        #[serde(default = "one")]
        sigma_g: f64,
    },
    Pretrained,
}

fn guidance_level() -> f64 {
    DEFAULT_GUIDANCE_LEVEL
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Elegant => "elegant",
            Method::NoKl => "no_kl",
            Method::Truncation { .. } => "truncation",
            Method::RandomK => "random_k",
            Method::Naive => "naive",
            Method::Guidance { .. } => "guidance",
            Method::Pretrained => "pretrained",
        }
    }

    pub fn interval(&self, horizon: f64) -> Option<Interval> {
        match self {
            Method::NoKl => Some(Interval::Full),
            Method::Truncation { k } => Some(k.map_or(Interval::truncation(horizon), |k| Interval::Truncation { k })),
            Method::RandomK => Some(Interval::Random),
            _ => None,
        }
    }
}

/// The per-time reward model behind the guidance baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceModelSpec {
    /// Probe times; 11 evenly spaced times on `[0, T]` when empty.
    pub times: Vec<f64>,
    pub rollouts: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for GuidanceModelSpec {
    fn default() -> Self {
        Self {
            times: Vec::new(),
            rollouts: 2000,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n: usize,
    pub seed: u64,
    pub bins: usize,
    /// Report W1 to the tilted target `exp(r/α) p_data / C`.
    pub target: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            seed: 0,
            bins: 40,
            target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(bad("alpha", "must be positive"));
        }
        let model = self.model().map_err(|e| bad("model", e.0))?;
        let reward = self.reward.build()?;
        if reward.dim() != model.dim() {
            return Err(bad("reward", format!("dimension {} differs from the model's {}", reward.dim(), model.dim())));
        }
        if self.model.n_steps == 0 {
            return Err(bad("model.n_steps", "must be at least 1"));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.alpha != StageConfig::default().alpha && s.alpha != self.alpha {
                return Err(bad(
                    &format!("{name}.alpha"),
                    format!("{} conflicts with alpha = {}; set alpha at the top level only", s.alpha, self.alpha),
                ));
            }
            if s.epochs == 0 && !matches!(self.method, Method::Pretrained | Method::Naive | Method::Guidance { .. }) {
                return Err(bad(&format!("{name}.epochs"), "must be at least 1"));
            }
            StageConfig {
                alpha: self.alpha,
                ..s.clone()
            }
            .validate()
            .map_err(|e| bad(name, e))?;
        }
        if let Some(nom) = &self.nominal {
            if let Some(c) = nom.component {
                if c >= self.model.components.len() {
                    return Err(bad("nominal.component", format!("no component {c}")));
                }
            }
            if nom.n == 0 {
                return Err(bad("nominal.n", "must be at least 1"));
            }
            nom.fit.validate().map_err(|e| bad("nominal.fit", e))?;
        }
        match &self.method {
            Method::Truncation { k: Some(k) } if !(0.0..self.model.horizon).contains(k) => {
                return Err(bad("method.k", format!("{k} outside [0, {})", self.model.horizon)));
            }
            Method::Guidance { gamma, sigma_g, .. } if !(*gamma >= 0.0) || !(*sigma_g > 0.0) => {
                return Err(bad("method", "guidance needs gamma ≥ 0 and sigma_g > 0"));
            }
            _ => {}
        }
        if self.evaluation.n < 2 {
            return Err(bad("evaluation.n", "must be at least 2"));
        }
        if self.evaluation.bins == 0 {
            return Err(bad("evaluation.bins", "must be at least 1"));
        }
        if let Some(sw) = &self.sweep {
            if sw.alphas.is_empty() {
                return Err(bad("sweep.alphas", "needs at least one value"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<PretrainedModel, ConfigError> {
        let data = GaussianMixture::new(self.model.components.clone()).map_err(|e| bad("model.components", e))?;
        PretrainedModel::new(data, self.model.horizon).map_err(|e| bad("model.horizon", e))
    }

    /// Replaces the root seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// A section seed combined with the root seed.
    pub fn seed_for(&self, section: u64) -> u64 {
        derive_seed(self.seed, section)
    }

    /// The pipeline settings with α applied to every stage and seeds
    /// derived from the root seed.
    pub fn elegant(&self) -> ElegantConfig {
        let mut cfg = ElegantConfig {
            alpha: self.alpha,
            value: self.value.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
        }
        .with_alpha(self.alpha);
        cfg.value.seed = self.seed_for(cfg.value.seed);
        cfg.stage1.seed = self.seed_for(cfg.stage1.seed.wrapping_add(1));
        cfg.stage2.seed = self.seed_for(cfg.stage2.seed.wrapping_add(2));
        cfg
    }

    /// Stage-2 settings for the baselines trained without the KL term.
    pub fn baseline_stage(&self) -> StageConfig {
        StageConfig {
            alpha: self.alpha,
            seed: self.seed_for(self.stage2.seed.wrapping_add(2)),
            ..self.stage2.clone()
        }
    }

    pub fn guidance_times(&self) -> Vec<f64> {
        if self.guidance_model.times.is_empty() {
            (0..=10).map(|j| self.model.horizon * j as f64 / 10.0).collect()
        } else {
            self.guidance_model.times.clone()
        }
    }
}
