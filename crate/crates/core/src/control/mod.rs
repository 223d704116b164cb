//! Drift learning by backpropagation through simulated trajectories.
//!
//! [`neural_sde_solve`] is the shared trainer. Stage 1 learns an auxiliary
//! drift `q` on `[−T, 0]` whose time-0 law approximates the optimal initial
//! distribution; stage 2 learns the drift `u` added to the pretrained
//! reverse SDE on `[0, T]`. [`elegant_finetune`] chains value fitting and
//! both stages, and [`Sampler`] runs any of the resulting (or baseline)
//! samplers.

mod baselines;
mod net;
mod sampler;

pub use baselines::{
    fit_time_reward_model, guidance_sampler, naive_drift_sampler, train_no_kl, GuidanceField, Interval,
    NaiveField, TimeReward, TimeRewardModel, DEFAULT_GUIDANCE_LEVEL,
};
pub use net::DriftNet;
pub use sampler::{sample_finetuned, Control, InitialLaw, SampleSet, Sampler, Stage1Law};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::pretrained::PretrainedModel;
use crate::rewards::Reward;
use crate::sde::{
    derive_seed, simulate_recorded, ConstantSigma, Diffusion, Init, InitialSampler, RecordOptions, TimeGrid,
    VectorField, ZeroField,
};
use crate::value::{fit_value_mean, fit_value_soft, generate_value_dataset, Probes, SoftValueConfig, ValueModel};

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub alpha: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch, each on a fresh batch of trajectories.
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// The learning rate follows a cosine from `lr` to `lr · final_lr_fraction`;
    /// 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub clip: f64,
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            batch: 128,
            epochs: 50,
            steps_per_epoch: 1,
            lr: 1e-4,
            final_lr_fraction: 1.0,
            clip: 5.0,
            n_steps: 100,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("α must be positive, got {}", self.alpha)));
        }
        self.validate_budget()
    }

    fn validate_budget(&self) -> Result<()> {
        if self.batch == 0 || self.steps_per_epoch == 0 || self.n_steps == 0 {
            return Err(Error::invalid("stage needs batch, steps_per_epoch and n_steps ≥ 1"));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::invalid("stage needs lr > 0 and clip > 0"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::invalid("final_lr_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-epoch means over the epoch's batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    /// Set when the loss did not trend down; training is not stopped.
    pub advisory: Option<String>,
}

impl TrainLog {
    fn check_trend(&mut self) {
        let n = self.loss.len();
        if n < 4 {
            return;
        }
        let k = (n / 10).max(1);
        let head = linalg::mean(&self.loss[..k]);
        let tail = linalg::mean(&self.loss[n - k..]);
        if tail > head {
            self.advisory = Some(format!(
                "loss rose from {head:.4} (first {k} epochs) to {tail:.4} (last {k})"
            ));
        }
    }
}

/// Terminal objective: records the per-trajectory reward `[rows, 1]` from
/// the terminal states `[rows, d]`.
pub type Objective<'a> = dyn Fn(&mut Graph, Var) -> Result<Var> + 'a;

/// Where gradients flow during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum GradientWindow {
    Full,
    From(f64),
    /// A fresh uniform start time per epoch.
    RandomFrom,
}

pub(crate) struct SolveSpec<'a> {
    pub base: &'a dyn VectorField,
    pub sigma: &'a dyn Diffusion,
    pub init: Init<'a>,
    pub grid: TimeGrid,
    /// Weight of the running cost; 0 drops it.
    pub alpha: f64,
    pub window: GradientWindow,
}

const BATCH_TAG: u64 = 0xba7c;
const WINDOW_TAG: u64 = 0x3d0;

pub(crate) fn solve(
    objective: &Objective,
    drift: DriftNet,
    spec: &SolveSpec,
    cfg: &StageConfig,
) -> Result<(DriftNet, TrainLog)> {
    cfg.validate_budget()?;
    let mut drift = drift;
    let mut log = TrainLog::default();
    let n_updates = (cfg.epochs * cfg.steps_per_epoch).max(1) as f64;
    for epoch in 0..cfg.epochs {
        let record_from = match spec.window {
            GradientWindow::Full => None,
            GradientWindow::From(k) => Some(k),
            GradientWindow::RandomFrom => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, WINDOW_TAG + epoch as u64));
                Some(rng.random_range(spec.grid.t_start..spec.grid.t_end))
            }
        };
        let (mut loss_acc, mut rew_acc, mut cost_acc) = (0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_epoch {
            let it = (epoch * cfg.steps_per_epoch + step) as u64;
            let seed = derive_seed(cfg.seed, BATCH_TAG.wrapping_add(it));
            let mut rec = simulate_recorded(
                spec.base,
                &drift,
                spec.sigma,
                spec.init,
                &spec.grid,
                seed,
                0,
                cfg.batch,
                RecordOptions {
                    record_from,
                    alpha: spec.alpha,
                },
            )?;
            let g = &mut rec.graph;
            let reward = objective(g, rec.x_final)?;
            let gap = g.sub(rec.cost, reward)?;
            let total = g.sum(gap);
            let loss = g.scale(total, 1.0 / cfg.batch as f64);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, batch: step });
            }
            loss_acc += lv;
            rew_acc += linalg::mean(g.value(reward));
            cost_acc += linalg::mean(g.value(rec.cost));
            let mut grads = g.backward(loss)?;
            grads.clip_global_norm(cfg.clip);
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / n_updates).cos());
            let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            drift.params.adam_step(&grads, &AdamConfig::with_lr(lr))?;
        }
        let k = cfg.steps_per_epoch as f64;
        log.loss.push(loss_acc / k);
        log.reward.push(rew_acc / k);
        log.cost.push(cost_acc / k);
    }
    log.check_trend();
    Ok((drift, log))
}

/// Trains `drift` to maximize `E[objective(x_end) − (α/2) ∫ ‖u‖²/σ² dt]`
/// for `dx = (base + u) dt + σ dw` started from `init`.
#[allow(clippy::too_many_arguments)]
pub fn neural_sde_solve(
    objective: &Objective,
    drift: DriftNet,
    base: &dyn VectorField,
    sigma: &dyn Diffusion,
    init: Init,
    grid: &TimeGrid,
    cfg: &StageConfig,
) -> Result<(DriftNet, TrainLog)> {
    cfg.validate()?;
    let spec = SolveSpec {
        base,
        sigma,
        init,
        grid: *grid,
        alpha: cfg.alpha,
        window: GradientWindow::Full,
    };
    solve(objective, drift, &spec, cfg)
}

/// `σ̃ = 1/√T` on `[−T, 0]` from `x_fix = 0`, so that the uncontrolled
/// auxiliary process ends at `N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Spec {
    pub sigma_tilde: f64,
    pub x_fix: Vec<f64>,
    pub grid: TimeGrid,
}

impl Stage1Spec {
    pub fn reference(dim: usize, horizon: f64, n_steps: usize) -> Result<Self> {
        Ok(Self {
            sigma_tilde: 1.0 / horizon.sqrt(),
            x_fix: vec![0.0; dim],
            grid: TimeGrid::new(-horizon, 0.0, n_steps)?,
        })
    }
}

/// Learns `q̂` by maximizing `E[â(x_0) − (α/2) ∫ ‖q‖²/σ̃² dt]`.
pub fn solve_stage1(value: &ValueModel, stage: &Stage1Spec, cfg: &StageConfig) -> Result<(DriftNet, TrainLog)> {
    cfg.validate()?;
    if !(stage.sigma_tilde > 0.0) {
        return Err(Error::invalid("σ̃ must be positive"));
    }
    let d = stage.x_fix.len();
    let drift = DriftNet::new(d, stage.grid.horizon(), &cfg.hidden, derive_seed(cfg.seed, 1))?;
    let objective = |g: &mut Graph, x: Var| value.record(g, x);
    neural_sde_solve(
        &objective,
        drift,
        &ZeroField { dim: d },
        &ConstantSigma(stage.sigma_tilde),
        Init::Point(&stage.x_fix),
        &stage.grid,
        cfg,
    )
}

/// Learns `û` by maximizing `E[r(x_T) − (α/2) ∫ ‖u‖²/σ² dt]` on top of the
/// pretrained drift, starting from `initial`.
pub fn solve_stage2(
    model: &PretrainedModel,
    reward: &Reward,
    initial: &dyn InitialSampler,
    cfg: &StageConfig,
) -> Result<(DriftNet, TrainLog)> {
    cfg.validate()?;
    let drift = DriftNet::new(model.dim(), model.horizon, &cfg.hidden, derive_seed(cfg.seed, 2))?;
    let objective = |g: &mut Graph, x: Var| reward.record(g, x);
    neural_sde_solve(
        &objective,
        drift,
        model,
        &model.sigma(),
        Init::Sampler(initial),
        &model.grid(cfg.n_steps)?,
        cfg,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueEstimator {
    #[default]
    Soft,
    Mean,
}

/// Value-fitting settings of the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueStageConfig {
    pub estimator: ValueEstimator,
    pub soft: SoftValueConfig,
    /// Dataset size of the mean estimator.
    pub mean_samples: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for ValueStageConfig {
    fn default() -> Self {
        Self {
            estimator: ValueEstimator::Soft,
            soft: SoftValueConfig::default(),
            mean_samples: 10_000,
            n_steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElegantConfig {
    pub alpha: f64,
    pub value: ValueStageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for ElegantConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            value: ValueStageConfig::default(),
            stage1: StageConfig {
                seed: 1,
                ..StageConfig::default()
            },
            stage2: StageConfig {
                seed: 2,
                ..StageConfig::default()
            },
        }
    }
}

impl ElegantConfig {
    /// The same α for every stage.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.stage1.alpha = alpha;
        self.stage2.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("α must be positive, got {}", self.alpha)));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.alpha != self.alpha {
                return Err(Error::invalid(format!(
                    "{name}.alpha = {} differs from alpha = {}",
                    s.alpha, self.alpha
                )));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneLogs {
    pub value: Vec<f64>,
    pub stage1: TrainLog,
    pub stage2: TrainLog,
}

/// Output of [`elegant_finetune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTunedModel {
    pub model: PretrainedModel,
    pub alpha: f64,
    pub value: ValueModel,
    pub stage1: Stage1Spec,
    pub q: DriftNet,
    pub u: DriftNet,
    pub logs: FineTuneLogs,
    pub config_hash: String,
}

const MANIFEST_FORMAT: &str = "elegant-finetuned";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    model: PretrainedModel,
    alpha: f64,
    stage1: Stage1Spec,
    logs: FineTuneLogs,
    config_hash: String,
    files: ManifestFiles,
}

#[derive(Serialize, Deserialize)]
struct ManifestFiles {
    value: String,
    q: String,
    u: String,
}

impl FineTunedModel {
    pub const MANIFEST: &'static str = "finetuned.json";
    pub const VALUE_FILE: &'static str = "value.json";
    pub const Q_FILE: &'static str = "stage1_q.json";
    pub const U_FILE: &'static str = "stage2_u.json";

    /// Writes the three checkpoints and a manifest into `dir`; returns the
    /// paths written.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.value.save(dir.join(Self::VALUE_FILE))?;
        self.q.save(dir.join(Self::Q_FILE))?;
        self.u.save(dir.join(Self::U_FILE))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            model: self.model.clone(),
            alpha: self.alpha,
            stage1: self.stage1.clone(),
            logs: self.logs.clone(),
            config_hash: self.config_hash.clone(),
            files: ManifestFiles {
                value: Self::VALUE_FILE.into(),
                q: Self::Q_FILE.into(),
                u: Self::U_FILE.into(),
            },
        };
        std::fs::write(dir.join(Self::MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok([Self::VALUE_FILE, Self::Q_FILE, Self::U_FILE, Self::MANIFEST]
            .iter()
            .map(|f| dir.join(f))
            .collect())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(Self::MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {MANIFEST_FORMAT} v{MANIFEST_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        let need = |f: &str| {
            let p = dir.join(f);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Checkpoint(format!("missing checkpoint {}", p.display())))
            }
        };
        Ok(Self {
            value: ValueModel::load(need(&m.files.value)?)?,
            q: DriftNet::load(need(&m.files.q)?)?,
            u: DriftNet::load(need(&m.files.u)?)?,
            model: m.model,
            alpha: m.alpha,
            stage1: m.stage1,
            logs: m.logs,
            config_hash: m.config_hash,
        })
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            model: self.model.clone(),
            control: Control::Net(self.u.clone()),
            initial: InitialLaw::Stage1(Stage1Law {
                q: self.q.clone(),
                spec: self.stage1.clone(),
            }),
            n_steps: crate::pretrained::DEFAULT_STEPS,
        }
    }
}

/// Value fit, stage 1, stage 2.
pub fn elegant_finetune(
    model: &PretrainedModel,
    reward: &Reward,
    cfg: &ElegantConfig,
) -> Result<FineTunedModel> {
    cfg.validate()?;
    let vc = &cfg.value;
    let value = (|| -> Result<(ValueModel, Vec<f64>)> {
        let grid = model.grid(vc.n_steps)?;
        let fitted = match vc.estimator {
            ValueEstimator::Soft => fit_value_soft(model, reward, cfg.alpha, &grid, &vc.soft, vc.seed)?.0,
            ValueEstimator::Mean => {
                let ds = generate_value_dataset(model, reward, vc.mean_samples, &grid, Probes::Initial, vc.seed)?;
                fit_value_mean(&ds, &vc.soft.fit)?
            }
        };
        let log = fitted.log().to_vec();
        Ok((fitted, log))
    })()
    .map_err(|e| e.in_stage("value"))?;
    let (value, value_log) = value;

    let stage1 = Stage1Spec::reference(model.dim(), model.horizon, cfg.stage1.n_steps).map_err(|e| e.in_stage("stage1"))?;
    let (q, log1) = solve_stage1(&value, &stage1, &cfg.stage1).map_err(|e| e.in_stage("stage1"))?;
    let law = Stage1Law {
        q: q.clone(),
        spec: stage1.clone(),
    };
    let (u, log2) = solve_stage2(model, reward, &law, &cfg.stage2).map_err(|e| e.in_stage("stage2"))?;
    Ok(FineTunedModel {
        model: model.clone(),
        alpha: cfg.alpha,
        value,
        stage1,
        q,
        u,
        logs: FineTuneLogs {
            value: value_log,
            stage1: log1,
            stage2: log2,
        },
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests;
