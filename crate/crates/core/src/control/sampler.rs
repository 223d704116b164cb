use serde::{Deserialize, Serialize};

use super::{DriftNet, GuidanceField, NaiveField, Stage1Spec, TimeRewardModel};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::metrics::kl_path_metric;
use crate::oracle::AnalyticDrift;
use crate::pretrained::{PretrainedModel, DEFAULT_STEPS};
use crate::sde::{
    derive_seed, simulate_batch_from, simulate_terminal, ConstantSigma, GaussianInit, Init, InitialSampler, SdeSpec,
    SumField, TimeGrid, Trajectory, VectorField,
};

/// The drift added to the pretrained reverse SDE.
#[derive(Debug, Clone)]
pub enum Control {
    Zero { dim: usize },
    Net(DriftNet),
    Naive(NaiveField),
    Guidance(GuidanceField<TimeRewardModel>),
    Analytic(AnalyticDrift),
}

impl VectorField for Control {
    fn dim(&self) -> usize {
        match self {
            Control::Zero { dim } => *dim,
            Control::Net(n) => n.dim(),
            Control::Naive(f) => f.dim(),
            Control::Guidance(f) => f.dim(),
            Control::Analytic(f) => f.dim(),
        }
    }

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        match self {
            Control::Zero { dim } => Matrix::zeros(xs.rows, *dim),
            Control::Net(n) => n.eval(t, xs),
            Control::Naive(f) => f.eval(t, xs),
            Control::Guidance(f) => f.eval(t, xs),
            Control::Analytic(f) => f.eval(t, xs),
        }
    }
}

/// The learned auxiliary process on `[−T, 0]`; its time-0 law is `ν̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Law {
    pub q: DriftNet,
    pub spec: Stage1Spec,
}

impl InitialSampler for Stage1Law {
    fn dim(&self) -> usize {
        self.spec.x_fix.len()
    }

    fn sample(&self, seed: u64, first_stream: u64, count: usize) -> Result<Matrix> {
        let sigma = ConstantSigma(self.spec.sigma_tilde);
        let spec = SdeSpec::new(&self.q, &sigma);
        simulate_terminal(&spec, Init::Point(&self.spec.x_fix), &self.spec.grid, seed, first_stream, count)
    }
}

#[derive(Debug, Clone)]
pub enum InitialLaw {
    /// `ν_ini = N(0, I)`.
    Reference,
    Stage1(Stage1Law),
}

/// Terminal samples with per-trajectory path KL terms.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub terminal: Matrix,
    /// `∫ ‖u‖²/(2σ²) dt` along each stage-2 path.
    pub kl_stage2: Vec<f64>,
    /// `∫ ‖q‖²/(2σ̃²) dt` along each stage-1 path, when there is a stage 1.
    pub kl_stage1: Option<Vec<f64>>,
    pub stage1_paths: Vec<Trajectory>,
    pub stage2_paths: Vec<Trajectory>,
}

/// Initial law followed by `dx = (f + control) dt + dw` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub model: PretrainedModel,
    pub control: Control,
    pub initial: InitialLaw,
    /// Euler steps on `[0, T]`.
    pub n_steps: usize,
}

const PHASE1_TAG: u64 = 0xf1;
const PHASE2_TAG: u64 = 0xf2;

impl Sampler {
    pub fn pretrained(model: &PretrainedModel) -> Self {
        Self {
            model: model.clone(),
            control: Control::Zero { dim: model.dim() },
            initial: InitialLaw::Reference,
            n_steps: DEFAULT_STEPS,
        }
    }

    pub fn with_control(model: &PretrainedModel, control: Control) -> Self {
        Self {
            model: model.clone(),
            control,
            initial: InitialLaw::Reference,
            n_steps: DEFAULT_STEPS,
        }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        self.model.grid(self.n_steps)
    }

    fn run_phase2<T>(&self, start: Option<&Matrix>, run: impl FnOnce(&SdeSpec, Init) -> Result<T>) -> Result<T> {
        let field = SumField(&self.model, &self.control);
        let sigma = self.model.sigma();
        let spec = SdeSpec::new(&field, &sigma);
        let reference = GaussianInit::standard(self.dim());
        let init = match start {
            Some(x0) => Init::States(x0),
            None => Init::Sampler(&reference),
        };
        run(&spec, init)
    }

    /// Terminal states only.
    pub fn sample_terminal(&self, count: usize, seed: u64) -> Result<Matrix> {
        let grid = self.grid()?;
        let s2 = derive_seed(seed, PHASE2_TAG);
        let x0 = match &self.initial {
            InitialLaw::Reference => None,
            InitialLaw::Stage1(law) => Some(law.sample(derive_seed(seed, PHASE1_TAG), 0, count)?),
        };
        self.run_phase2(x0.as_ref(), |spec, init| {
            simulate_terminal(spec, init, &grid, s2, 0, count)
        })
    }

    /// Samples with full paths of both phases and their path KL terms.
    pub fn sample(&self, count: usize, seed: u64) -> Result<SampleSet> {
        let grid = self.grid()?;
        let s2 = derive_seed(seed, PHASE2_TAG);
        let (stage1_paths, kl_stage1, x0) = match &self.initial {
            InitialLaw::Reference => (Vec::new(), None, None),
            InitialLaw::Stage1(law) => {
                let sigma = ConstantSigma(law.spec.sigma_tilde);
                let spec = SdeSpec::new(&law.q, &sigma);
                let paths = simulate_batch_from(
                    &spec,
                    Init::Point(&law.spec.x_fix),
                    &law.spec.grid,
                    derive_seed(seed, PHASE1_TAG),
                    0,
                    count,
                )?;
                let kl = kl_path_metric(&paths, &law.q, &sigma)?;
                let d = self.dim();
                let mut x0 = Matrix::zeros(count, d);
                for (r, p) in paths.iter().enumerate() {
                    x0.row_mut(r).copy_from_slice(p.terminal());
                }
                (paths, Some(kl), Some(x0))
            }
        };
        let stage2_paths = self.run_phase2(x0.as_ref(), |spec, init| {
            simulate_batch_from(spec, init, &grid, s2, 0, count)
        })?;
        let kl_stage2 = match &self.control {
            Control::Zero { .. } => vec![0.0; count],
            c => kl_path_metric(&stage2_paths, c, &self.model.sigma())?,
        };
        let d = self.dim();
        let mut terminal = Matrix::zeros(count, d);
        for (r, p) in stage2_paths.iter().enumerate() {
            terminal.row_mut(r).copy_from_slice(p.terminal());
        }
        Ok(SampleSet {
            terminal,
            kl_stage2,
            kl_stage1,
            stage1_paths,
            stage2_paths,
        })
    }
}

/// Two-phase sampling from a fine-tuned model.
pub fn sample_finetuned(ft: &super::FineTunedModel, count: usize, seed: u64) -> Result<SampleSet> {
    ft.sampler().sample(count, seed)
}
