//! Reward functions, the nominal-reward fitting protocol and the tilted
//! target `p_tar ∝ exp(r/α) p_data`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, Regressor};
use crate::linalg::{self, Matrix};
use crate::metrics::{Cdf, GridDensity};
use crate::pretrained::{Component, GaussianMixture};
use crate::quad::{Grid1d, Grid2d};

/// A Gaussian bump `height · exp(−‖x − center‖² / (2 width²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub height: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// `b·x + c`.
    Linear { b: Vec<f64>, c: f64 },
    /// `Σ_j a_j x_j² + b·x + c` with every `a_j ≤ 0`.
    Quadratic { a: Vec<f64>, b: Vec<f64>, c: f64 },
    /// `−‖x − peak‖² + Σ bumps`: a concave bowl with bounded local features.
    BumpTrap { peak: Vec<f64>, bumps: Vec<Bump> },
    /// A fitted network.
    Net(Box<Regressor>),
}

impl Reward {
    pub fn linear(b: Vec<f64>) -> Self {
        Reward::Linear { b, c: 0.0 }
    }

    pub fn constant(c: f64, dim: usize) -> Self {
        Reward::Linear {
            b: vec![0.0; dim],
            c,
        }
    }

    pub fn quadratic(a: Vec<f64>, b: Vec<f64>, c: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::invalid("quadratic reward: a and b differ in length"));
        }
        if a.iter().any(|&v| v > 0.0) {
            return Err(Error::invalid("quadratic reward needs a negative-semidefinite diagonal"));
        }
        Ok(Reward::Quadratic { a, b, c })
    }

    /// The default genuine reward of the overoptimization experiment in
    /// one dimension: a bowl at `2` with two small bumps.
    pub fn default_genuine() -> Self {
        Reward::BumpTrap {
            peak: vec![2.0],
            bumps: vec![
                Bump {
                    center: vec![1.0],
                    height: 0.5,
                    width: 0.3,
                },
                Bump {
                    center: vec![-2.5],
                    height: 1.0,
                    width: 0.4,
                },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Reward::Linear { b, .. } | Reward::Quadratic { b, .. } => b.len(),
            Reward::BumpTrap { peak, .. } => peak.len(),
            Reward::Net(r) => r.input_dim(),
        }
    }

    /// `Some(b)` when the reward is affine, `b·x + c`.
    pub fn as_linear(&self) -> Option<(&[f64], f64)> {
        match self {
            Reward::Linear { b, c } => Some((b, *c)),
            _ => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Reward::Linear { b, .. } if b.iter().all(|&v| v == 0.0))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Reward::Linear { b, c } => linalg::dot(b, x) + c,
            Reward::Quadratic { a, b, c } => {
                x.iter().zip(a).map(|(xi, ai)| ai * xi * xi).sum::<f64>() + linalg::dot(b, x) + c
            }
            Reward::BumpTrap { peak, bumps } => {
                let bowl: f64 = x.iter().zip(peak).map(|(xi, p)| (xi - p) * (xi - p)).sum();
                -bowl + bumps.iter().map(|bp| bump_value(bp, x)).sum::<f64>()
            }
            Reward::Net(r) => r.predict_one(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Reward::Linear { b, .. } => b.clone(),
            Reward::Quadratic { a, b, .. } => x
                .iter()
                .zip(a.iter().zip(b))
                .map(|(xi, (ai, bi))| 2.0 * ai * xi + bi)
                .collect(),
            Reward::BumpTrap { peak, bumps } => {
                let mut g: Vec<f64> = x.iter().zip(peak).map(|(xi, p)| -2.0 * (xi - p)).collect();
                for bp in bumps {
                    let v = bump_value(bp, x);
                    for (gj, (xj, cj)) in g.iter_mut().zip(x.iter().zip(&bp.center)) {
                        *gj -= v * (xj - cj) / (bp.width * bp.width);
                    }
                }
                g
            }
            Reward::Net(r) => r
                .gradient(&Matrix::from_vec(1, x.len(), x.to_vec()))
                .expect("scalar network")
                .data,
        }
    }

    /// Values for every row of `xs`.
    pub fn values(&self, xs: &Matrix) -> Vec<f64> {
        match self {
            Reward::Net(r) => r.predict(xs),
            _ => xs.rows_iter().map(|x| self.value(x)).collect(),
        }
    }

    /// Gradients for every row of `xs`.
    pub fn gradients(&self, xs: &Matrix) -> Result<Matrix> {
        match self {
            Reward::Net(r) => r.gradient(xs),
            _ => {
                let data = xs.rows_iter().flat_map(|x| self.gradient(x)).collect();
                Ok(Matrix::from_vec(xs.rows, xs.cols, data))
            }
        }
    }

    /// Records `r(x)` for `x: [rows, d]`; returns `[rows, 1]`.
    pub fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if let Reward::Net(r) = self {
            return r.record(g, x);
        }
        let (rows, d) = match g.shape(x) {
            [r, c] if *c == self.dim() => (*r, *c),
            s => {
                return Err(Error::Shape {
                    op: "reward",
                    lhs: s.to_vec(),
                    rhs: vec![self.dim()],
                })
            }
        };
        let xs = Matrix::from_vec(rows, d, g.value(x).to_vec());
        let vals = self.values(&xs);
        let jac = self.gradients(&xs)?.data;
        g.external(x, 1, vals, jac)
    }
}

fn bump_value(bp: &Bump, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(&bp.center).map(|(a, b)| (a - b) * (a - b)).sum();
    bp.height * (-0.5 * r2 / (bp.width * bp.width)).exp()
}

/// Maximal tolerated mass in the outer strip of a quadrature window.
pub const TAIL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
enum Form {
    Closed(GaussianMixture),
    OneD { grid: Grid1d, density: Vec<f64> },
    TwoD { grid: Grid2d, density: Vec<f64> },
}

/// `p_tar(x) = exp(r(x)/α) p_data(x) / C_tar`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedTarget {
    pub base: GaussianMixture,
    pub alpha: f64,
    log_normalizer: f64,
    form: Form,
}

/// Mass of `values` (already normalized) lying in the outer 5% strip of
/// each axis.
fn strip_mass_1d(grid: &Grid1d, density: &[f64]) -> f64 {
    let w = grid.weights();
    let edge = grid.n / 20;
    (0..grid.n)
        .filter(|&i| i < edge || i >= grid.n - edge)
        .map(|i| w[i] * density[i])
        .sum()
}

impl TiltedTarget {
    /// Closed form for affine rewards, Simpson quadrature on the default
    /// window otherwise.
    pub fn new(base: &GaussianMixture, reward: &Reward, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("α must be positive, got {alpha}")));
        }
        if reward.dim() != base.dim() {
            return Err(Error::invalid("reward and data dimensions differ"));
        }
        match reward.as_linear() {
            Some((b, c)) => Ok(Self::linear(base, b, c, alpha)),
            None => match base.dim() {
                1 => Self::on_grid_1d(base, reward, alpha, Grid1d::standard()),
                2 => Self::on_grid_2d(base, reward, alpha, Grid2d::standard()),
                d => Err(Error::invalid(format!(
                    "quadrature targets support d ∈ {{1, 2}}, got d = {d}"
                ))),
            },
        }
    }

    fn linear(base: &GaussianMixture, b: &[f64], c: f64, alpha: f64) -> Self {
        let lambda: Vec<f64> = b.iter().map(|v| v / alpha).collect();
        let l2 = linalg::norm_sq(&lambda);
        let log_w: Vec<f64> = base
            .components()
            .iter()
            .map(|k| k.weight.ln() + linalg::dot(&lambda, &k.mean) + 0.5 * l2 * k.variance)
            .collect();
        let means = base
            .components()
            .iter()
            .map(|k| k.mean.iter().zip(&lambda).map(|(m, l)| m + k.variance * l).collect())
            .collect();
        let vars = base.components().iter().map(|k| k.variance).collect();
        let tilted = GaussianMixture::from_log_weights(&log_w, means, vars).expect("valid tilt");
        Self {
            base: base.clone(),
            alpha,
            log_normalizer: c / alpha + linalg::log_sum_exp(&log_w),
            form: Form::Closed(tilted),
        }
    }

    /// Quadrature-normalized tilt on a 1-D grid.
    pub fn on_grid_1d(base: &GaussianMixture, reward: &Reward, alpha: f64, grid: Grid1d) -> Result<Self> {
        let pts = grid.points();
        let log_u: Vec<f64> = pts
            .iter()
            .map(|&x| reward.value(&[x]) / alpha + base.log_density(&[x]))
            .collect();
        let (density, log_c) = normalize_log(&log_u, &grid.weights())?;
        let tail = strip_mass_1d(&grid, &density);
        if tail > TAIL_TOLERANCE {
            return Err(Error::GridTooSmall { tail_mass: tail });
        }
        Ok(Self {
            base: base.clone(),
            alpha,
            log_normalizer: log_c,
            form: Form::OneD { grid, density },
        })
    }

    /// Quadrature-normalized tilt on a 2-D tensor grid.
    pub fn on_grid_2d(base: &GaussianMixture, reward: &Reward, alpha: f64, grid: Grid2d) -> Result<Self> {
        let pts = grid.points();
        let log_u: Vec<f64> = pts
            .iter()
            .map(|p| reward.value(p) / alpha + base.log_density(p))
            .collect();
        let weights = grid.weights();
        let (density, log_c) = normalize_log(&log_u, &weights)?;
        let (ex, ey) = (grid.x.n / 20, grid.y.n / 20);
        let tail: f64 = (0..grid.len())
            .filter(|&k| {
                let (i, j) = (k / grid.y.n, k % grid.y.n);
                i < ex || i >= grid.x.n - ex || j < ey || j >= grid.y.n - ey
            })
            .map(|k| weights[k] * density[k])
            .sum();
        if tail > TAIL_TOLERANCE {
            return Err(Error::GridTooSmall { tail_mass: tail });
        }
        Ok(Self {
            base: base.clone(),
            alpha,
            log_normalizer: log_c,
            form: Form::TwoD { grid, density },
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// `log C_tar`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// The tilted mixture when the reward is affine.
    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match &self.form {
            Form::Closed(m) => Some(m),
            _ => None,
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match &self.form {
            Form::Closed(m) => m.density(x),
            Form::OneD { grid, density } => interp_1d(grid, density, x[0]),
            Form::TwoD { grid, density } => {
                let (i, fx) = locate(&grid.x, x[0]);
                let (j, fy) = locate(&grid.y, x[1]);
                match (i, j) {
                    (Some(i), Some(j)) => {
                        let n = grid.y.n;
                        let at = |a: usize, b: usize| density[a * n + b];
                        (1.0 - fx) * (1.0 - fy) * at(i, j)
                            + fx * (1.0 - fy) * at(i + 1, j)
                            + (1.0 - fx) * fy * at(i, j + 1)
                            + fx * fy * at(i + 1, j + 1)
                    }
                    _ => 0.0,
                }
            }
        }
    }

    /// One-dimensional CDF view of the target.
    pub fn cdf_view(&self) -> Result<Box<dyn Cdf + '_>> {
        match &self.form {
            Form::Closed(m) if m.dim() == 1 => Ok(Box::new(m.clone())),
            Form::OneD { grid, density } => Ok(Box::new(GridDensity::new(grid.points(), density.clone())?)),
            _ => Err(Error::invalid("a CDF view needs a one-dimensional target")),
        }
    }

    /// `E_{p_tar}[g]` by quadrature on the default window (d = 1) .
    pub fn expectation_1d(&self, g: impl Fn(f64) -> f64) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::invalid("expectation_1d needs d = 1"));
        }
        let grid = match &self.form {
            Form::OneD { grid, .. } => *grid,
            _ => Grid1d::standard(),
        };
        Ok(grid.integrate_fn(|x| g(x) * self.density(&[x])))
    }

    /// Draws `n` samples; closed form only, or by inverse CDF in one dimension.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        match &self.form {
            Form::Closed(m) => Ok(m.sample(n, seed)),
            Form::OneD { grid, density } => {
                use rand::{Rng, SeedableRng};
                let gd = GridDensity::new(grid.points(), density.clone())?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let (mut lo, mut hi) = (grid.lo, grid.hi);
                        for _ in 0..60 {
                            let mid = 0.5 * (lo + hi);
                            if gd.cdf(mid) < u {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        0.5 * (lo + hi)
                    })
                    .collect();
                Ok(Matrix::from_vec(n, 1, data))
            }
            Form::TwoD { .. } => Err(Error::invalid("sampling a 2-D quadrature target is not supported")),
        }
    }
}

fn locate(grid: &Grid1d, x: f64) -> (Option<usize>, f64) {
    if x < grid.lo || x > grid.hi {
        return (None, 0.0);
    }
    let h = grid.h();
    let i = (((x - grid.lo) / h).floor() as usize).min(grid.n - 2);
    (Some(i), (x - grid.point(i)) / h)
}

fn interp_1d(grid: &Grid1d, density: &[f64], x: f64) -> f64 {
    match locate(grid, x) {
        (Some(i), f) => (1.0 - f) * density[i] + f * density[i + 1],
        (None, _) => 0.0,
    }
}

/// Normalizes `exp(log_u)` against quadrature weights; returns the density
/// values and the log normalizer.
fn normalize_log(log_u: &[f64], weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_u.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("tilted density".into()));
    }
    let terms: Vec<f64> = log_u.iter().zip(weights).map(|(l, w)| l + w.ln()).collect();
    let log_c = linalg::log_sum_exp(&terms);
    if !log_c.is_finite() {
        return Err(Error::NonFinite("tilted normalizer".into()));
    }
    Ok((log_u.iter().map(|l| (l - log_c).exp()).collect(), log_c))
}

/// `∫ p log(p/q)` from density values at quadrature nodes with `weights`.
pub fn kl_between_densities(weights: &[f64], p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != weights.len() {
        return Err(Error::invalid("densities and weights must share one grid"));
    }
    let mut kl = 0.0;
    for (i, ((w, pi), qi)) in weights.iter().zip(p).zip(q).enumerate() {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(Error::SupportViolation(i));
            }
            kl += w * pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `KL(p_tar ‖ p_data)` on the default 1-D window.
pub fn target_kl_1d(target: &TiltedTarget) -> Result<f64> {
    let grid = Grid1d::standard();
    let pts = grid.points();
    let p: Vec<f64> = pts.iter().map(|&x| target.density(&[x])).collect();
    let q: Vec<f64> = pts.iter().map(|&x| target.base.density(&[x])).collect();
    kl_between_densities(&grid.weights(), &p, &q)
}

/// Result of [`fit_nominal_reward`].
#[derive(Debug, Clone)]
pub struct NominalFit {
    pub reward: Reward,
    pub train_mse: f64,
    pub heldout_mse: Option<f64>,
}

/// Fits a network reward to pairs `(x, r*(x))` by least squares.
pub fn fit_nominal_reward(x: &Matrix, y: &[f64], cfg: &FitConfig) -> Result<NominalFit> {
    let reg = Regressor::fit(x, y, cfg)?;
    Ok(NominalFit {
        train_mse: reg.train_mse,
        heldout_mse: reg.heldout_mse,
        reward: Reward::Net(Box::new(reg)),
    })
}

/// Draws `n` inputs from `data`, keeps those accepted by `keep`, and labels
/// them with the genuine reward.
pub fn truncated_dataset(
    data: &GaussianMixture,
    genuine: &Reward,
    n: usize,
    seed: u64,
    keep: impl Fn(&[f64]) -> bool,
) -> (Matrix, Vec<f64>) {
    let raw = data.sample(n, seed);
    let rows: Vec<Vec<f64>> = raw.rows_iter().filter(|x| keep(x)).map(<[f64]>::to_vec).collect();
    let x = if rows.is_empty() {
        Matrix::zeros(0, data.dim())
    } else {
        Matrix::from_rows(&rows)
    };
    let y = genuine.values(&x);
    (x, y)
}

/// Samples of the one-component mixture `N(mean, variance)`; a convenience
/// for building single-mode datasets.
pub fn single_mode(component: &Component) -> GaussianMixture {
    GaussianMixture::gaussian(component.mean.clone(), component.variance).expect("valid component")
}
