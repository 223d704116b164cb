//! Evaluation: reward, path KL and diversity, plus distances to analytic targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{SampleSet, Sampler};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::pretrained::GaussianMixture;
use crate::rewards::{Reward, TiltedTarget};
use crate::sde::{derive_seed, Diffusion, Trajectory, VectorField};

/// A one-dimensional law given through its CDF.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
    /// Interval outside which the law has negligible mass.
    fn support(&self) -> (f64, f64);
}

impl Cdf for GaussianMixture {
    fn cdf(&self, x: f64) -> f64 {
        self.cdf_1d(x)
    }

    fn support(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in self.components() {
            let w = 12.0 * c.variance.sqrt();
            lo = lo.min(c.mean[0] - w);
            hi = hi.max(c.mean[0] + w);
        }
        (lo, hi)
    }
}

/// A density tabulated on a uniform grid; the CDF interpolates the
/// cumulative trapezoid sums linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub points: Vec<f64>,
    pub density: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GridDensity {
    pub fn new(points: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points.len() != density.len() {
            return Err(Error::invalid("grid density needs ≥ 2 matching points and values"));
        }
        let mut cumulative = vec![0.0; points.len()];
        for i in 1..points.len() {
            cumulative[i] =
                cumulative[i - 1] + 0.5 * (density[i] + density[i - 1]) * (points[i] - points[i - 1]);
        }
        let total = *cumulative.last().expect("non-empty");
        for c in &mut cumulative {
            *c /= total;
        }
        Ok(Self {
            points,
            density,
            cumulative,
        })
    }
}

impl Cdf for GridDensity {
    fn cdf(&self, x: f64) -> f64 {
        let p = &self.points;
        if x <= p[0] {
            return 0.0;
        }
        if x >= p[p.len() - 1] {
            return 1.0;
        }
        let i = p.partition_point(|&v| v <= x) - 1;
        let f = (x - p[i]) / (p[i + 1] - p[i]);
        self.cumulative[i] + f * (self.cumulative[i + 1] - self.cumulative[i])
    }

    fn support(&self) -> (f64, f64) {
        (self.points[0], self.points[self.points.len() - 1])
    }
}

fn sorted(mut v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("samples".into()));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `∫ |F_n − F| dx` between the empirical CDF of one-dimensional samples and
/// a target CDF.
pub fn wasserstein1_1d(samples: &Matrix, target: &dyn Cdf) -> Result<f64> {
    if samples.cols != 1 {
        return Err(Error::invalid(format!(
            "wasserstein1_1d needs d = 1, got d = {}; use the sliced variant",
            samples.cols
        )));
    }
    w1_sorted_to_cdf(&sorted(samples.data.clone())?, target)
}

fn w1_sorted_to_cdf(xs: &[f64], target: &dyn Cdf) -> Result<f64> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    let (slo, shi) = target.support();
    let lo = slo.min(xs[0]);
    let hi = shi.max(xs[n - 1]);
    const CELLS: usize = 20_000;
    let h = (hi - lo) / CELLS as f64;
    // Breakpoints: the sample jumps merged with a fine uniform grid, so that
    // on every piece the empirical CDF is constant and F is smooth.
    let mut total = 0.0;
    let mut i = 0;
    let mut a = lo;
    let mut next_grid = 1;
    while a < hi {
        let g = if next_grid >= CELLS { hi } else { lo + next_grid as f64 * h };
        let s = if i < n { xs[i] } else { f64::INFINITY };
        let b = g.min(s);
        if b > a {
            let fe = i as f64 / n as f64;
            let m = 0.5 * (a + b);
            let ya = (fe - target.cdf(a)).abs();
            let ym = (fe - target.cdf(m)).abs();
            let yb = (fe - target.cdf(b)).abs();
            total += (b - a) / 6.0 * (ya + 4.0 * ym + yb);
            a = b;
        }
        if s <= g {
            i += 1;
        } else {
            next_grid += 1;
        }
        if next_grid > CELLS && i >= n {
            break;
        }
    }
    Ok(total)
}

/// Exact W1 between two one-dimensional empirical laws.
pub fn wasserstein1_samples_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let (a, b) = (sorted(a.to_vec())?, sorted(b.to_vec())?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut total = 0.0;
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    Ok(total)
}

fn directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x51ce));
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = linalg::norm_sq(&v).sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

pub const SLICES: usize = 32;

fn project(samples: &Matrix, dir: &[f64]) -> Vec<f64> {
    samples.rows_iter().map(|r| linalg::dot(r, dir)).collect()
}

/// Sliced W1 between samples and an isotropic mixture, averaged over
/// 32 seeded random directions.
pub fn sliced_wasserstein1(samples: &Matrix, target: &GaussianMixture, seed: u64) -> Result<f64> {
    if samples.cols != target.dim() {
        return Err(Error::invalid("sample and target dimensions differ"));
    }
    let mut acc = 0.0;
    for dir in directions(samples.cols, SLICES, seed) {
        let proj = GaussianMixture::new(
            target
                .components()
                .iter()
                .map(|c| crate::pretrained::Component {
                    weight: c.weight,
                    mean: vec![linalg::dot(&c.mean, &dir)],
                    variance: c.variance,
                })
                .collect(),
        )?;
        acc += w1_sorted_to_cdf(&sorted(project(samples, &dir))?, &proj)?;
    }
    Ok(acc / SLICES as f64)
}

/// Sliced W1 between two sample sets.
pub fn sliced_wasserstein1_samples(a: &Matrix, b: &Matrix, seed: u64) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::invalid("sample dimensions differ"));
    }
    let mut acc = 0.0;
    for dir in directions(a.cols, SLICES, seed) {
        acc += wasserstein1_samples_1d(&project(a, &dir), &project(b, &dir))?;
    }
    Ok(acc / SLICES as f64)
}

/// W1 for `d = 1`, sliced W1 otherwise.
pub fn distance_to_mixture(samples: &Matrix, target: &GaussianMixture, seed: u64) -> Result<f64> {
    if samples.cols == 1 {
        wasserstein1_1d(samples, target)
    } else {
        sliced_wasserstein1(samples, target, seed)
    }
}

pub const MAX_PAIRS: usize = 100_000;

fn pair_distances(samples: &Matrix, seed: u64) -> Vec<f64> {
    let n = samples.rows;
    let dist = |i: usize, j: usize| {
        let (a, b) = (samples.row(i), samples.row(j));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let all = n * (n - 1) / 2;
    if all <= MAX_PAIRS {
        let mut out = Vec::with_capacity(all);
        for i in 0..n {
            for j in i + 1..n {
                out.push(dist(i, j));
            }
        }
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xd1f));
        (0..MAX_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                dist(i, j)
            })
            .collect()
    }
}

/// Mean Euclidean distance over distinct pairs; at most 10⁵ pairs, drawn
/// with `seed` when subsampling is needed.
pub fn diversity(samples: &Matrix, seed: u64) -> Result<f64> {
    if samples.rows < 2 {
        return Err(Error::invalid("diversity needs at least two samples"));
    }
    Ok(linalg::mean(&pair_distances(samples, seed)))
}

/// Diversity with the standard error of the pair mean. Pairs sharing a
/// sample are correlated, so the SE uses the U-statistic variance
/// `4 ζ₁ / n` estimated from per-sample mean distances.
pub fn diversity_with_se(samples: &Matrix, seed: u64) -> Result<(f64, f64)> {
    let div = diversity(samples, seed)?;
    let n = samples.rows;
    let m = n.min(2000);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xd20));
    let per: Vec<f64> = (0..m)
        .map(|k| {
            let i = if m == n { k } else { rng.random_range(0..n) };
            let js: Vec<usize> = if n <= 200 {
                (0..n).filter(|&j| j != i).collect()
            } else {
                (0..200)
                    .map(|_| {
                        let mut j = rng.random_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        j
                    })
                    .collect()
            };
            let a = samples.row(i);
            let total: f64 = js
                .iter()
                .map(|&j| {
                    a.iter()
                        .zip(samples.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            total / js.len() as f64
        })
        .collect();
    let zeta1 = if per.len() > 1 { linalg::variance(&per) } else { 0.0 };
    Ok((div, (4.0 * zeta1 / n as f64).sqrt()))
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Nonparametric bootstrap standard error of `stat`, 200 seeded resamples.
pub fn bootstrap_se(values: &[f64], seed: u64, stat: impl Fn(&[f64]) -> f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xb007));
    let mut buf = vec![0.0; n];
    let reps: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.random_range(0..n)];
            }
            stat(&buf)
        })
        .collect();
    linalg::variance(&reps).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let (a, b) = (sorted(a.to_vec())?, sorted(b.to_vec())?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// `∫ ‖u(t, x_t)‖² / (2σ(t)²) dt` along each path, left-point rule on the
/// paths' own grid. All paths must share one grid.
pub fn kl_path_metric(paths: &[Trajectory], control: &dyn VectorField, sigma: &dyn Diffusion) -> Result<Vec<f64>> {
    let Some(first) = paths.first() else {
        return Ok(Vec::new());
    };
    let (grid, d) = (first.grid, first.dim);
    if paths.iter().any(|p| p.grid != grid || p.dim != d) {
        return Err(Error::invalid("paths do not share a grid and dimension"));
    }
    let dt = grid.dt();
    let mut kl = vec![0.0; paths.len()];
    let mut xs = Matrix::zeros(paths.len(), d);
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let s = sigma.sigma(t);
        if !(s > 0.0) {
            return Err(Error::invalid(format!("σ({t}) = {s} is not positive")));
        }
        for (r, p) in paths.iter().enumerate() {
            xs.row_mut(r).copy_from_slice(p.state(k));
        }
        let u = control.eval(t, &xs);
        let w = 0.5 * dt / (s * s);
        for (r, acc) in kl.iter_mut().enumerate() {
            *acc += w * linalg::norm_sq(u.row(r));
        }
    }
    Ok(kl)
}

/// A Monte Carlo mean with its bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(values: &[f64], seed: u64) -> Self {
        Self {
            mean: linalg::mean(values),
            se: bootstrap_se(values, seed, linalg::mean),
        }
    }
}

/// Reward, path KL and diversity of one sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub seed: u64,
    pub config_hash: Option<String>,
    /// Mean `r(x_T)`.
    pub reward: Estimate,
    /// Mean `r*(x_T)`, when a genuine reward is configured.
    pub reward_genuine: Option<Estimate>,
    /// `E ∫ ‖u‖²/(2σ²) dt` along the stage-2 paths.
    pub kl_stage2: Estimate,
    /// Stage-1 path KL, an upper bound on `KL(ν̂ ‖ ν_ini)`.
    pub kl_stage1_bound: Option<Estimate>,
    /// Sum of the two terms above.
    pub kl_total: Estimate,
    pub diversity: Estimate,
    /// W1 to the analytic target (sliced in d > 1).
    pub w1_target: Option<f64>,
}

/// Samples `n` paths and scores them.
pub fn evaluate(
    sampler: &Sampler,
    nominal: &Reward,
    genuine: Option<&Reward>,
    target: Option<&TiltedTarget>,
    n: usize,
    seed: u64,
) -> Result<(EvalReport, SampleSet)> {
    if n < 2 {
        return Err(Error::invalid("evaluation needs n ≥ 2"));
    }
    let set = sampler.sample(n, seed)?;
    let x = &set.terminal;
    if !x.is_finite() {
        return Err(Error::NonFinite("terminal samples".into()));
    }
    let total: Vec<f64> = match &set.kl_stage1 {
        Some(k1) => set.kl_stage2.iter().zip(k1).map(|(a, b)| a + b).collect(),
        None => set.kl_stage2.clone(),
    };
    let (div, div_se) = diversity_with_se(x, derive_seed(seed, 0xd1))?;
    let w1_target = match target {
        None => None,
        Some(t) if t.dim() == 1 => Some(wasserstein1_1d(x, t.cdf_view()?.as_ref())?),
        Some(t) => Some(match t.mixture() {
            Some(m) => sliced_wasserstein1(x, m, derive_seed(seed, 0x51))?,
            None => sliced_wasserstein1_samples(x, &t.sample(n, derive_seed(seed, 0x5a))?, derive_seed(seed, 0x51))?,
        }),
    };
    let report = EvalReport {
        n,
        seed,
        config_hash: None,
        reward: Estimate::of(&nominal.values(x), derive_seed(seed, 1)),
        reward_genuine: genuine.map(|g| Estimate::of(&g.values(x), derive_seed(seed, 2))),
        kl_stage2: Estimate::of(&set.kl_stage2, derive_seed(seed, 3)),
        kl_stage1_bound: set.kl_stage1.as_ref().map(|k| Estimate::of(k, derive_seed(seed, 4))),
        kl_total: Estimate::of(&total, derive_seed(seed, 5)),
        diversity: Estimate { mean: div, se: div_se },
        w1_target,
    };
    Ok((report, set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; values outside are clamped into the
    /// end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo < hi) {
            return Err(Error::invalid("histogram needs bins ≥ 1 and lo < hi"));
        }
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * w).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / w).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    /// Range spanning all given value sets.
    pub fn range(sets: &[&[f64]]) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in sets {
            for &v in *s {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("histogram of empty or non-finite values"));
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        Ok((lo, hi))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[k], self.edges[k + 1], c));
        }
        s
    }
}
